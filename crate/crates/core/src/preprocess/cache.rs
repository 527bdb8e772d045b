//! Spectrogram cache files: a 16-byte header (`SPG1`, u32 rows, u32 cols,
//! u32 scale code) then row-major little-endian f32, with a JSON sidecar.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{RealMatrix, Scale, Spectrogram};
use crate::error::{Error, Result};
use crate::io::{atomic_write, read_bytes, read_json, write_json};

const MAGIC: &[u8; 4] = b"SPG1";

/// Label reserved for mined generator samples.
pub const SIMULATED_UNKNOWN: i64 = -1;
const SIMULATED_UNKNOWN_TAG: &str = "SIMULATED_UNKNOWN";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramMeta {
    #[serde(serialize_with = "ser_label", deserialize_with = "de_label")]
    pub label: Option<i64>,
    pub provenance: String,
    #[serde(default)]
    pub degenerate: bool,
}

fn ser_label<S: Serializer>(label: &Option<i64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match label {
        Some(SIMULATED_UNKNOWN) => s.serialize_str(SIMULATED_UNKNOWN_TAG),
        Some(l) => s.serialize_i64(*l),
        None => s.serialize_none(),
    }
}

fn de_label<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<i64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Id(i64),
        Tag(String),
    }
    match Option::<Raw>::deserialize(d)? {
        None => Ok(None),
        Some(Raw::Id(i)) => Ok(Some(i)),
        Some(Raw::Tag(t)) if t == SIMULATED_UNKNOWN_TAG => Ok(Some(SIMULATED_UNKNOWN)),
        Some(Raw::Tag(t)) => Err(serde::de::Error::custom(format!("unknown label tag `{t}`"))),
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn encode_spectrogram(spec: &Spectrogram) -> Vec<u8> {
    let v = &spec.values;
    let mut bytes = Vec::with_capacity(16 + 4 * v.data.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(v.rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(v.cols as u32).to_le_bytes());
    bytes.extend_from_slice(&spec.scale.code().to_le_bytes());
    for x in &v.data {
        bytes.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    bytes
}

pub fn decode_spectrogram(bytes: &[u8], path: &Path) -> Result<(RealMatrix, Scale)> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "missing SPG1 header"));
    }
    let u = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let (rows, cols) = (u(4) as usize, u(8) as usize);
    let scale = Scale::from_code(u(12)).ok_or_else(|| Error::format(path, format!("unknown scale code {}", u(12))))?;
    let body = &bytes[16..];
    if body.len() != rows * cols * 4 {
        return Err(Error::format(
            path,
            format!(
                "{rows}x{cols} needs {} data bytes, found {}",
                rows * cols * 4,
                body.len()
            ),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((RealMatrix::new(rows, cols, data), scale))
}

pub fn write_spectrogram(path: &Path, spec: &Spectrogram, provenance: &str) -> Result<()> {
    atomic_write(path, &encode_spectrogram(spec))?;
    write_json(
        &sidecar_path(path),
        &SpectrogramMeta {
            label: spec.label,
            provenance: provenance.to_string(),
            degenerate: spec.degenerate,
        },
    )
}

pub fn read_spectrogram(path: &Path) -> Result<(Spectrogram, SpectrogramMeta)> {
    let (values, scale) = decode_spectrogram(&read_bytes(path)?, path)?;
    let meta: SpectrogramMeta = read_json(&sidecar_path(path))?;
    Ok((
        Spectrogram {
            values,
            scale,
            label: meta.label,
            degenerate: meta.degenerate,
        },
        meta,
    ))
}

//! Raw I/Q files and atomic file writes.
//!
//! An I/Q recording is stored as `<name>.iq`, little-endian interleaved f32
//! pairs (I then Q), next to `<name>.meta.json`.
//!
//! A labelled spectrogram set is `RFSM`, u32 version, u64 count, u32 rows,
//! u32 cols, then per sample an i64 label and row-major f64 values.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::RealMatrix;
use crate::synth::{IqRecording, Sample, Source};

const SAMPLES_MAGIC: &[u8; 4] = b"RFSM";
const SAMPLES_VERSION: u32 = 1;

/// Writes through a temporary file in the same directory and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IqMeta {
    pub sample_rate_hz: f64,
    pub center_freq_hz: f64,
    pub label: Option<i64>,
    pub source: Source,
}

pub fn iq_meta_path(data: &Path) -> PathBuf {
    data.with_extension("meta.json")
}

pub fn write_iq(path: &Path, rec: &IqRecording) -> Result<()> {
    rec.validate()?;
    let mut bytes = Vec::with_capacity(rec.samples.len() * 8);
    for s in &rec.samples {
        bytes.extend_from_slice(&(s.re as f32).to_le_bytes());
        bytes.extend_from_slice(&(s.im as f32).to_le_bytes());
    }
    atomic_write(path, &bytes)?;
    write_json(
        &iq_meta_path(path),
        &IqMeta {
            sample_rate_hz: rec.sample_rate,
            center_freq_hz: rec.center_frequency,
            label: rec.label,
            source: rec.source,
        },
    )
}

/// Reads samples and sidecar. Externally captured files may carry any `source`.
pub fn read_iq(path: &Path) -> Result<IqRecording> {
    let meta: IqMeta = read_json(&iq_meta_path(path))?;
    let bytes = read_bytes(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format(
            path,
            format!("{} bytes is not a whole number of f32 I/Q pairs", bytes.len()),
        ));
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
    let samples = bytes
        .chunks_exact(8)
        .map(|c| Complex64::new(f(&c[..4]), f(&c[4..])))
        .collect();
    let rec = IqRecording {
        samples,
        sample_rate: meta.sample_rate_hz,
        center_frequency: meta.center_freq_hz,
        label: meta.label,
        source: meta.source,
    };
    rec.validate()?;
    Ok(rec)
}

/// `*.iq` files in `dir`, sorted by name.
pub fn list_iq(dir: &Path) -> Result<Vec<PathBuf>> {
    list_with_extension(dir, "iq")
}

pub fn list_with_extension(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some(ext))
        .collect();
    out.sort();
    Ok(out)
}

/// All samples must share one shape; an empty set stores a 0×0 shape.
pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    let (rows, cols) = samples.first().map_or((0, 0), |s| (s.values.rows, s.values.cols));
    let mut bytes = Vec::with_capacity(24 + samples.len() * (8 + rows * cols * 8));
    bytes.extend_from_slice(SAMPLES_MAGIC);
    bytes.extend_from_slice(&SAMPLES_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&(rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(cols as u32).to_le_bytes());
    for s in samples {
        if (s.values.rows, s.values.cols) != (rows, cols) {
            return Err(Error::Shape(format!(
                "sample of {}x{} in a {rows}x{cols} set",
                s.values.rows, s.values.cols
            )));
        }
        bytes.extend_from_slice(&s.label.to_le_bytes());
        for v in &s.values.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &bytes)
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let bytes = read_bytes(path)?;
    if bytes.len() < 24 || &bytes[..4] != SAMPLES_MAGIC {
        return Err(Error::format(path, "not a sample set"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let version = u32_at(4) as u32;
    if version != SAMPLES_VERSION {
        return Err(Error::format(path, format!("unsupported sample set version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let (rows, cols) = (u32_at(16), u32_at(20));
    let stride = 8 + rows * cols * 8;
    if bytes.len() != 24 + count * stride {
        return Err(Error::format(
            path,
            format!("{} bytes for {count} samples of {rows}x{cols}", bytes.len()),
        ));
    }
    Ok(bytes[24..]
        .chunks_exact(stride)
        .map(|c| Sample {
            label: i64::from_le_bytes(c[..8].try_into().unwrap()),
            values: RealMatrix::new(
                rows,
                cols,
                c[8..]
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
        })
        .collect())
}

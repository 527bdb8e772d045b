//! Recording → normalized spectrogram: sub-slice denoising, windowed STFT,
//! dB magnitude and min-max normalization.

mod cache;

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

pub use cache::{
    decode_spectrogram, encode_spectrogram, read_spectrogram, sidecar_path, write_spectrogram, SpectrogramMeta,
    SIMULATED_UNKNOWN,
};

use crate::error::{Error, Result};
use crate::synth::{mean_power, IqRecording};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowFunction {
    Hann,
    Hamming,
    Rectangular,
}

impl WindowFunction {
    /// Periodic window of length `m`.
    pub fn coefficients(self, m: usize) -> Vec<f64> {
        (0..m)
            .map(|i| {
                let x = 2.0 * PI * i as f64 / m as f64;
                match self {
                    WindowFunction::Hann => 0.5 - 0.5 * x.cos(),
                    WindowFunction::Hamming => 0.54 - 0.46 * x.cos(),
                    WindowFunction::Rectangular => 1.0,
                }
            })
            .collect()
    }
}

impl std::str::FromStr for WindowFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hann" => Ok(Self::Hann),
            "hamming" => Ok(Self::Hamming),
            "rectangular" => Ok(Self::Rectangular),
            other => Err(Error::Config(format!("unknown window function `{other}`"))),
        }
    }
}

/// Windowed two-sided STFT. `freq_pool` adjacent bins are merged (RMS) after
/// the transform so a frame wider than the target bin count can still land on
/// the requested grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop: usize,
    pub window: WindowFunction,
    pub fft_length: usize,
    pub freq_pool: usize,
    /// `(time_frames, frequency_bins)`.
    pub grid: (usize, usize),
}

impl StftConfig {
    /// 8192-sample slices on a 64×64 grid.
    pub fn desk() -> Self {
        StftConfig {
            window_length: 128,
            hop: 128,
            window: WindowFunction::Hann,
            fft_length: 128,
            freq_pool: 2,
            grid: (64, 64),
        }
    }

    /// 300 000-sample slices on a 775×775 grid.
    pub fn paper() -> Self {
        StftConfig {
            window_length: 387,
            hop: 387,
            window: WindowFunction::Hann,
            fft_length: 775,
            freq_pool: 1,
            grid: (775, 775),
        }
    }

    pub fn frames_for(&self, len: usize) -> usize {
        if len < self.window_length {
            0
        } else {
            (len - self.window_length) / self.hop + 1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0 < self.hop && self.hop <= self.window_length && self.window_length <= self.fft_length) {
            return Err(Error::Config(format!(
                "stft requires 0 < hop ({}) <= window_length ({}) <= fft_length ({})",
                self.hop, self.window_length, self.fft_length
            )));
        }
        if self.freq_pool == 0 || !self.fft_length.is_multiple_of(self.freq_pool) {
            return Err(Error::Config(format!(
                "fft_length {} is not divisible by freq_pool {}",
                self.fft_length, self.freq_pool
            )));
        }
        if self.fft_length / self.freq_pool != self.grid.1 {
            return Err(Error::Config(format!(
                "fft_length {} / freq_pool {} does not give {} frequency bins",
                self.fft_length, self.freq_pool, self.grid.1
            )));
        }
        Ok(())
    }

    /// Checks that `len` samples produce exactly `grid.0` frames.
    pub fn validate_for(&self, len: usize) -> Result<()> {
        self.validate()?;
        let frames = self.frames_for(len);
        if frames != self.grid.0 {
            return Err(Error::Config(format!(
                "slice of {len} samples gives {frames} frames with window {} and hop {}, grid wants {}",
                self.window_length, self.hop, self.grid.0
            )));
        }
        Ok(())
    }
}

/// Noise threshold applied to sub-slice mean power.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ThresholdPolicy {
    /// Median sub-slice power of the recording times `factor`.
    MedianFactor {
        factor: f64,
    },
    /// The `quantile` sub-slice power times `factor`.
    QuantileFactor {
        quantile: f64,
        factor: f64,
    },
    Absolute {
        level: f64,
    },
    /// Keep everything.
    Disabled,
}

impl ThresholdPolicy {
    pub fn threshold(&self, powers: &[f64]) -> f64 {
        let quantile = |q: f64| {
            let mut p = powers.to_vec();
            p.sort_by(f64::total_cmp);
            if p.is_empty() {
                return 0.0;
            }
            // lower median for even counts
            let idx = ((p.len() - 1) as f64 * q).floor() as usize;
            p[idx]
        };
        match *self {
            ThresholdPolicy::MedianFactor { factor } => quantile(0.5) * factor,
            ThresholdPolicy::QuantileFactor { quantile: q, factor } => quantile(q) * factor,
            ThresholdPolicy::Absolute { level } => level,
            ThresholdPolicy::Disabled => f64::NEG_INFINITY,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub samples: Vec<Complex64>,
    /// Indices of the retained sub-slices this slice draws samples from.
    pub sub_slices: Vec<usize>,
}

/// Cut into sub-slices of `ceil(target/3)` samples (the last may be short),
/// drop those whose mean power is below the threshold, concatenate the
/// survivors in order and re-cut into whole slices of `target_length`.
pub fn slice_and_denoise(
    recording: &IqRecording,
    target_length: usize,
    policy: &ThresholdPolicy,
) -> Result<Vec<Slice>> {
    recording.validate()?;
    if target_length == 0 {
        return Err(Error::Invalid("target slice length is zero".into()));
    }
    if recording.samples.len() < target_length {
        return Err(Error::Invalid(format!(
            "recording of {} samples is shorter than one slice ({target_length})",
            recording.samples.len()
        )));
    }
    let sub_len = target_length.div_ceil(3);
    let subs: Vec<&[Complex64]> = recording.samples.chunks(sub_len).collect();
    let powers: Vec<f64> = subs.iter().map(|s| mean_power(s)).collect();
    let threshold = policy.threshold(&powers);

    let mut out = Vec::new();
    let mut current = Vec::with_capacity(target_length);
    let mut origin = Vec::new();
    for (i, sub) in subs.iter().enumerate() {
        if powers[i] < threshold {
            continue;
        }
        let mut rest: &[Complex64] = sub;
        while !rest.is_empty() {
            if origin.last() != Some(&i) {
                origin.push(i);
            }
            let take = (target_length - current.len()).min(rest.len());
            current.extend_from_slice(&rest[..take]);
            rest = &rest[take..];
            if current.len() == target_length {
                out.push(Slice {
                    samples: std::mem::replace(&mut current, Vec::with_capacity(target_length)),
                    sub_slices: std::mem::take(&mut origin),
                });
            }
        }
    }
    Ok(out)
}

/// Complex time-frequency matrix, row-major `(frames, bins)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn at(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }
}

/// `X[n, q] = Σ_m w[m] · r[n·hop + m] · exp(-j2π q m / fft_length)` for
/// `q = 0..fft_length` (unshifted, two-sided).
pub fn stft(samples: &[Complex64], cfg: &StftConfig) -> Result<ComplexMatrix> {
    cfg.validate_for(samples.len())?;
    let frames = cfg.grid.0;
    let win = cfg.window.coefficients(cfg.window_length);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_length);
    let mut data = Vec::with_capacity(frames * cfg.fft_length);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_length];
    for n in 0..frames {
        let start = n * cfg.hop;
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        for m in 0..cfg.window_length {
            buf[m] = samples[start + m] * win[m];
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf);
    }
    Ok(ComplexMatrix {
        rows: frames,
        cols: cfg.fft_length,
        data,
    })
}

/// Real matrix, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RealMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        RealMatrix { rows, cols, data }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> RealMatrix {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        RealMatrix::new(self.cols, self.rows, data)
    }
}

/// Magnitudes with DC moved to the center bin and `pool` adjacent bins merged by RMS.
pub fn shifted_magnitude(x: &ComplexMatrix, pool: usize) -> RealMatrix {
    let half = x.cols / 2;
    let out_cols = x.cols / pool;
    let mut data = Vec::with_capacity(x.rows * out_cols);
    for r in 0..x.rows {
        for oc in 0..out_cols {
            let mut p = 0.0;
            for k in 0..pool {
                let shifted = oc * pool + k;
                let q = (shifted + x.cols - half) % x.cols;
                p += x.at(r, q).norm_sqr();
            }
            data.push((p / pool as f64).sqrt());
        }
    }
    RealMatrix::new(x.rows, out_cols, data)
}

pub const DB_FLOOR: f64 = 1e-12;

/// `20·log10(|X| + floor)` entry-wise.
pub fn power_db(x: &ComplexMatrix, floor: f64) -> RealMatrix {
    RealMatrix::new(
        x.rows,
        x.cols,
        x.data.iter().map(|v| 20.0 * (v.norm() + floor).log10()).collect(),
    )
}

pub fn magnitude_db(mag: &RealMatrix, floor: f64) -> RealMatrix {
    RealMatrix::new(
        mag.rows,
        mag.cols,
        mag.data.iter().map(|v| 20.0 * (v + floor).log10()).collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Normalized,
    Db,
    Linear,
}

impl Scale {
    pub fn code(self) -> u32 {
        match self {
            Scale::Normalized => 0,
            Scale::Db => 1,
            Scale::Linear => 2,
        }
    }

    pub fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(Scale::Normalized),
            1 => Some(Scale::Db),
            2 => Some(Scale::Linear),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrogram {
    /// `(time_frames, frequency_bins)`.
    pub values: RealMatrix,
    pub scale: Scale,
    pub label: Option<i64>,
    /// Set when normalization saw a constant matrix.
    pub degenerate: bool,
}

/// `(x - min) / (max - min)`; a constant matrix maps to zeros with the degenerate flag.
pub fn normalize(db: &RealMatrix) -> Spectrogram {
    let (lo, hi) = db
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let degenerate = !(hi > lo);
    let data = if degenerate {
        vec![0.0; db.data.len()]
    } else {
        let span = hi - lo;
        db.data.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
    };
    Spectrogram {
        values: RealMatrix::new(db.rows, db.cols, data),
        scale: Scale::Normalized,
        label: None,
        degenerate,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub slice_samples: usize,
    pub stft: StftConfig,
    pub threshold: ThresholdPolicy,
    /// When false every sub-slice is kept.
    pub denoise: bool,
    pub db_floor: f64,
}

impl PreprocessConfig {
    pub fn desk() -> Self {
        PreprocessConfig {
            slice_samples: 8192,
            stft: StftConfig::desk(),
            threshold: ThresholdPolicy::MedianFactor { factor: 2.0 },
            denoise: true,
            db_floor: DB_FLOOR,
        }
    }

    pub fn paper() -> Self {
        PreprocessConfig {
            slice_samples: 300_000,
            stft: StftConfig::paper(),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate_for(self.slice_samples)
    }

    fn policy(&self) -> ThresholdPolicy {
        if self.denoise {
            self.threshold
        } else {
            ThresholdPolicy::Disabled
        }
    }
}

pub fn spectrogram_of(samples: &[Complex64], cfg: &PreprocessConfig) -> Result<Spectrogram> {
    let x = stft(samples, &cfg.stft)?;
    let mag = shifted_magnitude(&x, cfg.stft.freq_pool);
    Ok(normalize(&magnitude_db(&mag, cfg.db_floor)))
}

/// Slicing, denoising, STFT, dB and normalization for one recording. Slices
/// whose spectrogram is degenerate are skipped.
pub fn preprocess_pipeline(recording: &IqRecording, cfg: &PreprocessConfig) -> Result<Vec<Spectrogram>> {
    cfg.validate()?;
    let slices = slice_and_denoise(recording, cfg.slice_samples, &cfg.policy())?;
    let mut out = Vec::with_capacity(slices.len());
    for s in &slices {
        let mut spec = spectrogram_of(&s.samples, cfg)?;
        if spec.degenerate {
            continue;
        }
        spec.label = recording.label;
        out.push(spec);
    }
    Ok(out)
}

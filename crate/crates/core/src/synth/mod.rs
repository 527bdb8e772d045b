//! Synthetic UAV-like I/Q recordings and the air-to-ground channel.
//!
//! A class is described by a [`SignalProfile`]: a wide video-transmission
//! burst train (band-limited noise under a root-raised-cosine mask, hopping
//! over `hop_set`) plus narrow periodic control bursts. [`apply_channel`]
//! scales by the path loss, rotates by the wobble phase and adds complex
//! Gaussian noise.

mod dataset;

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

pub use dataset::{
    build_dataset, class_slices, default_profiles, profile_distance, split_dataset, DatasetSpec, Sample,
    SpectrogramDataset, REFERENCE_KNOWN, REFERENCE_UNKNOWN,
};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalProfile {
    pub class_id: i64,
    /// Occupied bandwidth of the video-transmission bursts, Hz.
    pub vts_bandwidth: f64,
    pub vts_duty_cycle: f64,
    /// Seconds.
    pub vts_period: f64,
    /// Seconds.
    pub control_burst_width: f64,
    /// Bursts per second.
    pub control_burst_rate: f64,
    /// Center offset of the control bursts, Hz.
    pub control_offset: f64,
    /// Center-frequency offsets visited cyclically by the video bursts, Hz.
    pub hop_set: Vec<f64>,
    /// Seconds spent on each hop.
    pub hop_dwell: f64,
    /// Linear RMS amplitude of the video bursts; control bursts use half.
    pub amplitude: f64,
}

/// Bandwidth of the control bursts as a fraction of the sample rate.
const CONTROL_BANDWIDTH_FRAC: f64 = 1.0 / 64.0;
const RRC_ROLLOFF: f64 = 0.25;
const NOISE_BLOCK: usize = 16384;

impl SignalProfile {
    pub fn validate(&self, sample_rate: f64) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("profile {}: {m}", self.class_id)));
        if !(self.vts_duty_cycle > 0.0 && self.vts_duty_cycle <= 1.0) {
            return bad(format!("duty cycle {} outside (0, 1]", self.vts_duty_cycle));
        }
        for (name, v) in [
            ("vts_bandwidth", self.vts_bandwidth),
            ("vts_period", self.vts_period),
            ("control_burst_width", self.control_burst_width),
            ("control_burst_rate", self.control_burst_rate),
            ("hop_dwell", self.hop_dwell),
            ("amplitude", self.amplitude),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be strictly positive, got {v}"));
            }
        }
        if self.hop_set.is_empty() {
            return bad("hop_set is empty".into());
        }
        let limit = sample_rate / 2.0 - self.vts_bandwidth / 2.0;
        if let Some(f) = self.hop_set.iter().find(|f| f.abs() > limit) {
            return bad(format!("hop offset {f} Hz exceeds +/-{limit} Hz"));
        }
        let climit = sample_rate / 2.0 - sample_rate * CONTROL_BANDWIDTH_FRAC / 2.0;
        if self.control_offset.abs() > climit {
            return bad(format!(
                "control offset {} Hz exceeds +/-{climit} Hz",
                self.control_offset
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Synthetic,
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IqRecording {
    pub samples: Vec<Complex64>,
    pub sample_rate: f64,
    pub center_frequency: f64,
    pub label: Option<i64>,
    pub source: Source,
}

impl IqRecording {
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Invalid("recording has no samples".into()));
        }
        if !(self.sample_rate > 0.0) {
            return Err(Error::Invalid(format!(
                "sample rate {} must be positive",
                self.sample_rate
            )));
        }
        Ok(())
    }

    pub fn mean_power(&self) -> f64 {
        mean_power(&self.samples)
    }
}

pub fn mean_power(x: &[Complex64]) -> f64 {
    x.iter().map(|s| s.norm_sqr()).sum::<f64>() / x.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PathLoss {
    /// `(lambda / (4 pi d))^2`.
    FreeSpace,
    /// Free space up to 1 m, then `d^-exponent`.
    LogDistance { exponent: f64 },
    /// Unit gain.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Wobble {
    /// `Δd ~ U[0, scale]`.
    Uniform { scale: f64 },
    /// `Δd ~ N(0, scale²)`.
    Gaussian { scale: f64 },
    /// Constant `Δd`.
    Fixed { delta: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelParams {
    pub distance: f64,
    pub path_loss: PathLoss,
    pub wavelength: f64,
    pub wobble: Wobble,
    /// Samples sharing one wobble draw.
    pub wobble_block: usize,
    pub noise_variance: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        // 2.4 GHz link at 100 m
        ChannelParams {
            distance: 100.0,
            path_loss: PathLoss::FreeSpace,
            wavelength: 0.125,
            wobble: Wobble::Uniform { scale: 0.125 },
            wobble_block: 1024,
            noise_variance: 0.0,
        }
    }
}

impl ChannelParams {
    pub fn identity() -> Self {
        ChannelParams {
            distance: 1.0,
            path_loss: PathLoss::None,
            wavelength: 1.0,
            wobble: Wobble::Fixed { delta: 0.0 },
            wobble_block: 1024,
            noise_variance: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.distance > 0.0) || !(self.wavelength > 0.0) || !(self.noise_variance >= 0.0) {
            return Err(Error::Invalid(format!(
                "channel needs distance > 0, wavelength > 0, noise variance >= 0 (got {}, {}, {})",
                self.distance, self.wavelength, self.noise_variance
            )));
        }
        if self.wobble_block == 0 {
            return Err(Error::Invalid("wobble block must be at least one sample".into()));
        }
        Ok(())
    }

    pub fn path_loss_gain(&self) -> f64 {
        let fs = |d: f64| (self.wavelength / (4.0 * PI * d)).powi(2);
        match self.path_loss {
            PathLoss::FreeSpace => fs(self.distance),
            PathLoss::LogDistance { exponent } => fs(1.0) * self.distance.powf(-exponent),
            PathLoss::None => 1.0,
        }
    }

    /// Noise variance giving `snr_db` for a clean signal of mean power `signal_power`
    /// after path loss.
    pub fn noise_for_snr(&self, signal_power: f64, snr_db: f64) -> f64 {
        self.path_loss_gain() * signal_power / 10f64.powf(snr_db / 10.0)
    }
}

/// Boolean on/off envelope of the video bursts; on-intervals start at `t = 0`.
pub fn vts_envelope(profile: &SignalProfile, n: usize, sample_rate: f64) -> Vec<bool> {
    let on = profile.vts_duty_cycle * profile.vts_period;
    (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate;
            let phase = t - (t / profile.vts_period).floor() * profile.vts_period;
            phase < on - 1e-15
        })
        .collect()
}

/// Root-raised-cosine-like magnitude mask for a band of width `bw` (Hz).
fn rrc_mask(freq: f64, bw: f64) -> f64 {
    let f = freq.abs();
    let lo = (1.0 - RRC_ROLLOFF) * bw / 2.0;
    let hi = (1.0 + RRC_ROLLOFF) * bw / 2.0;
    if f <= lo {
        1.0
    } else if f >= hi {
        0.0
    } else {
        (0.5 * (1.0 + (PI * (f - lo) / (RRC_ROLLOFF * bw)).cos())).sqrt()
    }
}

/// Unit-power complex Gaussian noise band-limited to `bw` around DC.
fn band_limited_noise(n: usize, bw: f64, sample_rate: f64, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(NOISE_BLOCK);
    let inv = planner.plan_fft_inverse(NOISE_BLOCK);
    let mask: Vec<f64> = (0..NOISE_BLOCK)
        .map(|k| {
            let kk = if k < NOISE_BLOCK / 2 {
                k as f64
            } else {
                k as f64 - NOISE_BLOCK as f64
            };
            rrc_mask(kk * sample_rate / NOISE_BLOCK as f64, bw)
        })
        .collect();
    let gain = (NOISE_BLOCK as f64 / mask.iter().map(|m| m * m).sum::<f64>()).sqrt() / NOISE_BLOCK as f64;
    let mut out = Vec::with_capacity(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); NOISE_BLOCK];
    while out.len() < n {
        for b in buf.iter_mut() {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            *b = Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2;
        }
        fwd.process(&mut buf);
        for (b, m) in buf.iter_mut().zip(&mask) {
            *b *= m * gain;
        }
        inv.process(&mut buf);
        let take = (n - out.len()).min(NOISE_BLOCK);
        out.extend_from_slice(&buf[..take]);
    }
    out
}

/// Clean (noise-free, unit-gain) recording for one class. The arithmetic is
/// sequential in sample order so a seed reproduces the same samples.
pub fn synthesize_clean(profile: &SignalProfile, duration: f64, sample_rate: f64, seed: u64) -> Result<IqRecording> {
    profile.validate(sample_rate)?;
    let n = (duration * sample_rate).round() as usize;
    if n == 0 {
        return Err(Error::Invalid(format!(
            "duration {duration} s at {sample_rate} Hz yields no samples"
        )));
    }
    let mut rng = seed::rng(seed, 0x5157_4e54);
    let envelope = vts_envelope(profile, n, sample_rate);
    let noise = band_limited_noise(n, profile.vts_bandwidth, sample_rate, &mut rng);

    let mut samples = Vec::with_capacity(n);
    let mut phase = 0.0f64;
    for (i, (on, z)) in envelope.iter().zip(&noise).enumerate() {
        let t = i as f64 / sample_rate;
        let hop = (t / profile.hop_dwell).floor() as usize % profile.hop_set.len();
        let f = profile.hop_set[hop];
        let s = if *on {
            *z * Complex64::from_polar(profile.amplitude, phase)
        } else {
            Complex64::new(0.0, 0.0)
        };
        phase = (phase + 2.0 * PI * f / sample_rate).rem_euclid(2.0 * PI);
        samples.push(s);
    }

    // control bursts: short tones with a random phase per burst
    let burst_len = ((profile.control_burst_width * sample_rate).round() as usize).max(1);
    let interval = sample_rate / profile.control_burst_rate;
    let amp = 0.5 * profile.amplitude;
    let w = 2.0 * PI * profile.control_offset / sample_rate;
    let mut k = 0usize;
    loop {
        let start = (k as f64 * interval).round() as usize;
        if start >= n {
            break;
        }
        let phi0: f64 = rng.random_range(0.0..2.0 * PI);
        for i in start..(start + burst_len).min(n) {
            samples[i] += Complex64::from_polar(amp, phi0 + w * (i - start) as f64);
        }
        k += 1;
    }

    Ok(IqRecording {
        samples,
        sample_rate,
        center_frequency: 0.0,
        label: Some(profile.class_id),
        source: Source::Synthetic,
    })
}

/// `r = sqrt(PL(d)) · exp(-j 2π Δd / λ) · s + η`, with one `Δd` draw per
/// `wobble_block` samples and `η ~ CN(0, σ²)`.
pub fn apply_channel(clean: &IqRecording, channel: &ChannelParams, seed: u64) -> Result<IqRecording> {
    clean.validate()?;
    channel.validate()?;
    // separate streams so the wobble draws do not depend on the noise level
    let mut rng = seed::rng(seed, 0x4348_414e);
    let mut noise_rng = seed::rng(seed, 0x4e4f_4953);
    let gain = channel.path_loss_gain().sqrt();
    let sigma = (channel.noise_variance / 2.0).sqrt();
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(clean.samples.len());
    for block in clean.samples.chunks(channel.wobble_block) {
        let delta = match channel.wobble {
            Wobble::Uniform { scale } => {
                if scale > 0.0 {
                    rng.random_range(0.0..scale)
                } else {
                    0.0
                }
            }
            Wobble::Gaussian { scale } => scale * gauss.sample(&mut rng),
            Wobble::Fixed { delta } => delta,
        };
        let rot = Complex64::from_polar(gain, -2.0 * PI * delta / channel.wavelength);
        for s in block {
            let mut r = rot * s;
            if sigma > 0.0 {
                r += Complex64::new(
                    sigma * gauss.sample(&mut noise_rng),
                    sigma * gauss.sample(&mut noise_rng),
                );
            }
            out.push(r);
        }
    }
    Ok(IqRecording {
        samples: out,
        ..clean.clone()
    })
}

#[cfg(test)]
mod tests;

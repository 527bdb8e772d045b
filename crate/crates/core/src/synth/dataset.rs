use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{apply_channel, synthesize_clean, ChannelParams, SignalProfile};
use crate::error::{Error, Result};
use crate::preprocess::{preprocess_pipeline, PreprocessConfig, RealMatrix};
use crate::seed;

/// Known and unknown class ids of the 25-class reference split (index letters A..Y).
pub const REFERENCE_KNOWN: [i64; 20] = [0, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 18, 20, 21, 23];
pub const REFERENCE_UNKNOWN: [i64; 5] = [1, 17, 19, 22, 24];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub label: i64,
    pub values: RealMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramDataset {
    pub grid: (usize, usize),
    pub known_classes: Vec<i64>,
    pub unknown_classes: Vec<i64>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SpectrogramDataset {
    pub fn is_known(&self, label: i64) -> bool {
        self.known_classes.contains(&label)
    }

    /// Position of `label` among the known classes, i.e. its logit index.
    pub fn class_index(&self, label: i64) -> Option<usize> {
        self.known_classes.iter().position(|&c| c == label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub known: Vec<SignalProfile>,
    pub unknown: Vec<SignalProfile>,
    pub sample_rate: f64,
    pub channel: ChannelParams,
    /// When set, the noise variance of each recording is chosen for this SNR
    /// and `channel.noise_variance` is ignored.
    pub snr_db: Option<f64>,
    pub slices_per_class: usize,
    /// Fraction of each known class's slices that go to the train split.
    pub train_fraction: f64,
    /// Length of each synthesized recording, in slices.
    pub recording_slices: usize,
    /// Recordings tried per class before giving up.
    pub max_recordings: usize,
    pub preprocess: PreprocessConfig,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn train_per_class(&self) -> usize {
        (self.slices_per_class as f64 * self.train_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.known.len() < 2 || self.unknown.is_empty() {
            return Err(Error::Invalid(format!(
                "need at least 2 known and 1 unknown class, got {} and {}",
                self.known.len(),
                self.unknown.len()
            )));
        }
        let mut ids: Vec<i64> = self.known.iter().chain(&self.unknown).map(|p| p.class_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Invalid("class ids must be distinct".into()));
        }
        if ids.iter().any(|&i| i < 0) {
            return Err(Error::Invalid("negative class ids are reserved".into()));
        }
        if self.slices_per_class == 0 || self.recording_slices == 0 || self.max_recordings == 0 {
            return Err(Error::Invalid("slice and recording counts must be positive".into()));
        }
        let n_train = self.train_per_class();
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) || n_train == 0 || n_train == self.slices_per_class
        {
            return Err(Error::Invalid(format!(
                "train fraction {} leaves an empty split at {} slices per class",
                self.train_fraction, self.slices_per_class
            )));
        }
        self.channel.validate()?;
        self.preprocess.validate()
    }
}

/// Spectrograms for one class, in generation order.
pub fn class_slices(spec: &DatasetSpec, profile: &SignalProfile) -> Result<Vec<RealMatrix>> {
    let class_seed = seed::derive(spec.seed, profile.class_id as u64);
    let duration = (spec.recording_slices * spec.preprocess.slice_samples) as f64 / spec.sample_rate;
    let mut out = Vec::with_capacity(spec.slices_per_class);
    for r in 0..spec.max_recordings {
        let rec_seed = seed::derive(class_seed, r as u64);
        let clean = synthesize_clean(profile, duration, spec.sample_rate, rec_seed)?;
        let mut channel = spec.channel.clone();
        if let Some(snr) = spec.snr_db {
            channel.noise_variance = channel.noise_for_snr(clean.mean_power(), snr);
        }
        let received = apply_channel(&clean, &channel, rec_seed)?;
        for s in preprocess_pipeline(&received, &spec.preprocess)? {
            out.push(s.values);
            if out.len() == spec.slices_per_class {
                return Ok(out);
            }
        }
    }
    Err(Error::Insufficient(format!(
        "class {} yielded {} of {} slices from {} recordings",
        profile.class_id,
        out.len(),
        spec.slices_per_class,
        spec.max_recordings
    )))
}

/// Synthesizes, passes through the channel, preprocesses and splits. Unknown
/// classes go entirely to the test split; each known class contributes
/// `train_per_class` slices to train and the rest to test.
pub fn build_dataset(spec: &DatasetSpec) -> Result<SpectrogramDataset> {
    spec.validate()?;
    let profiles: Vec<&SignalProfile> = spec.known.iter().chain(&spec.unknown).collect();
    let per_class: Vec<Vec<RealMatrix>> = profiles
        .par_iter()
        .map(|p| class_slices(spec, p))
        .collect::<Result<_>>()?;

    let classes: Vec<(i64, bool, Vec<RealMatrix>)> = profiles
        .iter()
        .zip(per_class)
        .map(|(p, slices)| (p.class_id, spec.known.iter().any(|k| k.class_id == p.class_id), slices))
        .collect();
    Ok(split_dataset(
        classes,
        spec.train_per_class(),
        spec.preprocess.stft.grid,
        spec.seed,
    ))
}

/// Seeded per-class split of `(class_id, known, slices)`: the first `n_train`
/// shuffled slices of a known class go to train, everything else to test.
pub fn split_dataset(
    classes: Vec<(i64, bool, Vec<RealMatrix>)>,
    n_train: usize,
    grid: (usize, usize),
    seed: u64,
) -> SpectrogramDataset {
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut known_classes = Vec::new();
    let mut unknown_classes = Vec::new();
    for (id, known, slices) in classes {
        if known {
            known_classes.push(id);
        } else {
            unknown_classes.push(id);
        }
        let mut order: Vec<usize> = (0..slices.len()).collect();
        order.shuffle(&mut seed::rng(seed, 0x5350_4c54 ^ id as u64));
        let mut slices: Vec<Option<RealMatrix>> = slices.into_iter().map(Some).collect();
        for (rank, &i) in order.iter().enumerate() {
            let sample = Sample {
                label: id,
                values: slices[i].take().expect("each slice taken once"),
            };
            if known && rank < n_train {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    SpectrogramDataset {
        grid,
        known_classes,
        unknown_classes,
        train,
        test,
    }
}

/// Largest distance from a point of one set to the nearest point of the other.
fn hausdorff(a: &[f64], b: &[f64]) -> f64 {
    let one_way = |x: &[f64], y: &[f64]| {
        x.iter()
            .map(|p| y.iter().map(|q| (p - q).abs()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    one_way(a, b).max(one_way(b, a))
}

/// Spectral distance between two profiles in units of the sample rate:
/// bandwidth difference plus hop-set Hausdorff distance.
pub fn profile_distance(a: &SignalProfile, b: &SignalProfile, sample_rate: f64) -> f64 {
    ((a.vts_bandwidth - b.vts_bandwidth).abs() + hausdorff(&a.hop_set, &b.hop_set)) / sample_rate
}

/// Random profiles for `ids` whose pairwise [`profile_distance`] is at least
/// `separation`. Timings scale with `slice_duration` so that the bursts stay
/// sparse relative to the denoising sub-slices.
pub fn default_profiles(
    ids: &[i64],
    sample_rate: f64,
    slice_duration: f64,
    separation: f64,
    seed: u64,
) -> Result<Vec<SignalProfile>> {
    let mut rng = seed::rng(seed, 0x5052_4f46);
    let mut out: Vec<SignalProfile> = Vec::with_capacity(ids.len());
    for &id in ids {
        let mut placed = false;
        for _ in 0..10_000 {
            let bw_frac = rng.random_range(0.06..0.30);
            let limit = 0.5 - bw_frac / 2.0 - 0.02;
            let hops = rng.random_range(1..=3);
            let hop_set: Vec<f64> = (0..hops)
                .map(|_| rng.random_range(-limit..limit) * sample_rate)
                .collect();
            let period = rng.random_range(4.0..8.0) * slice_duration;
            let p = SignalProfile {
                class_id: id,
                vts_bandwidth: bw_frac * sample_rate,
                vts_duty_cycle: rng.random_range(0.12..0.30),
                vts_period: period,
                control_burst_width: rng.random_range(0.02..0.05) * slice_duration,
                control_burst_rate: 1.0 / (rng.random_range(2.0..4.0) * slice_duration),
                control_offset: rng.random_range(-0.45..0.45) * sample_rate,
                hop_set,
                hop_dwell: rng.random_range(0.2..0.6) * slice_duration,
                amplitude: 1.0,
            };
            if out.iter().all(|q| profile_distance(&p, q, sample_rate) >= separation) {
                p.validate(sample_rate)?;
                out.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place {} profiles at separation {separation}",
                ids.len()
            )));
        }
    }
    Ok(out)
}

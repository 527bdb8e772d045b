//! Experiment configuration and the staged end-to-end run.
//!
//! A config file is TOML with one table per module. Keys left out take the
//! value of the selected profile; unknown keys are rejected with their path.

mod run;

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use run::{
    full_run, paired_run, read_dataset, run_until, RunManifest, RunReport, StageRecord, StageStatus, MANIFEST_VERSION,
    STAGES,
};

use crate::embednet::ModelConfig;
use crate::error::{Error, Result};
use crate::openmax::CalibrationConfig;
use crate::preprocess::PreprocessConfig;
use crate::seed;
use crate::simunknown::{GanConfig, MiningConfig};
use crate::supcon::TrainConfig;
use crate::synth::{default_profiles, ChannelParams, DatasetSpec, REFERENCE_KNOWN, REFERENCE_UNKNOWN};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Config(format!("unknown profile `{s}` (desk or paper)"))),
        }
    }
}

/// Component switches for the comparison runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Texture branch only.
    NoTransformer,
    /// Cross-entropy training of the whole network instead of contrastive pretraining.
    NoSupcon,
    /// Contrastive training of the texture branch alone; same as `no-transformer`.
    SupconOnly,
    /// Keep every sub-slice.
    NoDenoise,
    /// Retrain the whole network with the simulated unknowns.
    NoFreeze,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::NoTransformer,
        Ablation::NoSupcon,
        Ablation::SupconOnly,
        Ablation::NoDenoise,
        Ablation::NoFreeze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoTransformer => "no-transformer",
            Ablation::NoSupcon => "no-supcon",
            Ablation::SupconOnly => "supcon-only",
            Ablation::NoDenoise => "no-denoise",
            Ablation::NoFreeze => "no-freeze",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Directory of labelled `.iq` recordings; when set nothing is synthesized.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    pub known_ids: Vec<i64>,
    pub unknown_ids: Vec<i64>,
    pub sample_rate: f64,
    /// Minimum pairwise profile distance, as a fraction of the sample rate.
    pub separation: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    pub slices_per_class: usize,
    pub train_fraction: f64,
    pub recording_slices: usize,
    pub max_recordings: usize,
    pub channel: ChannelParams,
}

impl SynthConfig {
    pub fn desk() -> Self {
        SynthConfig {
            data_dir: None,
            known_ids: (0..6).collect(),
            unknown_ids: vec![6, 7],
            sample_rate: 10e6,
            separation: 0.08,
            snr_db: Some(20.0),
            slices_per_class: 200,
            train_fraction: 0.7,
            recording_slices: 16,
            max_recordings: 256,
            channel: ChannelParams::default(),
        }
    }

    pub fn paper() -> Self {
        SynthConfig {
            known_ids: REFERENCE_KNOWN.to_vec(),
            unknown_ids: REFERENCE_UNKNOWN.to_vec(),
            sample_rate: 100e6,
            separation: 0.05,
            ..Self::desk()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Inference batch size.
    pub chunk: usize,
    pub projection: bool,
    /// Cap on projected points; the test set is strided down to it.
    pub projection_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            chunk: 64,
            projection: true,
            projection_points: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    /// Master seed; every module seed is derived from it at run time.
    pub seed: u64,
    pub ablations: Vec<Ablation>,
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gan: GanConfig,
    pub mining: MiningConfig,
    pub calibration: CalibrationConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        ExperimentConfig {
            profile: Profile::Desk,
            seed: 0,
            ablations: Vec::new(),
            synth: SynthConfig::desk(),
            preprocess: PreprocessConfig::desk(),
            model: ModelConfig {
                stem_channels: 8,
                stage_channels: vec![8, 16, 32, 64],
                blocks_per_stage: 1,
                model_dim: 32,
                pre_hidden: vec![32],
                gamma: 32,
                ffn_dim: 64,
                post_hidden: vec![32],
                branch_dim: 32,
                fusion_hidden: vec![64],
                fused_dim: 64,
                projection_hidden: vec![64],
                projection_dim: 32,
                num_classes: 6,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            gan: GanConfig::default(),
            mining: MiningConfig::default(),
            calibration: CalibrationConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn paper() -> Self {
        let synth = SynthConfig::paper();
        ExperimentConfig {
            profile: Profile::Paper,
            model: ModelConfig {
                num_classes: synth.known_ids.len(),
                ..ModelConfig::paper()
            },
            synth,
            preprocess: PreprocessConfig::paper(),
            train: TrainConfig::paper(),
            gan: GanConfig {
                generator_channels: vec![64, 32, 16, 8],
                critic_channels: vec![8, 16, 32, 64],
                ..GanConfig::default()
            },
            ..Self::desk()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    pub fn with_ablation(&self, a: Ablation) -> Self {
        let mut c = self.clone();
        if !c.has(a) {
            c.ablations.push(a);
            c.ablations.sort();
        }
        c
    }

    /// Checks cross-section invariants; messages name the offending key.
    pub fn validate(&self) -> Result<()> {
        let key = |k: &str, m: String| Err(Error::Config(format!("`{k}`: {m}")));
        if self.profile == Profile::Paper {
            for (k, got, want) in [
                ("train.batch_size", self.train.batch_size, 128),
                ("train.pretrain_epochs", self.train.pretrain_epochs, 30),
                ("train.finetune_epochs", self.train.finetune_epochs, 10),
                ("preprocess.stft.grid[0]", self.preprocess.stft.grid.0, 775),
                ("preprocess.stft.grid[1]", self.preprocess.stft.grid.1, 775),
            ] {
                if got != want {
                    return key(k, format!("profile `paper` pins {want}, got {got}"));
                }
            }
        }
        if self.model.grid != self.preprocess.stft.grid {
            return key(
                "model.grid",
                format!(
                    "{:?} differs from preprocess.stft.grid {:?}",
                    self.model.grid, self.preprocess.stft.grid
                ),
            );
        }
        if self.model.num_classes != self.synth.known_ids.len() {
            return key(
                "model.num_classes",
                format!(
                    "{} but synth.known_ids has {}",
                    self.model.num_classes,
                    self.synth.known_ids.len()
                ),
            );
        }
        if !(self.synth.sample_rate > 0.0) {
            return key("synth.sample_rate", "must be positive".into());
        }
        if !(self.synth.separation >= 0.0) {
            return key("synth.separation", "must be non-negative".into());
        }
        if self.calibration.alpha > self.synth.known_ids.len() {
            return key(
                "calibration.alpha",
                format!(
                    "{} exceeds {} known classes",
                    self.calibration.alpha,
                    self.synth.known_ids.len()
                ),
            );
        }
        if self.eval.chunk == 0 {
            return key("eval.chunk", "must be positive".into());
        }
        let wrap = |k: &'static str| move |e: Error| Error::Config(format!("`{k}`: {e}"));
        self.preprocess.validate().map_err(wrap("preprocess"))?;
        self.model.validate().map_err(wrap("model"))?;
        self.train.validate().map_err(wrap("train"))?;
        self.gan.validate(self.model.grid).map_err(wrap("gan"))?;
        self.calibration.validate().map_err(wrap("calibration"))?;
        if self.synth.data_dir.is_none() {
            self.dataset_spec()?.validate().map_err(wrap("synth"))?;
        }
        Ok(())
    }

    /// Copy with denoising, model switches and every module seed applied.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if c.has(Ablation::NoDenoise) {
            c.preprocess.denoise = false;
        }
        if c.has(Ablation::NoTransformer) || c.has(Ablation::SupconOnly) {
            c.model.texture_only = true;
        }
        c.train.seed = sub_seed(c.seed, 1);
        c.gan.seed = sub_seed(c.seed, 2);
        c.mining.seed = sub_seed(c.seed, 3);
        c
    }

    pub fn model_seed(&self) -> u64 {
        sub_seed(self.seed, 4)
    }

    /// Synthetic dataset description: seeded profiles for the configured ids.
    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let s = &self.synth;
        let ids: Vec<i64> = s.known_ids.iter().chain(&s.unknown_ids).copied().collect();
        let slice_duration = self.preprocess.slice_samples as f64 / s.sample_rate;
        let profiles = default_profiles(&ids, s.sample_rate, slice_duration, s.separation, self.seed)?;
        let (known, unknown) = profiles.split_at(s.known_ids.len());
        Ok(DatasetSpec {
            known: known.to_vec(),
            unknown: unknown.to_vec(),
            sample_rate: s.sample_rate,
            channel: s.channel.clone(),
            snr_db: s.snr_db,
            slices_per_class: s.slices_per_class,
            train_fraction: s.train_fraction,
            recording_slices: s.recording_slices,
            max_recordings: s.max_recordings,
            preprocess: self.preprocess.clone(),
            seed: self.seed,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config renders as TOML")
    }
}

/// Derived seeds keep 63 bits so they stay valid TOML integers.
fn sub_seed(seed: u64, tag: u64) -> u64 {
    seed::derive(seed, tag) >> 1
}

/// Overlay `user` on `base`. A table whose `kind` differs from the base
/// replaces it wholesale, since its fields belong to another variant.
fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u))
                if b.get("kind") == u.get("kind") || !u.contains_key("kind") =>
            {
                merge(b, u)
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parse config text. `profile` overrides the file's own `profile` key.
pub fn parse_config(text: &str, profile: Option<Profile>) -> Result<ExperimentConfig> {
    let mut user: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let file_profile = match user.get("profile") {
        None => Profile::Desk,
        Some(v) => v
            .as_str()
            .ok_or_else(|| Error::Config("`profile`: expected a string".into()))?
            .parse()?,
    };
    let profile = profile.unwrap_or(file_profile);
    user.insert(
        "profile".into(),
        toml::Value::String(format!("{profile:?}").to_lowercase()),
    );
    let mut merged = toml::Table::try_from(ExperimentConfig::for_profile(profile)).expect("profile renders as TOML");
    merge(&mut merged, user);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(merged)).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            Error::Config(inner.to_string())
        } else {
            Error::Config(format!("`{path}`: {inner}"))
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    load_config_with(path, None)
}

pub fn load_config_with(path: &Path, profile: Option<Profile>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, profile)
}

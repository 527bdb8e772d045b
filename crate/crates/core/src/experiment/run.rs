use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Ablation, ExperimentConfig, Profile};
use crate::embednet::{
    config_hash, load_checkpoint, save_checkpoint, EmbeddingModel, TrainingState, CHECKPOINT_VERSION,
};
use crate::error::{Error, Result};
use crate::eval::{emit_report, evaluate, pca_2d, render_markdown, write_projection_csv, OpenSetReport};
use crate::io::{atomic_write, list_iq, read_iq, read_json, read_samples, write_json, write_samples};
use crate::openmax::{argmax, calibrate, predict_open, Calibration, Decision};
use crate::preprocess::{preprocess_pipeline, RealMatrix, SIMULATED_UNKNOWN};
use crate::seed;
use crate::simunknown::{ig_retrain, mine_simulated_unknowns, train_cdcgan, GanModel};
use crate::supcon::{finetune_head, pretrain, train_end_to_end, EpochLog, HeadConfig, TrainConfig};
use crate::synth::{build_dataset, split_dataset, Sample, SpectrogramDataset};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const STAGES: [&str; 7] = ["dataset", "train", "calibrate", "gan", "mine", "ig-retrain", "score"];
const REPORT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub profile: Profile,
    pub ablations: Vec<Ablation>,
    pub seeds: BTreeMap<String, u64>,
    /// Run-level files: the resolved config and this manifest.
    pub artifacts: Vec<String>,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn is_complete(&self) -> bool {
        self.stages.iter().all(|s| s.status == StageStatus::Done)
    }

    /// Every file of the run.
    pub fn files(&self) -> Vec<String> {
        self.artifacts
            .iter()
            .chain(self.stages.iter().flat_map(|s| &s.artifacts))
            .cloned()
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub config_hash: String,
    pub ablations: Vec<Ablation>,
    pub simulated_unknowns: usize,
    pub feature_hash_before: String,
    pub feature_hash_after: String,
    pub reports: Vec<OpenSetReport>,
}

impl RunReport {
    pub fn report(&self, name: &str) -> Option<&OpenSetReport> {
        self.reports.iter().find(|r| r.name == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DatasetMeta {
    grid: (usize, usize),
    known_classes: Vec<i64>,
    unknown_classes: Vec<i64>,
}

#[derive(Default)]
struct StageOutput {
    artifacts: Vec<String>,
    notes: BTreeMap<String, String>,
}

impl StageOutput {
    fn new(artifacts: &[&str]) -> Self {
        StageOutput {
            artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
            notes: BTreeMap::new(),
        }
    }
}

pub fn read_dataset(dir: &Path) -> Result<SpectrogramDataset> {
    let meta: DatasetMeta = read_json(&dir.join("dataset.json"))?;
    Ok(SpectrogramDataset {
        grid: meta.grid,
        known_classes: meta.known_classes,
        unknown_classes: meta.unknown_classes,
        train: read_samples(&dir.join("train.bin"))?,
        test: read_samples(&dir.join("test.bin"))?,
    })
}

fn write_dataset(dir: &Path, ds: &SpectrogramDataset) -> Result<()> {
    write_samples(&dir.join("train.bin"), &ds.train)?;
    write_samples(&dir.join("test.bin"), &ds.test)?;
    write_json(
        &dir.join("dataset.json"),
        &DatasetMeta {
            grid: ds.grid,
            known_classes: ds.known_classes.clone(),
            unknown_classes: ds.unknown_classes.clone(),
        },
    )
}

/// Labelled `.iq` recordings, preprocessed in name order until each
/// configured class has `slices_per_class` slices.
fn ingest(cfg: &ExperimentConfig, dir: &Path) -> Result<SpectrogramDataset> {
    let s = &cfg.synth;
    let ids: Vec<i64> = s.known_ids.iter().chain(&s.unknown_ids).copied().collect();
    let mut slices: BTreeMap<i64, Vec<RealMatrix>> = ids.iter().map(|&i| (i, Vec::new())).collect();
    for path in list_iq(dir)? {
        let rec = read_iq(&path)?;
        let label = rec
            .label
            .ok_or_else(|| Error::format(&path, "recording has no label"))?;
        let Some(have) = slices.get_mut(&label) else {
            continue;
        };
        if have.len() >= s.slices_per_class {
            continue;
        }
        let need = s.slices_per_class - have.len();
        have.extend(
            preprocess_pipeline(&rec, &cfg.preprocess)?
                .into_iter()
                .take(need)
                .map(|x| x.values),
        );
    }
    let mut classes = Vec::with_capacity(ids.len());
    for &id in &ids {
        let got = slices.remove(&id).unwrap_or_default();
        if got.len() < s.slices_per_class {
            return Err(Error::Insufficient(format!(
                "class {id} has {} of {} slices in {}",
                got.len(),
                s.slices_per_class,
                dir.display()
            )));
        }
        classes.push((id, s.known_ids.contains(&id), got));
    }
    let n_train = (s.slices_per_class as f64 * s.train_fraction).round() as usize;
    Ok(split_dataset(classes, n_train, cfg.preprocess.stft.grid, cfg.seed))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}

fn hex(h: &str) -> String {
    h.chars().take(16).collect()
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    dir: &'a Path,
    manifest: RunManifest,
    /// Set once a stage has executed; later stages can no longer be skipped.
    dirty: bool,
}

impl Runner<'_> {
    fn save_manifest(&self) -> Result<()> {
        write_json(&self.dir.join("manifest.json"), &self.manifest)
    }

    fn stage(&mut self, name: &str, f: impl FnOnce(&ExperimentConfig, &Path) -> Result<StageOutput>) -> Result<()> {
        let i = self
            .manifest
            .stages
            .iter()
            .position(|s| s.name == name)
            .expect("known stage");
        let rec = &self.manifest.stages[i];
        let present = rec.artifacts.iter().all(|a| self.dir.join(a).exists());
        if !self.dirty && rec.status == StageStatus::Done && present {
            log::info!("stage {name}: complete, skipped");
            return Ok(());
        }
        self.dirty = true;
        for later in &mut self.manifest.stages[i..] {
            later.status = StageStatus::Pending;
            later.error = None;
        }
        log::info!("stage {name}: running");
        match f(self.cfg, self.dir) {
            Ok(out) => {
                let rec = &mut self.manifest.stages[i];
                rec.status = StageStatus::Done;
                rec.artifacts = out.artifacts;
                rec.notes = out.notes;
                self.save_manifest()
            }
            Err(e) => {
                let rec = &mut self.manifest.stages[i];
                rec.status = StageStatus::Failed;
                rec.error = Some(e.to_string());
                self.save_manifest()?;
                Err(e)
            }
        }
    }
}

fn known_split(ds: &SpectrogramDataset) -> (Vec<&RealMatrix>, Vec<usize>) {
    let items = ds.train.iter().map(|s| &s.values).collect();
    let labels = ds
        .train
        .iter()
        .map(|s| ds.class_index(s.label).expect("train holds known classes"))
        .collect();
    (items, labels)
}

fn state(cfg: &ExperimentConfig, model: &EmbeddingModel, stage: &str, epoch: usize) -> TrainingState {
    TrainingState {
        version: CHECKPOINT_VERSION,
        stage: stage.into(),
        epoch,
        seed: cfg.model_seed(),
        config_hash: config_hash(cfg),
        model: model.config.clone(),
    }
}

fn stage_dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<StageOutput> {
    let ds = match &cfg.synth.data_dir {
        Some(data) => ingest(cfg, data)?,
        None => build_dataset(&cfg.dataset_spec()?)?,
    };
    write_dataset(dir, &ds)?;
    let mut out = StageOutput::new(&["dataset.json", "train.bin", "test.bin"]);
    out.notes.insert("train".into(), ds.train.len().to_string());
    out.notes.insert("test".into(), ds.test.len().to_string());
    Ok(out)
}

/// Closed-set model: contrastive pretraining then a head on frozen features,
/// or plain cross-entropy when contrastive learning is ablated.
fn stage_train(cfg: &ExperimentConfig, dir: &Path) -> Result<StageOutput> {
    let ds = read_dataset(dir)?;
    let (items, labels) = known_split(&ds);
    let mut model = EmbeddingModel::new(cfg.model.clone(), cfg.model_seed())?;
    let mut logs: Vec<EpochLog> = Vec::new();
    if cfg.has(Ablation::NoSupcon) {
        train_end_to_end(&mut model, &items, &labels, &cfg.train, true, &mut |e| {
            logs.push(e.clone())
        })?;
    } else {
        pretrain(&mut model, &items, &labels, &cfg.train, &mut |e| logs.push(e.clone()))?;
        finetune_head(
            &mut model,
            &items,
            &labels,
            ds.known_classes.len(),
            &HeadConfig::from_train(&cfg.train),
            cfg.eval.chunk,
            &mut |e| {
                logs.push(EpochLog {
                    split: "finetune".into(),
                    ..e.clone()
                })
            },
        )?;
    }
    save_checkpoint(
        &dir.join("closed.ckpt"),
        &model,
        &state(cfg, &model, "closed", logs.len()),
    )?;
    write_jsonl(&dir.join("train.jsonl"), &logs)?;
    let mut out = StageOutput::new(&["closed.ckpt", "closed.state.json", "train.jsonl"]);
    out.notes
        .insert("parameters".into(), model.num_parameters().to_string());
    Ok(out)
}

fn stage_gan(cfg: &ExperimentConfig, dir: &Path) -> Result<StageOutput> {
    let ds = read_dataset(dir)?;
    let (items, labels) = known_split(&ds);
    let (gan, logs) = train_cdcgan(&items, &labels, ds.known_classes.len(), &cfg.gan, &mut |_| {})?;
    gan.save(&dir.join("gan.ckpt"))?;
    write_jsonl(&dir.join("gan.jsonl"), &logs)?;
    Ok(StageOutput::new(&["gan.ckpt", "gan.state.json", "gan.jsonl"]))
}

#[derive(Serialize, Deserialize)]
struct MinedMeta {
    count: usize,
    attempts: Vec<usize>,
    conditioned_on: Vec<usize>,
}

fn stage_mine(cfg: &ExperimentConfig, dir: &Path) -> Result<StageOutput> {
    let (closed, _) = load_checkpoint(&dir.join("closed.ckpt"))?;
    let gan = GanModel::load(&dir.join("gan.ckpt"))?;
    let chunk = cfg.eval.chunk;
    let mined = mine_simulated_unknowns(
        &gan,
        &mut |batch| {
            let l = closed.logits(batch, chunk)?;
            Ok((0..l.dim(0)).map(|i| argmax(l.row(i))).collect())
        },
        &cfg.mining,
    )?;
    let samples: Vec<Sample> = mined
        .samples
        .iter()
        .map(|m| Sample {
            label: SIMULATED_UNKNOWN,
            values: m.clone(),
        })
        .collect();
    write_samples(&dir.join("mined.bin"), &samples)?;
    write_json(
        &dir.join("mined.json"),
        &MinedMeta {
            count: mined.len(),
            attempts: mined.attempts.clone(),
            conditioned_on: mined.conditioned_on.clone(),
        },
    )?;
    let mut out = StageOutput::new(&["mined.bin", "mined.json"]);
    out.notes.insert("mined".into(), mined.len().to_string());
    Ok(out)
}

fn stage_ig(cfg: &ExperimentConfig, dir: &Path) -> Result<StageOutput> {
    let ds = read_dataset(dir)?;
    let (items, labels) = known_split(&ds);
    let mined = read_samples(&dir.join("mined.bin"))?;
    let sims: Vec<&RealMatrix> = mined.iter().map(|s| &s.values).collect();
    let (mut model, _) = load_checkpoint(&dir.join("closed.ckpt"))?;
    let n = ds.known_classes.len();
    let before = model.feature_hash();
    let mut logs: Vec<EpochLog> = Vec::new();
    let head = HeadConfig {
        seed: seed::derive(cfg.train.seed, 0x4947),
        ..HeadConfig::from_train(&cfg.train)
    };
    if cfg.has(Ablation::NoFreeze) {
        model.reset_head(n + 1, head.seed);
        let all: Vec<&RealMatrix> = items.iter().chain(&sims).copied().collect();
        let y: Vec<usize> = labels
            .iter()
            .copied()
            .chain(std::iter::repeat_n(n, sims.len()))
            .collect();
        let tc = TrainConfig {
            pretrain_epochs: cfg.train.finetune_epochs,
            lr_max: cfg.train.finetune_lr,
            seed: head.seed,
            ..cfg.train.clone()
        };
        train_end_to_end(&mut model, &all, &y, &tc, true, &mut |e| logs.push(e.clone()))?;
    } else {
        ig_retrain(&mut model, &items, &labels, n, &sims, &head, cfg.eval.chunk, &mut |e| {
            logs.push(e.clone())
        })?;
    }
    let after = model.feature_hash();
    save_checkpoint(
        &dir.join("ig.ckpt"),
        &model,
        &state(cfg, &model, "ig-retrain", logs.len()),
    )?;
    write_jsonl(&dir.join("ig.jsonl"), &logs)?;
    // Calibrate what was saved, so a resumed run sees the same weights.
    let (model, _) = load_checkpoint(&dir.join("ig.ckpt"))?;
    let cal = calibrate(
        &model.logits(&items, cfg.eval.chunk)?,
        &labels,
        n,
        Some(n),
        &cfg.calibration,
    )?;
    cal.save(&dir.join("calibration.json"))?;
    let mut out = StageOutput::new(&["ig.ckpt", "ig.state.json", "ig.jsonl", "calibration.json"]);
    out.notes.insert("feature_hash_before".into(), before);
    out.notes.insert("feature_hash_after".into(), after);
    Ok(out)
}

fn stage_calibrate(cfg: &ExperimentConfig, dir: &Path) -> Result<StageOutput> {
    let ds = read_dataset(dir)?;
    let (items, labels) = known_split(&ds);
    let n = ds.known_classes.len();
    let (closed, _) = load_checkpoint(&dir.join("closed.ckpt"))?;
    let plain = calibrate(
        &closed.logits(&items, cfg.eval.chunk)?,
        &labels,
        n,
        None,
        &cfg.calibration,
    )?;
    plain.save(&dir.join("calibration_plain.json"))?;
    Ok(StageOutput::new(&["calibration_plain.json"]))
}

fn open_report(name: &str, ds: &SpectrogramDataset, logits: &Tensor, cal: &Calibration) -> Result<OpenSetReport> {
    let preds = predict_open(logits, cal)?;
    let truth: Vec<i64> = ds.test.iter().map(|s| s.label).collect();
    let decisions: Vec<Decision> = preds.iter().map(|p| p.decision).collect();
    let scores: Vec<f64> = preds.iter().map(|p| p.unknown_probability()).collect();
    evaluate(name, &ds.known_classes, &truth, &decisions, Some(&scores))
}

/// Softmax arg-max over the known classes, never unknown; the unknown score
/// is one minus the top probability.
fn closed_report(ds: &SpectrogramDataset, logits: &Tensor) -> Result<OpenSetReport> {
    let truth: Vec<i64> = ds.test.iter().map(|s| s.label).collect();
    let mut decisions = Vec::with_capacity(truth.len());
    let mut scores = Vec::with_capacity(truth.len());
    for i in 0..logits.dim(0) {
        let v = logits.row(i);
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = v.iter().map(|x| (x - m).exp()).sum();
        decisions.push(Decision::Known(argmax(v)));
        scores.push(1.0 - 1.0 / z);
    }
    evaluate("softmax", &ds.known_classes, &truth, &decisions, Some(&scores))
}

fn stage_score(cfg: &ExperimentConfig, dir: &Path, manifest: &RunManifest) -> Result<StageOutput> {
    let ds = read_dataset(dir)?;
    let test: Vec<&RealMatrix> = ds.test.iter().map(|s| &s.values).collect();
    let chunk = cfg.eval.chunk;
    let (closed, _) = load_checkpoint(&dir.join("closed.ckpt"))?;
    let (ig, _) = load_checkpoint(&dir.join("ig.ckpt"))?;
    let closed_logits = closed.logits(&test, chunk)?;
    let ig_logits = ig.logits(&test, chunk)?;
    let reports = vec![
        open_report(
            "ig-openmax",
            &ds,
            &ig_logits,
            &Calibration::load(&dir.join("calibration.json"))?,
        )?,
        open_report(
            "openmax",
            &ds,
            &closed_logits,
            &Calibration::load(&dir.join("calibration_plain.json"))?,
        )?,
        closed_report(&ds, &closed_logits)?,
    ];
    let note = |k: &str| {
        manifest
            .stage("ig-retrain")
            .and_then(|s| s.notes.get(k))
            .cloned()
            .unwrap_or_default()
    };
    let mined = read_samples(&dir.join("mined.bin"))?;
    let run = RunReport {
        version: REPORT_VERSION,
        config_hash: manifest.config_hash.clone(),
        ablations: cfg.ablations.clone(),
        simulated_unknowns: mined.len(),
        feature_hash_before: note("feature_hash_before"),
        feature_hash_after: note("feature_hash_after"),
        reports,
    };
    emit_report(dir, &run, &run.reports)?;
    let mut out = StageOutput::new(&["report.json", "report.md"]);

    if cfg.eval.projection {
        let stride = ds.test.len().div_ceil(cfg.eval.projection_points.max(1)).max(1);
        let mut points = Vec::new();
        let mut labels = Vec::new();
        let mut splits = Vec::new();
        for i in (0..ds.test.len()).step_by(stride) {
            points.push(ig_logits.row(i).to_vec());
            labels.push(ds.test[i].label);
            splits.push("test");
        }
        let sims: Vec<&RealMatrix> = mined.iter().map(|s| &s.values).collect();
        let sim_logits = ig.logits(&sims, chunk)?;
        for i in (0..sims.len()).step_by(stride) {
            points.push(sim_logits.row(i).to_vec());
            labels.push(SIMULATED_UNKNOWN);
            splits.push("simulated");
        }
        let proj = pca_2d(&points)?;
        write_projection_csv(&dir.join("projection.csv"), &proj, &labels, &splits)?;
        out.artifacts.push("projection.csv".into());
    }
    if let Some(r) = run.report("ig-openmax") {
        log::info!(
            "ig-openmax: KAR {:?} UAR {:?} GAP {:?} AUC {:?}",
            r.metrics.kar,
            r.metrics.uar,
            r.metrics.gap,
            r.auc
        );
    }
    Ok(out)
}

fn fresh_manifest(cfg: &ExperimentConfig, hash: String) -> RunManifest {
    let seeds = [
        ("master", cfg.seed),
        ("train", cfg.train.seed),
        ("gan", cfg.gan.seed),
        ("mining", cfg.mining.seed),
        ("model", cfg.model_seed()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    RunManifest {
        version: MANIFEST_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: hash,
        profile: cfg.profile,
        ablations: cfg.ablations.clone(),
        seeds,
        artifacts: vec!["config.toml".into(), "manifest.json".into()],
        stages: STAGES
            .iter()
            .map(|s| StageRecord {
                name: s.to_string(),
                status: StageStatus::Pending,
                artifacts: Vec::new(),
                error: None,
                notes: BTreeMap::new(),
            })
            .collect(),
    }
}

/// Run every stage into `dir`, resuming after the last completed one. A
/// directory holding a run of another configuration is refused.
pub fn full_run(config: &ExperimentConfig, dir: &Path) -> Result<RunManifest> {
    run_until(config, dir, "score")
}

/// Run the stages up to and including `last`.
pub fn run_until(config: &ExperimentConfig, dir: &Path, last: &str) -> Result<RunManifest> {
    let end = STAGES
        .iter()
        .position(|s| *s == last)
        .ok_or_else(|| Error::Config(format!("unknown stage `{last}`")))?;
    config.validate()?;
    let cfg = config.resolved();
    let hash = config_hash(&cfg);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("manifest.json");
    let manifest = if path.exists() {
        let m: RunManifest = read_json(&path)?;
        if m.config_hash != hash {
            return Err(Error::Config(format!(
                "{} holds a run of configuration {}, this one is {}",
                dir.display(),
                hex(&m.config_hash),
                hex(&hash)
            )));
        }
        m
    } else {
        let m = fresh_manifest(&cfg, hash);
        atomic_write(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
        write_json(&path, &m)?;
        m
    };
    let mut r = Runner {
        cfg: &cfg,
        dir,
        manifest,
        dirty: false,
    };
    type Stage = fn(&ExperimentConfig, &Path) -> Result<StageOutput>;
    let stages: [(&str, Stage); 6] = [
        ("dataset", stage_dataset),
        ("train", stage_train),
        ("calibrate", stage_calibrate),
        ("gan", stage_gan),
        ("mine", stage_mine),
        ("ig-retrain", stage_ig),
    ];
    for (name, f) in stages.into_iter().take(end + 1) {
        r.stage(name, f)?;
    }
    if end == STAGES.len() - 1 {
        let snapshot = r.manifest.clone();
        r.stage("score", |c, d| stage_score(c, d, &snapshot))?;
    }
    Ok(r.manifest)
}

/// The configuration as given and with `ablation` added, in sibling
/// directories, plus a side-by-side `comparison.json`/`comparison.md` of the
/// IG-OpenMax rows.
pub fn paired_run(config: &ExperimentConfig, dir: &Path, ablation: Ablation) -> Result<(RunReport, RunReport)> {
    let mut base = config.clone();
    base.ablations.retain(|a| *a != ablation);
    let ablated = base.with_ablation(ablation);
    let a_dir = dir.join("baseline");
    let b_dir = dir.join(ablation.name());
    full_run(&base, &a_dir)?;
    full_run(&ablated, &b_dir)?;
    let a: RunReport = read_json(&a_dir.join("report.json"))?;
    let b: RunReport = read_json(&b_dir.join("report.json"))?;
    let rows: Vec<OpenSetReport> = [("baseline", &a), (ablation.name(), &b)]
        .into_iter()
        .filter_map(|(name, r)| {
            r.report("ig-openmax").map(|x| OpenSetReport {
                name: name.into(),
                ..x.clone()
            })
        })
        .collect();
    write_json(&dir.join("comparison.json"), &rows)?;
    atomic_write(&dir.join("comparison.md"), render_markdown(&rows).as_bytes())?;
    Ok((a, b))
}

//! Supervised contrastive pretraining and classification-head training.

mod augment;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use augment::{augment, crop_resize, freq_mask, time_mask, AugmentPolicy};

use crate::autograd::Graph;
use crate::embednet::{batch_tensor, EmbeddingModel};
use crate::error::{Error, Result};
use crate::params::{Adam, CosineSchedule, ParamId};
use crate::preprocess::RealMatrix;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub finetune_lr: f64,
    pub temperature: f64,
    pub weight_decay: f64,
    pub augment: AugmentPolicy,
    /// Batch size for inference-only passes.
    pub eval_chunk: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            pretrain_epochs: 15,
            finetune_epochs: 25,
            lr_max: 1e-3,
            lr_min: 1e-5,
            finetune_lr: 1e-3,
            temperature: 0.07,
            weight_decay: 0.0,
            augment: AugmentPolicy::default(),
            eval_chunk: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 128,
            pretrain_epochs: 30,
            finetune_epochs: 10,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.finetune_lr > 0.0) {
            return Err(Error::Config(
                "learning rates must satisfy 0 <= lr_min <= lr_max, finetune_lr > 0".into(),
            ));
        }
        if self.eval_chunk == 0 {
            return Err(Error::Config("eval_chunk must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            epochs: self.pretrain_epochs,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub lr: f64,
    pub seed: u64,
}

impl EpochLog {
    pub fn json_line(&self) -> String {
        serde_json::to_string(self).expect("log entry serializes")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupConOutput {
    /// Sum over anchors with at least one positive.
    pub loss: f64,
    /// `d loss / d z`, row-major like the input.
    pub grad: Vec<f64>,
    pub anchors: usize,
    /// Anchors skipped for having no positive.
    pub excluded: usize,
}

/// Supervised contrastive loss over `n` projections `z` (row-major `n × d`).
///
/// Per anchor `i` with positives `P(i)` (same label, not `i`) and candidates
/// `A(i)` (everything but `i`), the term is
/// `-(1/|P|) Σ_p log(exp(z_i·z_p/T) / Σ_a exp(z_i·z_a/T))`.
/// Writing `q_ia` for the softmax over `A(i)` and `p_ia = 1[a∈P]/|P|`, the
/// term's derivative with respect to `s_ia = z_i·z_a` is `(q_ia − p_ia)/T`.
pub fn supcon_loss(z: &[f64], labels: &[i64], temperature: f64) -> SupConOutput {
    let n = labels.len();
    assert!(
        n > 0 && z.len().is_multiple_of(n),
        "projection buffer does not match label count"
    );
    let d = z.len() / n;
    let row = |i: usize| &z[i * d..(i + 1) * d];
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s = dot(row(i), row(j)) / temperature;
            sim[i * n + j] = s;
            sim[j * n + i] = s;
        }
    }

    let mut out = SupConOutput {
        loss: 0.0,
        grad: vec![0.0; z.len()],
        anchors: 0,
        excluded: 0,
    };
    let mut coef = vec![0.0; n];
    for i in 0..n {
        let positives = (0..n).filter(|&j| j != i && labels[j] == labels[i]).count();
        if positives == 0 {
            out.excluded += 1;
            continue;
        }
        out.anchors += 1;
        let s = &sim[i * n..(i + 1) * n];
        let m = (0..n)
            .filter(|&a| a != i)
            .map(|a| s[a])
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..n).filter(|&a| a != i).map(|a| (s[a] - m).exp()).sum::<f64>().ln();
        let inv_p = 1.0 / positives as f64;
        for a in 0..n {
            if a == i {
                coef[a] = 0.0;
                continue;
            }
            let q = (s[a] - lse).exp();
            let p = if labels[a] == labels[i] { inv_p } else { 0.0 };
            if p > 0.0 {
                out.loss -= p * (s[a] - lse);
            }
            coef[a] = (q - p) / temperature;
        }
        for a in 0..n {
            let c = coef[a];
            if c == 0.0 {
                continue;
            }
            for k in 0..d {
                out.grad[i * d + k] += c * z[a * d + k];
                out.grad[a * d + k] += c * z[i * d + k];
            }
        }
    }
    out
}

/// Batches of sample indices with every class represented as evenly as the
/// counts allow: each class list is shuffled, then the lists are interleaved
/// round-robin and cut into `ceil(n / batch)` batches.
pub fn class_balanced_batches(labels: &[usize], batch: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = seed::rng(seed, 0x5341_4d50);
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut per: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        per[y].push(i);
    }
    for p in &mut per {
        p.shuffle(&mut rng);
    }
    let mut order = Vec::with_capacity(labels.len());
    let longest = per.iter().map(Vec::len).max().unwrap_or(0);
    for k in 0..longest {
        for p in &per {
            if let Some(&i) = p.get(k) {
                order.push(i);
            }
        }
    }
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

fn check_labels(items: usize, labels: &[usize], classes: Option<usize>) -> Result<()> {
    if items != labels.len() {
        return Err(Error::Shape(format!("{items} samples but {} labels", labels.len())));
    }
    if items == 0 {
        return Err(Error::Insufficient("no training samples".into()));
    }
    if let Some(k) = classes {
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Invalid(format!("label {bad} out of range for {k} outputs")));
        }
    }
    Ok(())
}

fn views(
    items: &[&RealMatrix],
    idx: &[usize],
    policy: &AugmentPolicy,
    seed: u64,
) -> (Vec<RealMatrix>, Vec<RealMatrix>) {
    idx.par_iter()
        .map(|&i| augment(items[i], policy, &mut seed::rng(seed, i as u64)))
        .unzip()
}

/// Minimize the contrastive loss over the feature extractor and projection
/// head. Each step feeds both views of every sample in a class-balanced batch;
/// the optimized objective is the loss averaged over valid anchors.
pub fn pretrain(
    model: &mut EmbeddingModel,
    items: &[&RealMatrix],
    labels: &[usize],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    check_labels(items.len(), labels, None)?;
    let ids: Vec<ParamId> = model.feature_ids().into_iter().chain(model.projection_ids()).collect();
    let mut adam = Adam::new(&model.store, &ids);
    adam.weight_decay = cfg.weight_decay;
    let schedule = cfg.schedule();
    let mut history = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 0..cfg.pretrain_epochs {
        let lr = schedule.lr(epoch);
        let epoch_seed = seed::derive(cfg.seed, 0x5052_4500 + epoch as u64);
        let (mut total, mut anchors) = (0.0, 0usize);
        for batch in class_balanced_batches(labels, cfg.batch_size, epoch_seed) {
            let (a, b) = views(items, &batch, &cfg.augment, epoch_seed);
            let all: Vec<&RealMatrix> = a.iter().chain(&b).collect();
            let y: Vec<i64> = batch.iter().chain(&batch).map(|&i| labels[i] as i64).collect();
            let x = batch_tensor(&all);

            let mut g = Graph::new(&model.store);
            g.disable_grad(model.head_ids());
            let f = model.forward(&mut g, &x)?;
            let out = supcon_loss(g.value(f.projection).data(), &y, cfg.temperature);
            if !out.loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite contrastive loss at epoch {epoch}")));
            }
            let scale = 1.0 / out.anchors.max(1) as f64;
            let shape = g.shape(f.projection).to_vec();
            let grad = Tensor::new(&shape, out.grad.iter().map(|v| v * scale).collect());
            let loss = g.fused_scalar(f.projection, out.loss * scale, grad);
            let grads = g.backward(loss);
            if !grads.is_finite() {
                return Err(Error::Diverged(format!("non-finite gradient at epoch {epoch}")));
            }
            let updates = g.take_buffer_updates();
            drop(g);
            adam.step(&mut model.store, &grads, lr);
            model.store.apply_buffer_updates(updates);
            total += out.loss;
            anchors += out.anchors;
        }
        let entry = EpochLog {
            epoch,
            split: "train".into(),
            loss: total / anchors.max(1) as f64,
            lr,
            seed: cfg.seed,
        };
        log::info!("pretrain epoch {epoch}: loss {:.5} lr {lr:.2e}", entry.loss);
        log(&entry);
        history.push(entry);
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub balanced: bool,
    pub seed: u64,
}

impl HeadConfig {
    pub fn from_train(cfg: &TrainConfig) -> Self {
        HeadConfig {
            epochs: cfg.finetune_epochs,
            lr: cfg.finetune_lr,
            batch_size: cfg.batch_size,
            balanced: false,
            seed: cfg.seed,
        }
    }
}

/// Cross-entropy training of the classification head alone on precomputed
/// fused features `(n, fused_dim)`. The head must already have the desired
/// number of outputs.
pub fn train_head(
    model: &mut EmbeddingModel,
    features: &Tensor,
    labels: &[usize],
    cfg: &HeadConfig,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    check_labels(features.dim(0), labels, Some(model.num_classes()))?;
    let d = features.dim(1);
    let ids = model.head_ids();
    let mut adam = Adam::new(&model.store, &ids);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let epoch_seed = seed::derive(cfg.seed, 0x4845_4100 + epoch as u64);
        let batches = if cfg.balanced {
            class_balanced_batches(labels, cfg.batch_size, epoch_seed)
        } else {
            let mut order: Vec<usize> = (0..labels.len()).collect();
            order.shuffle(&mut seed::rng(epoch_seed, 0));
            order.chunks(cfg.batch_size.max(1)).map(<[usize]>::to_vec).collect()
        };
        let mut total = 0.0;
        for batch in batches {
            let mut x = Vec::with_capacity(batch.len() * d);
            for &i in &batch {
                x.extend_from_slice(features.row(i));
            }
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new(&model.store);
            let xv = g.input(Tensor::new(&[batch.len(), d], x));
            let logits = model.classify(&mut g, xv);
            let loss = g.cross_entropy(logits, &y);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged(format!("non-finite head loss at epoch {epoch}")));
            }
            let grads = g.backward(loss);
            drop(g);
            adam.step(&mut model.store, &grads, cfg.lr);
            total += value * batch.len() as f64;
        }
        let entry = EpochLog {
            epoch,
            split: "finetune".into(),
            loss: total / labels.len() as f64,
            lr: cfg.lr,
            seed: cfg.seed,
        };
        log(&entry);
        history.push(entry);
    }
    Ok(history)
}

/// Freeze the feature extractor, reset the head to `outputs` logits and train
/// it on inference-mode features. Fails if any frozen parameter moved.
pub fn finetune_head(
    model: &mut EmbeddingModel,
    items: &[&RealMatrix],
    labels: &[usize],
    outputs: usize,
    cfg: &HeadConfig,
    chunk: usize,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    model.set_features_frozen(true);
    let before = model.feature_hash();
    let features = model.embed(items, chunk)?;
    model.reset_head(outputs, cfg.seed);
    let history = train_head(model, &features, labels, cfg, log)?;
    if model.feature_hash() != before {
        return Err(Error::FrozenDrift("head fine-tuning".into()));
    }
    Ok(history)
}

/// Plain cross-entropy training of the whole network on one augmented view
/// per sample, with the same optimizer and schedule as pretraining.
pub fn train_end_to_end(
    model: &mut EmbeddingModel,
    items: &[&RealMatrix],
    labels: &[usize],
    cfg: &TrainConfig,
    balanced: bool,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    check_labels(items.len(), labels, Some(model.num_classes()))?;
    model.set_features_frozen(false);
    let ids: Vec<ParamId> = model.feature_ids().into_iter().chain(model.head_ids()).collect();
    let mut adam = Adam::new(&model.store, &ids);
    adam.weight_decay = cfg.weight_decay;
    let schedule = cfg.schedule();
    let mut history = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 0..cfg.pretrain_epochs {
        let lr = schedule.lr(epoch);
        let epoch_seed = seed::derive(cfg.seed, 0x4345_0000 + epoch as u64);
        let batches = if balanced {
            class_balanced_batches(labels, cfg.batch_size, epoch_seed)
        } else {
            let mut order: Vec<usize> = (0..labels.len()).collect();
            order.shuffle(&mut seed::rng(epoch_seed, 0));
            order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
        };
        let mut total = 0.0;
        for batch in batches {
            let (a, _) = views(items, &batch, &cfg.augment, epoch_seed);
            let x = batch_tensor(&a.iter().collect::<Vec<_>>());
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new(&model.store);
            g.disable_grad(model.projection_ids());
            let f = model.forward(&mut g, &x)?;
            let loss = g.cross_entropy(f.logits, &y);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged(format!("non-finite cross-entropy at epoch {epoch}")));
            }
            let grads = g.backward(loss);
            let updates = g.take_buffer_updates();
            drop(g);
            adam.step(&mut model.store, &grads, lr);
            model.store.apply_buffer_updates(updates);
            total += value * batch.len() as f64;
        }
        let entry = EpochLog {
            epoch,
            split: "train".into(),
            loss: total / labels.len() as f64,
            lr,
            seed: cfg.seed,
        };
        log::info!("cross-entropy epoch {epoch}: loss {:.5} lr {lr:.2e}", entry.loss);
        log(&entry);
        history.push(entry);
    }
    Ok(history)
}

//! Simulated unknowns: GAN training, mining of misclassified generated
//! samples, and head retraining with an extra unknown class.

mod gan;

use serde::{Deserialize, Serialize};

pub use gan::{
    gradient_penalty, interpolate, penalty_at, penalty_param_grads, score_gap, train_cdcgan, ConvCritic, Critic,
    GanConfig, GanEpochLog, GanModel, Generator, Penalty,
};

use crate::embednet::EmbeddingModel;
use crate::error::{Error, Result};
use crate::preprocess::RealMatrix;
use crate::seed;
use crate::supcon::{finetune_head, EpochLog, HeadConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    /// Mined samples wanted per conditioning class.
    pub per_class: usize,
    /// Generation attempts per class as a multiple of `per_class`.
    pub budget_factor: usize,
    /// Fewest mined samples accepted overall.
    pub min_total: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            per_class: 40,
            budget_factor: 50,
            min_total: 20,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct MinedSet {
    pub samples: Vec<RealMatrix>,
    /// Class each kept sample was generated for.
    pub conditioned_on: Vec<usize>,
    /// Generated samples per class, kept or not.
    pub attempts: Vec<usize>,
}

impl MinedSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Keep generated samples whose closed-set prediction differs from the class
/// they were conditioned on. `predict` maps a batch to predicted class indices.
pub fn mine_simulated_unknowns(
    gan: &GanModel,
    predict: &mut dyn FnMut(&[&RealMatrix]) -> Result<Vec<usize>>,
    cfg: &MiningConfig,
) -> Result<MinedSet> {
    let budget = cfg.per_class * cfg.budget_factor;
    let mut out = MinedSet {
        attempts: vec![0; gan.classes],
        ..MinedSet::default()
    };
    for class in 0..gan.classes {
        let mut kept = 0;
        let mut round = 0u64;
        while kept < cfg.per_class && out.attempts[class] < budget {
            let n = cfg.batch_size.min(budget - out.attempts[class]);
            let mut rng = seed::rng(seed::derive(cfg.seed, class as u64), round);
            round += 1;
            let noise = gan.noise(n, &mut rng);
            let samples = gan.generate(&noise, &vec![class; n]);
            let refs: Vec<&RealMatrix> = samples.iter().collect();
            let pred = predict(&refs)?;
            out.attempts[class] += n;
            for (s, p) in samples.into_iter().zip(pred) {
                if p != class && kept < cfg.per_class {
                    out.samples.push(s);
                    out.conditioned_on.push(class);
                    kept += 1;
                }
            }
        }
    }
    if out.len() < cfg.min_total {
        return Err(Error::Insufficient(format!(
            "mined {} simulated unknowns from {} attempts, need {}",
            out.len(),
            out.attempts.iter().sum::<usize>(),
            cfg.min_total
        )));
    }
    Ok(out)
}

/// Freeze the features and retrain the head with `known + 1` outputs on the
/// known training samples plus the mined set, which takes label `known`.
#[allow(clippy::too_many_arguments)]
pub fn ig_retrain(
    model: &mut EmbeddingModel,
    known_items: &[&RealMatrix],
    known_labels: &[usize],
    known: usize,
    simulated: &[&RealMatrix],
    cfg: &HeadConfig,
    chunk: usize,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if simulated.is_empty() {
        return Err(Error::Insufficient("no simulated unknowns to retrain with".into()));
    }
    let items: Vec<&RealMatrix> = known_items.iter().chain(simulated).copied().collect();
    let labels: Vec<usize> = known_labels
        .iter()
        .copied()
        .chain(std::iter::repeat_n(known, simulated.len()))
        .collect();
    let cfg = HeadConfig {
        balanced: true,
        ..cfg.clone()
    };
    finetune_head(model, &items, &labels, known + 1, &cfg, chunk, log)
}

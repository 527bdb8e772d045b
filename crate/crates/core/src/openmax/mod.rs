//! Extreme-value recalibration of classifier logits for open-set scoring.

mod weibull;

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use weibull::{fit as fit_weibull_tail, fit_two_param, LocationPolicy, Weibull};

use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::tensor::Tensor;

pub const CALIBRATION_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    Cosine,
    /// Euclidean distance scaled by 1/200 plus cosine distance.
    EuclideanCosine,
}

impl DistanceMetric {
    pub fn distance(self, v: &[f64], mav: &[f64]) -> f64 {
        let euclid = || v.iter().zip(mav).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let cosine = || {
            let dot: f64 = v.iter().zip(mav).map(|(a, b)| a * b).sum();
            let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nm = mav.iter().map(|a| a * a).sum::<f64>().sqrt();
            1.0 - dot / (nv * nm).max(1e-300)
        };
        match self {
            DistanceMetric::Euclidean => euclid(),
            DistanceMetric::Cosine => cosine(),
            DistanceMetric::EuclideanCosine => euclid() / 200.0 + cosine(),
        }
    }
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(DistanceMetric::Euclidean),
            "cosine" => Ok(DistanceMetric::Cosine),
            "euclidean-cosine" | "eucos" => Ok(DistanceMetric::EuclideanCosine),
            _ => Err(Error::Config(format!("unknown distance metric `{s}`"))),
        }
    }
}

/// How a calibrated known class at rank `k` is down-weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// `1 − ((α−k)/α)·F(d)` with `F` the fitted Weibull CDF.
    #[default]
    EvtCdf,
    /// `1 − ((α−k)/α)·exp(−((d−χ)/κ)^τ)`, the survival factor.
    PaperLiteral,
}

impl FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "evt-cdf" => Ok(WeightMode::EvtCdf),
            "paper-literal" => Ok(WeightMode::PaperLiteral),
            _ => Err(Error::Config(format!("unknown weight mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub alpha: usize,
    pub tail_size: usize,
    pub distance_metric: DistanceMetric,
    pub weight_mode: WeightMode,
    pub location: LocationPolicy,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            alpha: 3,
            tail_size: 20,
            distance_metric: DistanceMetric::Euclidean,
            weight_mode: WeightMode::EvtCdf,
            location: LocationPolicy::TailMin,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha == 0 {
            return Err(Error::Config("alpha must be at least 1".into()));
        }
        if self.tail_size < 3 {
            return Err(Error::Config(format!(
                "tail_size must be at least 3, got {}",
                self.tail_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassModel {
    /// Logit index of the class.
    pub id: usize,
    pub mav: Vec<f64>,
    pub shape: f64,
    pub scale: f64,
    pub location: f64,
    pub tail_max: f64,
}

impl ClassModel {
    pub fn weibull(&self) -> Weibull {
        Weibull {
            shape: self.shape,
            scale: self.scale,
            location: self.location,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub version: u32,
    pub alpha: usize,
    pub tail_size: usize,
    pub distance_metric: DistanceMetric,
    pub weight_mode: WeightMode,
    /// Logit index of the simulated-unknown class, if the head has one.
    #[serde(default)]
    pub simulated_unknown: Option<usize>,
    pub classes: Vec<ClassModel>,
}

impl Calibration {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Calibration = read_json(path)?;
        if c.version != CALIBRATION_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported calibration version {}", c.version),
            ));
        }
        Ok(c)
    }

    /// Length of the activation vectors this calibration scores.
    pub fn logit_count(&self) -> usize {
        self.classes.first().map_or(0, |c| c.mav.len())
    }

    fn model(&self, index: usize) -> Option<&ClassModel> {
        self.classes.iter().find(|c| c.id == index)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Indices sorted by descending score; ties keep index order.
pub fn rank_desc(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    idx
}

/// Activation vectors of correctly classified samples, grouped by class
/// index `0..classes`. A class with none is an error.
pub fn collect_avs(logits: &Tensor, labels: &[usize], classes: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    if logits.dim(0) != labels.len() {
        return Err(Error::Shape(format!(
            "{} activation vectors but {} labels",
            logits.dim(0),
            labels.len()
        )));
    }
    let mut sets = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        let v = logits.row(i);
        if y < classes && argmax(v) == y {
            sets[y].push(v.to_vec());
        }
    }
    if let Some(j) = sets.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClass(j as i64));
    }
    Ok(sets)
}

pub fn mean_vector(set: &[Vec<f64>]) -> Vec<f64> {
    let mut mav = vec![0.0; set[0].len()];
    for v in set {
        for (m, x) in mav.iter_mut().zip(v) {
            *m += x;
        }
    }
    mav.iter_mut().for_each(|m| *m /= set.len() as f64);
    mav
}

/// Fit one class: MAV, distances, and a Weibull on the largest `tail_size`
/// of them (or all of them when the class is smaller).
pub fn fit_class(id: usize, set: &[Vec<f64>], cfg: &CalibrationConfig) -> Result<ClassModel> {
    if set.len() < 3 {
        return Err(Error::Insufficient(format!(
            "class {id} has {} correctly classified samples, need at least 3",
            set.len()
        )));
    }
    let mav = mean_vector(set);
    let mut d: Vec<f64> = set.iter().map(|v| cfg.distance_metric.distance(v, &mav)).collect();
    d.sort_by(|a, b| b.total_cmp(a));
    if d.len() < cfg.tail_size {
        log::warn!(
            "class {id}: {} samples, fitting the whole set instead of a {}-tail",
            d.len(),
            cfg.tail_size
        );
    }
    d.truncate(cfg.tail_size);
    let w = weibull::fit(&d, cfg.location, id as i64)?;
    Ok(ClassModel {
        id,
        mav,
        shape: w.shape,
        scale: w.scale,
        location: w.location,
        tail_max: d[0],
    })
}

/// Calibrate every known class from training logits. `simulated_unknown`
/// names the head's extra index, which is never fitted.
pub fn calibrate(
    logits: &Tensor,
    labels: &[usize],
    known: usize,
    simulated_unknown: Option<usize>,
    cfg: &CalibrationConfig,
) -> Result<Calibration> {
    cfg.validate()?;
    let width = logits.dim(1);
    if known + simulated_unknown.is_some() as usize != width {
        return Err(Error::Shape(format!(
            "{known} known classes do not match {width} logits"
        )));
    }
    if cfg.alpha > width {
        return Err(Error::Config(format!("alpha {} exceeds {width} logits", cfg.alpha)));
    }
    let sets = collect_avs(logits, labels, known)?;
    let classes = sets
        .iter()
        .enumerate()
        .map(|(j, s)| fit_class(j, s, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(Calibration {
        version: CALIBRATION_VERSION,
        alpha: cfg.alpha,
        tail_size: cfg.tail_size,
        distance_metric: cfg.distance_metric,
        weight_mode: cfg.weight_mode,
        simulated_unknown,
        classes,
    })
}

/// Per-entry weights: ranks `k = 1..α` are revised, everything else is 1.
pub fn correction_weights(v: &[f64], cal: &Calibration) -> Result<Vec<f64>> {
    let alpha = cal.alpha;
    if alpha > v.len() {
        return Err(Error::Invalid(format!("alpha {alpha} exceeds {} logits", v.len())));
    }
    let mut c = vec![1.0; v.len()];
    for (r, &idx) in rank_desc(v).iter().take(alpha).enumerate() {
        let k = r + 1;
        let frac = (alpha - k) as f64 / alpha as f64;
        if Some(idx) == cal.simulated_unknown {
            c[idx] = 1.0 - frac;
        } else if let Some(m) = cal.model(idx) {
            let d = cal.distance_metric.distance(v, &m.mav);
            let factor = match cal.weight_mode {
                WeightMode::EvtCdf => m.weibull().cdf(d),
                WeightMode::PaperLiteral => m.weibull().survival(d),
            };
            c[idx] = 1.0 - frac * factor;
        }
    }
    Ok(c)
}

/// `ṽ = v ∘ c` and the decrement sum `Σ (v − ṽ)`.
pub fn recalibrate(v: &[f64], c: &[f64]) -> (Vec<f64>, f64) {
    assert_eq!(v.len(), c.len());
    let tilde: Vec<f64> = v.iter().zip(c).map(|(a, b)| a * b).collect();
    let unknown = v.iter().zip(&tilde).map(|(a, b)| a - b).sum();
    (tilde, unknown)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Known(usize),
    Unknown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpenSetPrediction {
    /// Known-class probabilities followed by the unknown probability.
    pub probabilities: Vec<f64>,
    pub decision: Decision,
    pub raw_unknown_score: f64,
}

impl OpenSetPrediction {
    pub fn unknown_probability(&self) -> f64 {
        *self.probabilities.last().expect("non-empty")
    }
}

/// Softmax over `ṽ ⊕ unknown`. The simulated-unknown entry, if any, is merged
/// into the unknown probability and dropped from the known list.
pub fn openmax_probability(tilde: &[f64], unknown: f64, simulated_unknown: Option<usize>) -> OpenSetPrediction {
    let m = tilde.iter().copied().fold(unknown, f64::max);
    let e: Vec<f64> = tilde.iter().map(|x| (x - m).exp()).collect();
    let eu = (unknown - m).exp();
    let z = e.iter().sum::<f64>() + eu;
    let mut probs = Vec::with_capacity(tilde.len() + 1);
    let mut p_unknown = eu / z;
    for (i, ei) in e.iter().enumerate() {
        if Some(i) == simulated_unknown {
            p_unknown += ei / z;
        } else {
            probs.push(ei / z);
        }
    }
    let best = argmax(&probs);
    let decision = if probs.is_empty() || p_unknown > probs[best] {
        Decision::Unknown
    } else {
        Decision::Known(best)
    };
    probs.push(p_unknown);
    OpenSetPrediction {
        probabilities: probs,
        decision,
        raw_unknown_score: unknown,
    }
}

pub fn score(v: &[f64], cal: &Calibration) -> Result<OpenSetPrediction> {
    let c = correction_weights(v, cal)?;
    let (tilde, u) = recalibrate(v, &c);
    Ok(openmax_probability(&tilde, u, cal.simulated_unknown))
}

/// Score every row of a logit matrix.
pub fn predict_open(logits: &Tensor, cal: &Calibration) -> Result<Vec<OpenSetPrediction>> {
    if logits.dim(1) != cal.logit_count() {
        return Err(Error::Shape(format!(
            "calibration expects {} logits, got {}",
            cal.logit_count(),
            logits.dim(1)
        )));
    }
    (0..logits.dim(0)).map(|i| score(logits.row(i), cal)).collect()
}

#[cfg(test)]
mod tests;

//! Weibull maximum-likelihood fitting for distance tails.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weibull {
    pub shape: f64,
    pub scale: f64,
    pub location: f64,
}

impl Weibull {
    pub fn cdf(&self, x: f64) -> f64 {
        1.0 - self.survival(x)
    }

    pub fn survival(&self, x: f64) -> f64 {
        let t = (x - self.location).max(0.0) / self.scale;
        (-t.powf(self.shape)).exp()
    }

    /// Inverse CDF, used for sampling.
    pub fn quantile(&self, p: f64) -> f64 {
        self.location + self.scale * (-(1.0 - p).ln()).powf(1.0 / self.shape)
    }
}

/// How the location parameter is chosen before the shape/scale fit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LocationPolicy {
    /// Smallest tail value; the fit runs on the strictly larger values.
    #[default]
    TailMin,
    Fixed {
        value: f64,
    },
}

const TOL: f64 = 1e-10;
const MAX_ITER: usize = 200;

/// Two-parameter MLE on positive samples. The shape solves the profile
/// equation `Σ x^k ln x / Σ x^k − 1/k − mean(ln x) = 0`, which is increasing
/// in `k`; the scale then follows as `(mean x^k)^(1/k)`.
pub fn fit_two_param(x: &[f64]) -> std::result::Result<(f64, f64), String> {
    if x.len() < 2 {
        return Err(format!("{} positive samples, need at least 2", x.len()));
    }
    if let Some(bad) = x.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(format!("sample {bad} is not positive and finite"));
    }
    let max = x.iter().copied().fold(0.0, f64::max);
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    if (max - min) <= 1e-12 * max {
        return Err(format!("all {} samples equal {max}", x.len()));
    }
    // Normalizing by the maximum keeps x^k in (0, 1].
    let u: Vec<f64> = x.iter().map(|v| v / max).collect();
    let ln: Vec<f64> = u.iter().map(|v| v.ln()).collect();
    let mean_ln = ln.iter().sum::<f64>() / u.len() as f64;
    let profile = |k: f64| {
        let (mut s0, mut s1) = (0.0, 0.0);
        for (&ui, &li) in u.iter().zip(&ln) {
            let p = ui.powf(k);
            s0 += p;
            s1 += p * li;
        }
        s1 / s0 - 1.0 / k - mean_ln
    };

    let (mut lo, mut hi) = (1e-3, 1.0);
    while profile(lo) > 0.0 {
        lo /= 10.0;
        if lo < 1e-12 {
            return Err("shape root below 1e-12".into());
        }
    }
    while profile(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e6 {
            return Err("shape root above 1e6".into());
        }
    }
    let mut k = 0.5 * (lo + hi);
    for _ in 0..MAX_ITER {
        let f = profile(k);
        if f > 0.0 {
            hi = k;
        } else {
            lo = k;
        }
        // Newton step on a numeric slope, falling back to bisection outside the bracket.
        let h = 1e-7 * k.max(1e-3);
        let slope = (profile(k + h) - profile(k - h)) / (2.0 * h);
        let mut next = k - f / slope;
        if !(next.is_finite() && next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let done = (next - k).abs() <= TOL * k || hi - lo <= TOL * k;
        k = next;
        if done {
            break;
        }
    }
    let mean_pow = u.iter().map(|v| v.powf(k)).sum::<f64>() / u.len() as f64;
    let scale = max * mean_pow.powf(1.0 / k);
    Ok((k, scale))
}

/// Fit a Weibull to `tail` (positive distances) under the location policy.
pub fn fit(tail: &[f64], policy: LocationPolicy, class: i64) -> Result<Weibull> {
    let degenerate = |detail: String| Error::DegenerateTail { class, detail };
    let location = match policy {
        LocationPolicy::TailMin => tail.iter().copied().fold(f64::INFINITY, f64::min),
        LocationPolicy::Fixed { value } => value,
    };
    let excess: Vec<f64> = tail.iter().map(|d| d - location).filter(|e| *e > 0.0).collect();
    if excess.is_empty() {
        return Err(degenerate(format!(
            "no distance exceeds location {location} among {} tail values",
            tail.len()
        )));
    }
    let (shape, scale) = fit_two_param(&excess).map_err(degenerate)?;
    Ok(Weibull { shape, scale, location })
}

//! Spectrogram augmentations. Rows are time frames, columns frequency bins.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::preprocess::RealMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AugmentPolicy {
    None,
    Standard {
        /// Largest time mask as a fraction of the frames.
        time_mask: f64,
        /// Largest frequency mask as a fraction of the bins.
        freq_mask: f64,
        noise_sigma: f64,
        /// Smallest crop side as a fraction of the grid.
        crop_min: f64,
    },
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy::Standard {
            time_mask: 0.1,
            freq_mask: 0.1,
            noise_sigma: 0.01,
            crop_min: 0.9,
        }
    }
}

/// Zero `width` consecutive time frames starting at `start`.
pub fn time_mask(x: &mut RealMatrix, start: usize, width: usize) {
    let cols = x.cols;
    for r in start..(start + width).min(x.rows) {
        x.data[r * cols..(r + 1) * cols].fill(0.0);
    }
}

/// Zero `width` consecutive frequency bins starting at `start`.
pub fn freq_mask(x: &mut RealMatrix, start: usize, width: usize) {
    let cols = x.cols;
    for row in x.data.chunks_mut(cols) {
        for v in &mut row[start.min(cols)..(start + width).min(cols)] {
            *v = 0.0;
        }
    }
}

/// Bilinear resample of the window `rows r0..r0+h`, `cols c0..c0+w` back to the full grid.
pub fn crop_resize(x: &RealMatrix, r0: usize, c0: usize, h: usize, w: usize) -> RealMatrix {
    let coord = |i: usize, n_out: usize, n_in: usize| {
        if n_out <= 1 {
            0.0
        } else {
            i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(x.rows * x.cols);
    for i in 0..x.rows {
        let y = coord(i, x.rows, h);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(h - 1);
        for j in 0..x.cols {
            let xx = coord(j, x.cols, w);
            let (x0, fx) = (xx.floor() as usize, xx - xx.floor());
            let x1 = (x0 + 1).min(w - 1);
            let at = |r: usize, c: usize| x.at(r0 + r, c0 + c);
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    RealMatrix::new(x.rows, x.cols, out)
}

fn view(x: &RealMatrix, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> RealMatrix {
    let AugmentPolicy::Standard {
        time_mask: tm,
        freq_mask: fm,
        noise_sigma,
        crop_min,
    } = *policy
    else {
        return x.clone();
    };
    let side = |n: usize, rng: &mut ChaCha8Rng| {
        let lo = ((n as f64 * crop_min).ceil() as usize).clamp(1, n);
        rng.random_range(lo..=n)
    };
    let (h, w) = (side(x.rows, rng), side(x.cols, rng));
    let (r0, c0) = (rng.random_range(0..=x.rows - h), rng.random_range(0..=x.cols - w));
    let mut v = crop_resize(x, r0, c0, h, w);

    let tw = rng.random_range(0..=(x.rows as f64 * tm).floor() as usize);
    let ts = rng.random_range(0..=x.rows - tw);
    time_mask(&mut v, ts, tw);
    let fw = rng.random_range(0..=(x.cols as f64 * fm).floor() as usize);
    let fs = rng.random_range(0..=x.cols - fw);
    freq_mask(&mut v, fs, fw);

    if noise_sigma > 0.0 {
        let n = Normal::new(0.0, noise_sigma).expect("positive sigma");
        for e in &mut v.data {
            *e = (*e + n.sample(rng)).clamp(0.0, 1.0);
        }
    }
    v
}

/// Two independent views of `x`.
pub fn augment(x: &RealMatrix, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> (RealMatrix, RealMatrix) {
    let a = view(x, policy, rng);
    let b = view(x, policy, rng);
    (a, b)
}

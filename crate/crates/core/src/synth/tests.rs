use std::f64::consts::PI;

use super::*;
use crate::preprocess::{PreprocessConfig, ThresholdPolicy};

const FS: f64 = 10e6;

fn profile(hops: Vec<f64>) -> SignalProfile {
    SignalProfile {
        class_id: 1,
        vts_bandwidth: 1e6,
        vts_duty_cycle: 0.5,
        vts_period: 2e-3,
        control_burst_width: 2e-5,
        control_burst_rate: 500.0,
        control_offset: 3e6,
        hop_set: hops,
        hop_dwell: 2e-4,
        amplitude: 1.0,
    }
}

#[test]
fn envelope_has_two_on_intervals() {
    let p = profile(vec![0.0]);
    let env = vts_envelope(&p, 40_000, FS);
    let rises = env.windows(2).filter(|w| !w[0] && w[1]).count() + env[0] as usize;
    assert_eq!(rises, 2);
    assert_eq!(env.iter().filter(|&&b| b).count(), 20_000);
    assert!(env[..10_000].iter().all(|&b| b));
    assert!(env[10_000..20_000].iter().all(|&b| !b));
}

#[test]
fn full_duty_is_nonzero_everywhere() {
    let mut p = profile(vec![0.0]);
    p.vts_duty_cycle = 1.0;
    let rec = synthesize_clean(&p, 1e-3, FS, 3).unwrap();
    assert_eq!(rec.samples.len(), 10_000);
    assert!(rec.samples.iter().all(|s| s.norm() > 0.0));
    assert_eq!(rec.label, Some(1));
}

#[test]
fn synthesis_is_deterministic_per_seed() {
    let p = profile(vec![-1e6, 2e6]);
    let a = synthesize_clean(&p, 5e-4, FS, 11).unwrap();
    let b = synthesize_clean(&p, 5e-4, FS, 11).unwrap();
    let c = synthesize_clean(&p, 5e-4, FS, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.samples, c.samples);
}

#[test]
fn out_of_band_hop_is_rejected() {
    let p = profile(vec![4.8e6]);
    assert!(synthesize_clean(&p, 1e-3, FS, 0).is_err());
    let mut q = profile(vec![0.0]);
    q.vts_duty_cycle = 0.0;
    assert!(q.validate(FS).is_err());
}

/// Energy-weighted mean frequency (Hz) computed with a plain DFT over
/// consecutive 256-sample frames.
fn centroid_oracle(x: &[Complex64]) -> f64 {
    let n = 256;
    let mut num = 0.0;
    let mut den = 0.0;
    for frame in x.chunks_exact(n).step_by(4) {
        for q in 0..n {
            let f = if q < n / 2 { q as f64 } else { q as f64 - n as f64 } * FS / n as f64;
            let v: Complex64 = frame
                .iter()
                .enumerate()
                .map(|(m, s)| s * Complex64::from_polar(1.0, -2.0 * PI * (q * m) as f64 / n as f64))
                .sum();
            num += f * v.norm_sqr();
            den += v.norm_sqr();
        }
    }
    num / den
}

#[test]
fn hop_sets_move_the_energy_centroid() {
    let mut a = profile(vec![-2e6]);
    let mut b = profile(vec![2e6]);
    a.vts_duty_cycle = 1.0;
    b.vts_duty_cycle = 1.0;
    let ra = synthesize_clean(&a, 4e-4, FS, 5).unwrap();
    let rb = synthesize_clean(&b, 4e-4, FS, 5).unwrap();
    let (ca, cb) = (centroid_oracle(&ra.samples), centroid_oracle(&rb.samples));
    assert!(cb - ca > 2e6, "centroids {ca} {cb}");
    assert!((ca + 2e6).abs() < 6e5);
}

#[test]
fn identity_channel_is_exact() {
    let rec = synthesize_clean(&profile(vec![1e6]), 2e-4, FS, 1).unwrap();
    let out = apply_channel(&rec, &ChannelParams::identity(), 9).unwrap();
    assert_eq!(out.samples, rec.samples);
}

#[test]
fn half_wavelength_wobble_negates() {
    let rec = synthesize_clean(&profile(vec![1e6]), 2e-4, FS, 1).unwrap();
    let ch = ChannelParams {
        wobble: Wobble::Fixed { delta: 0.0625 },
        ..ChannelParams::default()
    };
    let g = ch.path_loss_gain().sqrt();
    let out = apply_channel(&rec, &ch, 2).unwrap();
    for (o, s) in out.samples.iter().zip(&rec.samples) {
        assert!((o + s * g).norm() <= 1e-15 * s.norm().max(1.0));
    }
}

#[test]
fn noiseless_wobble_preserves_scaled_magnitudes() {
    let rec = synthesize_clean(&profile(vec![0.0]), 3e-4, FS, 4).unwrap();
    let ch = ChannelParams::default();
    let g = ch.path_loss_gain().sqrt();
    let out = apply_channel(&rec, &ch, 4).unwrap();
    for (o, s) in out.samples.iter().zip(&rec.samples) {
        assert!((o.norm() - g * s.norm()).abs() <= 1e-12 * g * s.norm().max(1e-300));
    }
}

#[test]
fn snr_twenty_db_monte_carlo() {
    let mut p = profile(vec![0.0]);
    p.vts_duty_cycle = 1.0;
    let clean = synthesize_clean(&p, 0.1, FS, 8).unwrap();
    let mut ch = ChannelParams::default();
    ch.noise_variance = ch.noise_for_snr(clean.mean_power(), 20.0);
    let out = apply_channel(&clean, &ch, 8).unwrap();

    // rebuild the noiseless output with the same seed to isolate the noise
    let quiet = ChannelParams {
        noise_variance: 0.0,
        ..ch.clone()
    };
    let noise_free = apply_channel(&clean, &quiet, 8).unwrap();
    let n = 1_000_000;
    let sig: f64 = noise_free.samples[..n].iter().map(|s| s.norm_sqr()).sum::<f64>() / n as f64;
    let noise: f64 = out.samples[..n]
        .iter()
        .zip(&noise_free.samples)
        .map(|(o, s)| (o - s).norm_sqr())
        .sum::<f64>()
        / n as f64;
    let snr = 10.0 * (sig / noise).log10();
    assert!((snr - 20.0).abs() < 0.2, "snr {snr}");
    assert!((noise - ch.noise_variance).abs() / ch.noise_variance < 0.05);
}

fn tiny_spec(seed: u64) -> DatasetSpec {
    let cfg = PreprocessConfig {
        slice_samples: 8192,
        threshold: ThresholdPolicy::MedianFactor { factor: 2.0 },
        ..PreprocessConfig::desk()
    };
    let ids = [0, 1, 2, 3];
    let profiles = default_profiles(&ids, FS, 8192.0 / FS, 0.08, seed).unwrap();
    DatasetSpec {
        known: profiles[..3].to_vec(),
        unknown: profiles[3..].to_vec(),
        sample_rate: FS,
        channel: ChannelParams::default(),
        snr_db: Some(20.0),
        slices_per_class: 6,
        train_fraction: 0.5,
        recording_slices: 16,
        max_recordings: 8,
        preprocess: cfg,
        seed,
    }
}

#[test]
fn dataset_partition_contract() {
    let spec = tiny_spec(21);
    let ds = build_dataset(&spec).unwrap();
    assert_eq!(ds.train.len(), 3 * 3);
    assert_eq!(ds.test.len(), 3 * 3 + 6);
    assert!(ds.train.iter().all(|s| s.label != 3));
    let mut train_classes: Vec<i64> = ds.train.iter().map(|s| s.label).collect();
    train_classes.dedup();
    assert_eq!(train_classes, vec![0, 1, 2]);
    let mut test_classes: Vec<i64> = ds.test.iter().map(|s| s.label).collect();
    test_classes.dedup();
    assert_eq!(test_classes, vec![0, 1, 2, 3]);
    assert!(ds.train.iter().all(|s| (s.values.rows, s.values.cols) == (64, 64)));
}

#[test]
fn dataset_is_byte_identical_per_seed() {
    let a = serde_json::to_vec(&build_dataset(&tiny_spec(5)).unwrap()).unwrap();
    let b = serde_json::to_vec(&build_dataset(&tiny_spec(5)).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn dataset_needs_two_known_and_one_unknown() {
    let mut spec = tiny_spec(1);
    spec.unknown.clear();
    assert!(build_dataset(&spec).is_err());
}

#[test]
fn unmet_counts_fail() {
    let mut spec = tiny_spec(1);
    spec.slices_per_class = 1000;
    spec.max_recordings = 1;
    assert!(matches!(build_dataset(&spec), Err(Error::Insufficient(_))));
}

#[test]
fn default_profiles_respect_separation() {
    let ids: Vec<i64> = (0..8).collect();
    let ps = default_profiles(&ids, FS, 8192.0 / FS, 0.08, 3).unwrap();
    for i in 0..ps.len() {
        for j in 0..i {
            assert!(profile_distance(&ps[i], &ps[j], FS) >= 0.08);
        }
    }
}

#[test]
fn reference_split_sizes() {
    assert_eq!(REFERENCE_KNOWN.len(), 20);
    assert_eq!(REFERENCE_UNKNOWN.len(), 5);
    let mut all: Vec<i64> = REFERENCE_KNOWN.iter().chain(&REFERENCE_UNKNOWN).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..25).collect::<Vec<_>>());
}

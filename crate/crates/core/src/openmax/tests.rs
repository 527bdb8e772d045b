use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn sample_weibull(w: Weibull, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| w.quantile(rng.random::<f64>())).collect()
}

fn synthetic_calibration(n: usize, mode: WeightMode, sim: Option<usize>, rng: &mut ChaCha8Rng) -> Calibration {
    let width = n + sim.is_some() as usize;
    let classes = (0..n)
        .map(|id| ClassModel {
            id,
            mav: (0..width).map(|_| rng.random_range(-3.0..3.0)).collect(),
            shape: rng.random_range(0.5..4.0),
            scale: rng.random_range(0.5..6.0),
            location: rng.random_range(0.0..2.0),
            tail_max: 0.0,
        })
        .collect();
    Calibration {
        version: CALIBRATION_VERSION,
        alpha: 3,
        tail_size: 20,
        distance_metric: DistanceMetric::Euclidean,
        weight_mode: mode,
        simulated_unknown: sim,
        classes,
    }
}

/// Independent transcription: explicit loops, no shared helpers.
fn oracle(v: &[f64], cal: &Calibration) -> Vec<f64> {
    let n = v.len();
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in 0..n - 1 - i {
            if v[order[j]] < v[order[j + 1]] {
                order.swap(j, j + 1);
            }
        }
    }
    let a = cal.alpha as f64;
    let mut c = vec![1.0; n];
    for k in 1..=cal.alpha {
        let s = order[k - 1];
        if Some(s) == cal.simulated_unknown {
            c[s] = 1.0 - (a - k as f64) / a;
            continue;
        }
        let m = &cal.classes[s];
        let mut d2 = 0.0;
        for i in 0..n {
            d2 += (v[i] - m.mav[i]).powi(2);
        }
        let d = d2.sqrt();
        let t = if d > m.location {
            (d - m.location) / m.scale
        } else {
            0.0
        };
        let surv = (-t.powf(m.shape)).exp();
        let f = match cal.weight_mode {
            WeightMode::EvtCdf => 1.0 - surv,
            WeightMode::PaperLiteral => surv,
        };
        c[s] = 1.0 - (a - k as f64) / a * f;
    }
    let mut scores: Vec<f64> = (0..n).map(|i| v[i] * c[i]).collect();
    let mut u = 0.0;
    for i in 0..n {
        u += v[i] - scores[i];
    }
    scores.push(u);
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    let p: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
    let mut known = Vec::new();
    let mut unknown = p[n];
    for i in 0..n {
        if Some(i) == cal.simulated_unknown {
            unknown += p[i];
        } else {
            known.push(p[i]);
        }
    }
    known.push(unknown);
    known
}

#[test]
fn matches_straight_line_oracle_in_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for mode in [WeightMode::EvtCdf, WeightMode::PaperLiteral] {
        for sim in [None, Some(5)] {
            let cal = synthetic_calibration(5, mode, sim, &mut rng);
            for _ in 0..200 {
                let v: Vec<f64> = (0..cal.logit_count()).map(|_| rng.random_range(-6.0..6.0)).collect();
                let p = score(&v, &cal).unwrap();
                let o = oracle(&v, &cal);
                assert_eq!(p.probabilities.len(), o.len());
                for (a, b) in p.probabilities.iter().zip(&o) {
                    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                }
                assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn weight_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cal = synthetic_calibration(3, WeightMode::EvtCdf, Some(3), &mut rng);
    cal.alpha = 1;
    let c = correction_weights(&[0.0, 1.0, 2.0, 5.0], &cal).unwrap();
    assert_eq!(c, vec![1.0; 4]);

    // Distance at the location: CDF is zero, no decrement.
    let mut cal = synthetic_calibration(2, WeightMode::EvtCdf, None, &mut rng);
    cal.alpha = 2;
    let v = [3.0, 1.0];
    let d = DistanceMetric::Euclidean.distance(&v, &cal.classes[0].mav);
    cal.classes[0].location = d;
    assert_eq!(correction_weights(&v, &cal).unwrap()[0], 1.0);

    cal.alpha = 3;
    assert!(matches!(correction_weights(&v, &cal), Err(Error::Invalid(_))));
}

#[test]
fn recalibrate_examples() {
    let (t, u) = recalibrate(&[1.0, -2.0, 3.0], &[1.0; 3]);
    assert_eq!((t, u), (vec![1.0, -2.0, 3.0], 0.0));
    let (t, u) = recalibrate(&[4.0, 1.0], &[0.5, 1.0]);
    assert_eq!((t, u), (vec![2.0, 1.0], 2.0));
}

#[test]
fn conservation_over_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10_000 {
        let n = rng.random_range(2..12);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let (t, u) = recalibrate(&v, &c);
        let lhs = t.iter().sum::<f64>() + u;
        assert!((lhs - v.iter().sum::<f64>()).abs() < 1e-12);
    }
}

#[test]
fn probability_examples() {
    let p = openmax_probability(&[1.0, 2.0, 0.5], 1e4, None);
    assert!(p.unknown_probability() > 1.0 - 1e-12);
    assert_eq!(p.decision, Decision::Unknown);

    let p = openmax_probability(&[0.7, 0.7, 0.7], 0.7, None);
    for q in &p.probabilities {
        assert!((q - 0.25).abs() < 1e-15);
    }

    // The simulated-unknown entry joins the unknown mass.
    let p = openmax_probability(&[0.0, 0.0, 0.0], 0.0, Some(2));
    assert_eq!(p.probabilities.len(), 3);
    assert!((p.unknown_probability() - 0.5).abs() < 1e-15);
}

#[test]
fn no_decrement_keeps_closed_set_decision() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cal = synthetic_calibration(4, WeightMode::EvtCdf, None, &mut rng);
    cal.alpha = 1;
    for _ in 0..100 {
        let v: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..5.0)).collect();
        let p = score(&v, &cal).unwrap();
        assert_eq!(p.decision, Decision::Known(argmax(&v)));
        assert_eq!(p.raw_unknown_score, 0.0);
        assert_eq!(p, score(&v, &cal).unwrap());
    }
}

#[test]
fn collect_avs_filters_by_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
    let rows: Vec<Vec<f64>> = (0..20)
        .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let logits = Tensor::new(&[20, 3], rows.concat());
    let got = collect_avs(&logits, &labels, 3);

    let mut expected: Vec<Vec<Vec<f64>>> = vec![vec![]; 3];
    for (r, &y) in rows.iter().zip(&labels) {
        let best = if r[0] >= r[1] && r[0] >= r[2] {
            0
        } else if r[1] >= r[2] {
            1
        } else {
            2
        };
        if best == y {
            expected[y].push(r.clone());
        }
    }
    match got {
        Ok(sets) => assert_eq!(sets, expected),
        Err(Error::EmptyClass(j)) => assert!(expected[j as usize].is_empty()),
        Err(e) => panic!("{e}"),
    }

    // Perfect fit keeps everything.
    let eye: Vec<f64> = labels
        .iter()
        .flat_map(|&y| (0..3).map(move |k| (k == y) as u8 as f64))
        .collect();
    let sets = collect_avs(&Tensor::new(&[20, 3], eye), &labels, 3).unwrap();
    assert_eq!(sets.iter().map(Vec::len).collect::<Vec<_>>(), vec![7, 7, 6]);

    // Always predicting class 0 empties class 1.
    let zero: Vec<f64> = (0..20).flat_map(|_| [1.0, 0.0, 0.0]).collect();
    assert!(matches!(
        collect_avs(&Tensor::new(&[20, 3], zero), &labels, 3),
        Err(Error::EmptyClass(1))
    ));
}

#[test]
fn weibull_recovery_across_seeds() {
    let truth = Weibull {
        shape: 2.0,
        scale: 5.0,
        location: 0.0,
    };
    for seed in 0..10 {
        let x = sample_weibull(truth, 1000, seed);
        let w = fit_weibull_tail(&x, LocationPolicy::TailMin, 0).unwrap();
        assert!((1.8..=2.2).contains(&w.shape), "seed {seed}: shape {}", w.shape);
        assert!((4.5..=5.5).contains(&w.scale), "seed {seed}: scale {}", w.scale);
    }
}

#[test]
fn two_param_fit_recovers_known_parameters() {
    let truth = Weibull {
        shape: 0.8,
        scale: 0.01,
        location: 0.0,
    };
    let (k, s) = fit_two_param(&sample_weibull(truth, 20_000, 9)).unwrap();
    assert!((k - 0.8).abs() < 0.03, "{k}");
    assert!((s - 0.01).abs() < 0.0005, "{s}");
}

#[test]
fn degenerate_tails_are_errors() {
    let set = vec![vec![1.0, 2.0]; 10];
    let err = fit_class(4, &set, &CalibrationConfig::default()).unwrap_err();
    assert!(matches!(err, Error::DegenerateTail { class: 4, .. }), "{err}");
    assert!(fit_two_param(&[2.0, 2.0, 2.0]).is_err());
}

#[test]
fn fitted_cdf_covers_tail_maximum() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let set: Vec<Vec<f64>> = (0..100)
            .map(|_| {
                (0..4)
                    .map(|_| rng.random_range(-1.0..1.0) + rng.random::<f64>().powi(3))
                    .collect()
            })
            .collect();
        let m = fit_class(0, &set, &CalibrationConfig::default()).unwrap();
        assert!(m.weibull().cdf(m.tail_max) >= 0.9, "{m:?}");
    }
}

#[test]
fn calibration_json_round_trip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cal = synthetic_calibration(3, WeightMode::PaperLiteral, Some(3), &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("calib.json");
    cal.save(&path).unwrap();
    assert_eq!(Calibration::load(&path).unwrap(), cal);
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    for key in [
        "version",
        "alpha",
        "tail_size",
        "distance_metric",
        "weight_mode",
        "classes",
    ] {
        assert!(value.get(key).is_some(), "{key}");
    }
    assert_eq!(value["weight_mode"], "paper-literal");
    for key in ["id", "mav", "shape", "scale", "location", "tail_max"] {
        assert!(value["classes"][0].get(key).is_some(), "{key}");
    }
}

#[test]
fn calibrate_end_to_end_on_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..150 {
        let y = i % 3;
        for k in 0..3 {
            rows.push(if k == y { 6.0 } else { 0.0 } + rng.random_range(-1.0..1.0));
        }
        labels.push(y);
    }
    let logits = Tensor::new(&[150, 3], rows);
    let cal = calibrate(&logits, &labels, 3, None, &CalibrationConfig::default()).unwrap();
    assert_eq!(cal.classes.len(), 3);
    // A point far from every MAV gets more unknown mass than a typical one.
    let near = score(&cal.classes[0].mav, &cal).unwrap();
    let far = score(&[3.0, 3.0, 3.0], &cal).unwrap();
    assert!(far.unknown_probability() > near.unknown_probability());
    assert!(matches!(
        calibrate(&logits, &labels, 2, None, &CalibrationConfig::default()),
        Err(Error::Shape(_))
    ));
}

#[test]
fn metric_and_mode_parsing() {
    assert_eq!(
        "eucos".parse::<DistanceMetric>().unwrap(),
        DistanceMetric::EuclideanCosine
    );
    assert_eq!("paper-literal".parse::<WeightMode>().unwrap(), WeightMode::PaperLiteral);
    assert!("manhattan".parse::<DistanceMetric>().is_err());
    assert!(DistanceMetric::Cosine.distance(&[1.0, 0.0], &[2.0, 0.0]).abs() < 1e-15);
}

proptest! {
    #[test]
    fn lowering_one_weight_never_lowers_unknown_probability(
        v in prop::collection::vec(-5.0f64..5.0, 2..8),
        seed in 0u64..1000,
        j in 0usize..8,
        drop in 0.0f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = j % v.len();
        let c: Vec<f64> = (0..v.len()).map(|_| rng.random()).collect();
        let mut c2 = c.clone();
        c2[j] *= drop;
        let p = |c: &[f64]| {
            let (t, u) = recalibrate(&v, c);
            openmax_probability(&t, u, None).unknown_probability()
        };
        // Only a positive logit moves mass toward unknown when its weight drops.
        prop_assume!(v[j] >= 0.0);
        prop_assert!(p(&c2) >= p(&c) - 1e-15);
    }

    #[test]
    fn top_ranks_survive_positive_affine_maps(
        v in prop::collection::vec(-5.0f64..5.0, 3..8),
        a in 0.01f64..10.0,
        b in -10.0f64..10.0,
    ) {
        let w: Vec<f64> = v.iter().map(|x| a * x + b).collect();
        let mut r1 = rank_desc(&v)[..3].to_vec();
        let mut r2 = rank_desc(&w)[..3].to_vec();
        r1.sort_unstable();
        r2.sort_unstable();
        prop_assert_eq!(r1, r2);
    }

    #[test]
    fn evt_weight_nonincreasing_in_distance(
        shape in 0.3f64..5.0,
        scale in 0.1f64..10.0,
        location in 0.0f64..3.0,
        d1 in 0.0f64..20.0,
        delta in 0.0f64..20.0,
    ) {
        let w = Weibull { shape, scale, location };
        prop_assert!(w.cdf(d1 + delta) >= w.cdf(d1));
        for k in 1..=3usize {
            let frac = (3 - k) as f64 / 3.0;
            prop_assert!(1.0 - frac * w.cdf(d1 + delta) <= 1.0 - frac * w.cdf(d1));
        }
    }

    #[test]
    fn probabilities_are_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..10), u in -50.0f64..50.0) {
        let p = openmax_probability(&v, u, None);
        prop_assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.probabilities.iter().all(|q| *q >= 0.0));
    }
}

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::openmax::Decision::{Known, Unknown};

#[test]
fn worked_example() {
    let c = MetricCounts {
        ck: 7,
        tk: 8,
        fu: 2,
        tu: 4,
        fk: 1,
    };
    let m = metrics(&c);
    assert_eq!(m.kar, Some(0.7));
    assert_eq!(m.uar, Some(0.8));
    assert_eq!(m.kp, Some(7.0 / 9.0));
    assert_eq!(m.up, Some(4.0 / 6.0));
    assert!((m.gap.unwrap() - 0.1).abs() < 1e-15);
}

#[test]
fn undefined_metrics_are_none() {
    let m = metrics(&MetricCounts {
        ck: 3,
        tk: 4,
        fu: 1,
        ..MetricCounts::default()
    });
    assert_eq!(m.uar, None);
    assert_eq!(m.gap, None);
    assert_eq!(m.kar, Some(0.6));
}

#[test]
fn perfect_and_constant_classifiers() {
    let truth = [Some(0), Some(1), None, Some(1), None];
    let perfect = [Known(0), Known(1), Unknown, Known(1), Unknown];
    let t = tally(&truth, &perfect, 2).unwrap();
    assert_eq!((t.counts.fk, t.counts.fu), (0, 0));
    assert_eq!(t.counts.ck, t.counts.tk);

    let t = tally(&truth, &[Unknown; 5], 2).unwrap();
    assert_eq!((t.counts.tk, t.counts.tu, t.counts.fu), (0, 2, 3));
}

#[test]
fn mixed_case_matches_hand_tally() {
    // Ten known samples over three classes, ten unknown.
    let truth: Vec<Option<usize>> = [0, 0, 0, 1, 1, 1, 2, 2, 2, 2]
        .iter()
        .map(|&c| Some(c))
        .chain([None; 10])
        .collect();
    let preds = [
        Known(0),
        Known(0),
        Known(1),
        Known(1),
        Unknown,
        Known(1),
        Known(2),
        Known(0),
        Unknown,
        Known(2),
        Unknown,
        Unknown,
        Known(2),
        Unknown,
        Unknown,
        Known(0),
        Unknown,
        Unknown,
        Unknown,
        Unknown,
    ];
    let t = tally(&truth, &preds, 3).unwrap();
    // Known: 8 decided known, of which 6 exact (0,0,1,1,2,2); 2 unknown.
    // Unknown: 8 decided unknown, 2 decided known.
    assert_eq!(
        t.counts,
        MetricCounts {
            tk: 8,
            ck: 6,
            fu: 2,
            tu: 8,
            fk: 2
        }
    );
    assert_eq!(t.confusion[0], vec![2, 1, 0, 0]);
    assert_eq!(t.confusion[2], vec![1, 0, 2, 1]);
    assert_eq!(t.confusion[3], vec![1, 0, 1, 8]);
}

#[test]
fn out_of_range_prediction_is_rejected() {
    assert!(matches!(tally(&[Some(0)], &[Known(3)], 2), Err(Error::Invalid(_))));
}

#[test]
fn auc_oracle() {
    assert_eq!(auc(&[0.9, 0.8], &[0.1, 0.2]), Some(1.0));
    assert_eq!(auc(&[0.1], &[0.9]), Some(0.0));
    assert_eq!(auc(&[0.5, 0.5], &[0.5]), Some(0.5));
    assert_eq!(auc(&[], &[0.5]), None);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p: Vec<f64> = (0..40).map(|_| (rng.random_range(0..10) as f64) / 10.0).collect();
    let n: Vec<f64> = (0..30).map(|_| (rng.random_range(0..10) as f64) / 10.0).collect();
    let mut pairs = 0.0;
    for a in &p {
        for b in &n {
            pairs += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    assert!((auc(&p, &n).unwrap() - pairs / 1200.0).abs() < 1e-12);
}

#[test]
fn report_per_class_and_markdown() {
    let known = [3, 7];
    let truth = [3, 3, 7, 9, 9, 11];
    let preds = [Known(0), Unknown, Known(1), Unknown, Known(0), Unknown];
    let r = evaluate("demo", &known, &truth, &preds, Some(&[0.1, 0.6, 0.2, 0.9, 0.3, 0.8])).unwrap();
    let ids: Vec<i64> = r.per_class.iter().map(|c| c.class_id).collect();
    assert_eq!(ids, vec![3, 7, 9, 11]);
    assert_eq!(r.per_class[0].accuracy, Some(0.5));
    assert_eq!(r.per_class[2].accuracy, Some(0.5));
    assert_eq!(r.closed_acc, Some(1.0));
    let md = render_markdown(std::slice::from_ref(&r));
    assert!(md.contains("| KAR | 0.6667 |"), "{md}");

    let closed = evaluate("closed", &known, &[3, 7], &[Known(0), Known(1)], None).unwrap();
    assert_eq!(closed.metrics.uar, None);
    assert!(render_markdown(&[closed]).contains("| UAR | undefined |"));
}

#[test]
fn report_files_are_deterministic_and_round_trip() {
    let r = evaluate(
        "x",
        &[0, 1],
        &[0, 1, 2],
        &[Known(0), Unknown, Unknown],
        Some(&[0.1, 0.5, 0.7]),
    )
    .unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    emit_report(a.path(), &r, std::slice::from_ref(&r)).unwrap();
    emit_report(b.path(), &r, std::slice::from_ref(&r)).unwrap();
    for f in ["report.json", "report.md"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap()
        );
    }
    let back: OpenSetReport = crate::io::read_json(&a.path().join("report.json")).unwrap();
    assert_eq!(back, r);
}

#[test]
fn pca_on_planar_points_preserves_distances() {
    let pts: Vec<Vec<f64>> = vec![
        vec![0.0, 0.0],
        vec![3.0, 1.0],
        vec![-1.0, 2.0],
        vec![2.0, -2.0],
        vec![1.0, 4.0],
    ];
    let p = pca_2d(&pts).unwrap();
    assert!(!p.fallback);
    for i in 0..pts.len() {
        for j in 0..pts.len() {
            let d0 = ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt();
            let d1 = ((p.coords[i][0] - p.coords[j][0]).powi(2) + (p.coords[i][1] - p.coords[j][1]).powi(2)).sqrt();
            assert!((d0 - d1).abs() < 1e-12);
        }
    }
}

#[test]
fn pca_on_collinear_points_has_zero_second_axis() {
    let pts: Vec<Vec<f64>> = (0..6).map(|t| vec![t as f64, 2.0 * t as f64, -(t as f64)]).collect();
    let p = pca_2d(&pts).unwrap();
    assert!(p.coords.iter().all(|c| c[1] == 0.0));
}

#[test]
fn pca_variance_matches_eigenvalues() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scales = [5.0, 3.0, 2.0, 1.0, 1.0, 0.5, 0.5, 0.2, 0.1, 0.1];
    let pts: Vec<Vec<f64>> = (0..400)
        .map(|_| {
            scales
                .iter()
                .map(|s| s * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let p = pca_2d(&pts).unwrap();

    // Oracle: power iteration with deflation on the sample covariance.
    let n = pts.len() as f64;
    let mean: Vec<f64> = (0..10).map(|j| pts.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut cov = vec![vec![0.0; 10]; 10];
    for r in &pts {
        for a in 0..10 {
            for b in 0..10 {
                cov[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]) / (n - 1.0);
            }
        }
    }
    let mut lambdas = Vec::new();
    for _ in 0..2 {
        let mut v = vec![1.0; 10];
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let w: Vec<f64> = (0..10).map(|a| (0..10).map(|b| cov[a][b] * v[b]).sum()).collect();
            lambda = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            v = w.iter().map(|x| x / lambda).collect();
        }
        for a in 0..10 {
            for b in 0..10 {
                cov[a][b] -= lambda * v[a] * v[b];
            }
        }
        lambdas.push(lambda);
    }
    for k in 0..2 {
        let var = p.coords.iter().map(|c| c[k] * c[k]).sum::<f64>() / (n - 1.0);
        assert!((var - lambdas[k]).abs() < 1e-8, "{var} vs {}", lambdas[k]);
        assert!((p.variance[k] - lambdas[k]).abs() < 1e-8);
    }
}

#[test]
fn pca_degenerate_cases() {
    let same = vec![vec![1.0, 2.0, 3.0]; 4];
    let p = pca_2d(&same).unwrap();
    assert!(p.fallback);
    assert!(p.coords.iter().all(|c| c == &[0.0, 0.0]));
    assert!(matches!(pca_2d(&same[..2]), Err(Error::Insufficient(_))));
}

#[test]
fn projection_csv_layout() {
    let pts: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64, (i * i) as f64]).collect();
    let p = pca_2d(&pts).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("projection.csv");
    write_projection_csv(&path, &p, &[1, 2, -1], &["test", "test", "simu"]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x,y,label,split");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].ends_with(",-1,simu"));
}

proptest! {
    #[test]
    fn counts_are_conserved(
        rows in prop::collection::vec((prop::option::of(0usize..4), prop::option::of(0usize..4)), 0..80)
    ) {
        let truth: Vec<Option<usize>> = rows.iter().map(|r| r.0).collect();
        let preds: Vec<Decision> = rows.iter().map(|r| r.1.map_or(Unknown, Known)).collect();
        let t = tally(&truth, &preds, 4).unwrap();
        let known = truth.iter().filter(|t| t.is_some()).count();
        prop_assert_eq!(t.counts.tk + t.counts.fu, known);
        prop_assert_eq!(t.counts.tu + t.counts.fk, truth.len() - known);
        prop_assert!(t.counts.ck <= t.counts.tk);
        for (j, row) in t.confusion.iter().enumerate() {
            let expect = truth.iter().filter(|t| t.unwrap_or(4) == j).count();
            prop_assert_eq!(row.iter().sum::<usize>(), expect);
        }
        let m = metrics(&t.counts);
        if let (Some(k), Some(u), Some(g)) = (m.kar, m.uar, m.gap) {
            prop_assert_eq!(g, (u - k).abs());
            prop_assert!(k <= t.counts.tk as f64 / (t.counts.tk + t.counts.fu) as f64);
        }
    }
}

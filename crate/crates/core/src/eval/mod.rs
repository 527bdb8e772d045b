//! Open-set metrics, reports and embedding projections.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{atomic_write, write_json};
use crate::openmax::Decision;

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    /// Known samples decided as some known class.
    pub tk: usize,
    /// Unknown samples decided as unknown.
    pub tu: usize,
    /// Unknown samples decided as a known class.
    pub fk: usize,
    /// Known samples decided as unknown.
    pub fu: usize,
    /// Known samples decided as their own class.
    pub ck: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tally {
    pub counts: MetricCounts,
    /// Rows: true known classes then unknown; columns: predicted classes then unknown.
    pub confusion: Vec<Vec<usize>>,
}

/// Count decisions. `truth[i]` is the known-class index or `None` for an
/// unknown sample.
pub fn tally(truth: &[Option<usize>], predictions: &[Decision], classes: usize) -> Result<Tally> {
    if truth.len() != predictions.len() {
        return Err(Error::Shape(format!(
            "{} labels but {} predictions",
            truth.len(),
            predictions.len()
        )));
    }
    let mut counts = MetricCounts::default();
    let mut confusion = vec![vec![0; classes + 1]; classes + 1];
    for (t, p) in truth.iter().zip(predictions) {
        if let Some(j) = t.filter(|&j| j >= classes) {
            return Err(Error::Invalid(format!(
                "true class index {j} out of range for {classes} classes"
            )));
        }
        if let Decision::Known(j) = p {
            if *j >= classes {
                return Err(Error::Invalid(format!(
                    "predicted class index {j} out of range for {classes} classes"
                )));
            }
        }
        let row = t.unwrap_or(classes);
        let col = match p {
            Decision::Known(j) => *j,
            Decision::Unknown => classes,
        };
        confusion[row][col] += 1;
        match (t, p) {
            (Some(j), Decision::Known(k)) => {
                counts.tk += 1;
                counts.ck += (j == k) as usize;
            }
            (Some(_), Decision::Unknown) => counts.fu += 1,
            (None, Decision::Unknown) => counts.tu += 1,
            (None, Decision::Known(_)) => counts.fk += 1,
        }
    }
    Ok(Tally { counts, confusion })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub kar: Option<f64>,
    pub uar: Option<f64>,
    pub kp: Option<f64>,
    pub up: Option<f64>,
    pub gap: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Undefined ratios (zero denominators) stay `None`.
pub fn metrics(c: &MetricCounts) -> Metrics {
    let kar = ratio(c.ck, c.tk + c.fu);
    let uar = ratio(c.tu, c.tu + c.fk);
    Metrics {
        kar,
        uar,
        kp: ratio(c.ck, c.tk + c.fk),
        up: ratio(c.tu, c.tu + c.fu),
        gap: kar.zip(uar).map(|(k, u)| (u - k).abs()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class_id: i64,
    pub known: bool,
    pub support: usize,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenSetReport {
    pub version: u32,
    pub name: String,
    pub metrics: Metrics,
    pub counts: MetricCounts,
    /// `CK / TK`: exact-class accuracy among known samples decided as known.
    pub closed_acc: Option<f64>,
    /// Unknown-vs-known AUC of the unknown probability.
    pub auc: Option<f64>,
    pub per_class: Vec<ClassAccuracy>,
    /// Class ids labelling the confusion rows and columns, unknown last.
    pub known_ids: Vec<i64>,
    pub confusion: Vec<Vec<usize>>,
}

/// Evaluate decisions against true class ids. Ids in `known_ids` are known
/// classes (in logit order); every other id counts as unknown.
pub fn evaluate(
    name: &str,
    known_ids: &[i64],
    true_ids: &[i64],
    predictions: &[Decision],
    unknown_scores: Option<&[f64]>,
) -> Result<OpenSetReport> {
    let truth: Vec<Option<usize>> = true_ids
        .iter()
        .map(|id| known_ids.iter().position(|k| k == id))
        .collect();
    let t = tally(&truth, predictions, known_ids.len())?;

    let mut ids: Vec<i64> = true_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let per_class = ids
        .iter()
        .map(|&id| {
            let idx = known_ids.iter().position(|&k| k == id);
            let mut support = 0;
            let mut hit = 0;
            for (t, p) in true_ids.iter().zip(predictions) {
                if *t == id {
                    support += 1;
                    hit += match idx {
                        Some(j) => *p == Decision::Known(j),
                        None => *p == Decision::Unknown,
                    } as usize;
                }
            }
            ClassAccuracy {
                class_id: id,
                known: idx.is_some(),
                support,
                accuracy: ratio(hit, support),
            }
        })
        .collect();

    let auc = match unknown_scores {
        Some(s) => {
            if s.len() != truth.len() {
                return Err(Error::Shape(format!("{} scores for {} samples", s.len(), truth.len())));
            }
            let pos: Vec<f64> = s
                .iter()
                .zip(&truth)
                .filter(|(_, t)| t.is_none())
                .map(|(v, _)| *v)
                .collect();
            let neg: Vec<f64> = s
                .iter()
                .zip(&truth)
                .filter(|(_, t)| t.is_some())
                .map(|(v, _)| *v)
                .collect();
            auc(&pos, &neg)
        }
        None => None,
    };

    Ok(OpenSetReport {
        version: REPORT_VERSION,
        name: name.to_string(),
        metrics: metrics(&t.counts),
        counts: t.counts,
        closed_acc: ratio(t.counts.ck, t.counts.tk),
        auc,
        per_class,
        known_ids: known_ids.to_vec(),
        confusion: t.confusion,
    })
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (Mann–Whitney U over the pooled ranks).
pub fn auc(positive: &[f64], negative: &[f64]) -> Option<f64> {
    if positive.is_empty() || negative.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&v| (v, true))
        .chain(negative.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (positive.len() as f64, negative.len() as f64);
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

/// Markdown with one metric column per report and a per-class table per report.
pub fn render_markdown(reports: &[OpenSetReport]) -> String {
    let mut s = String::new();
    s.push_str("| Metric |");
    for r in reports {
        let _ = write!(s, " {} |", r.name);
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(reports.len()));
    s.push('\n');
    let rows: [(&str, fn(&OpenSetReport) -> Option<f64>); 8] = [
        ("KAR", |r| r.metrics.kar),
        ("UAR", |r| r.metrics.uar),
        ("KP", |r| r.metrics.kp),
        ("UP", |r| r.metrics.up),
        ("GAP", |r| r.metrics.gap),
        ("Closed Acc", |r| r.closed_acc),
        ("AUC", |r| r.auc),
        ("Known samples", |r| Some((r.counts.tk + r.counts.fu) as f64)),
    ];
    for (label, get) in rows {
        let _ = write!(s, "| {label} |");
        for r in reports {
            let v = get(r);
            if label == "Known samples" {
                let _ = write!(s, " {} |", v.unwrap_or(0.0) as usize);
            } else {
                let _ = write!(s, " {} |", fmt_opt(v));
            }
        }
        s.push('\n');
    }
    for r in reports {
        let _ = write!(
            s,
            "\n## {}\n\n| Class | Known | Support | Accuracy |\n|---|---|---|---|\n",
            r.name
        );
        for c in &r.per_class {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} |",
                c.class_id,
                if c.known { "yes" } else { "no" },
                c.support,
                fmt_opt(c.accuracy)
            );
        }
        s.push_str("\nConfusion (rows true, columns predicted):\n\n|   |");
        for id in &r.known_ids {
            let _ = write!(s, " {id} |");
        }
        s.push_str(" unknown |\n|---|");
        s.push_str(&"---|".repeat(r.known_ids.len() + 1));
        s.push('\n');
        for (i, row) in r.confusion.iter().enumerate() {
            let head = r.known_ids.get(i).map_or_else(|| "unknown".to_string(), i64::to_string);
            let _ = write!(s, "| {head} |");
            for v in row {
                let _ = write!(s, " {v} |");
            }
            s.push('\n');
        }
    }
    s.push_str("\nClosed Acc counts exact-class hits among known samples whose open-set decision was a known class.\n");
    s
}

/// Write `report.json` (the given value) and `report.md` into `dir`.
pub fn emit_report<T: Serialize>(dir: &Path, json: &T, reports: &[OpenSetReport]) -> Result<()> {
    write_json(&dir.join("report.json"), json)?;
    atomic_write(&dir.join("report.md"), render_markdown(reports).as_bytes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// Variance along each output axis.
    pub variance: [f64; 2],
    /// Set when the covariance had no usable spread and raw axes were used.
    pub fallback: bool,
}

/// Project rows onto the top two principal axes. Axes with no variance give
/// zero coordinates; eigenvector signs make the largest component positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Projection> {
    let n = points.len();
    if n < 3 {
        return Err(Error::Insufficient(format!("{n} points, projection needs at least 3")));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::Shape("points must share a positive dimension".into()));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let trace = cov.trace();

    let axes: Vec<(f64, Vec<f64>)> = if trace <= f64::MIN_POSITIVE || !trace.is_finite() {
        (0..2)
            .map(|k| {
                let e: Vec<f64> = (0..d).map(|j| (j == k) as u8 as f64).collect();
                (0.0, e)
            })
            .collect()
    } else {
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        order
            .iter()
            .take(2)
            .map(|&k| {
                let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
                let big = v
                    .iter()
                    .copied()
                    .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
                if big < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                (eig.eigenvalues[k].max(0.0), v)
            })
            .collect()
    };
    let fallback = trace <= f64::MIN_POSITIVE || !trace.is_finite();
    let top = axes[0].0;
    let mut coords = vec![[0.0; 2]; n];
    let mut variance = [0.0; 2];
    for (k, (lambda, v)) in axes.iter().enumerate() {
        variance[k] = *lambda;
        if !fallback && *lambda <= 1e-12 * top {
            variance[k] = 0.0;
            continue;
        }
        for (i, c) in coords.iter_mut().enumerate() {
            c[k] = centered.row(i).iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }
    Ok(Projection {
        coords,
        variance,
        fallback,
    })
}

/// `x,y,label,split` rows.
pub fn write_projection_csv(path: &Path, proj: &Projection, labels: &[i64], splits: &[&str]) -> Result<()> {
    if labels.len() != proj.coords.len() || splits.len() != proj.coords.len() {
        return Err(Error::Shape("projection, labels and splits differ in length".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(["x", "y", "label", "split"]).map_err(csv_err)?;
    for ((c, l), s) in proj.coords.iter().zip(labels).zip(splits) {
        w.write_record([c[0].to_string(), c[1].to_string(), l.to_string(), s.to_string()])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    atomic_write(path, &bytes)
}

#[cfg(test)]
mod tests;

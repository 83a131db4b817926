//! AUROC, FPR at a fixed TPR, ID accuracy, and report assembly.
//!
//! Higher scores mean "more in-distribution" throughout.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::FeatureMatrix;
use crate::scoring::score_rows;

pub const DEFAULT_TPR: f64 = 0.95;

fn check_scores(xs: &[f64], what: &'static str) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::EmptyInput(what));
    }
    if xs.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

/// Probability that a random ID score beats a random OOD score, ties
/// counting half. Computed from midranks in `O((n + m) log(n + m))`.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores(id_scores, "ID scores")?;
    check_scores(ood_scores, "OOD scores")?;
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut id_rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks are 1-based; the tie block [i, j] shares the mean rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let ids = all[i..=j].iter().filter(|(_, is_id)| *is_id).count();
        id_rank_sum += mid * ids as f64;
        i = j + 1;
    }
    let n = id_scores.len() as f64;
    let m = ood_scores.len() as f64;
    let u = id_rank_sum - n * (n + 1.0) / 2.0;
    Ok((u / (n * m)).clamp(0.0, 1.0))
}

/// Number of ID samples that must be kept: `ceil(level * n)`, treating
/// products within rounding noise of an integer as that integer.
fn required_count(level: f64, n: usize) -> usize {
    let x = level * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * x.max(1.0) {
        r
    } else {
        x.ceil()
    };
    (k as usize).clamp(1, n)
}

/// Fraction of OOD scores at or above the largest threshold that keeps at
/// least `level` of the ID scores.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], level: f64) -> Result<f64> {
    check_scores(id_scores, "ID scores")?;
    check_scores(ood_scores, "OOD scores")?;
    if !(level > 0.0 && level <= 1.0) {
        return Err(Error::Range(format!("TPR level {level} outside (0, 1]")));
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let gamma = sorted[required_count(level, sorted.len()) - 1];
    let fp = ood_scores.iter().filter(|&&s| s >= gamma).count();
    Ok(fp as f64 / ood_scores.len() as f64)
}

pub fn id_accuracy(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: truth.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput("ID predictions"));
    }
    let hits = predictions
        .iter()
        .zip(truth)
        .filter(|(p, t)| p == t)
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub auroc: f64,
    pub fpr95: f64,
}

/// Settings echoed into a report so it can be traced to its inputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportEcho {
    pub tau: f64,
    pub scheme: String,
    pub n_tokens: usize,
    pub seeds: Vec<u64>,
    pub bank_hashes: Vec<(String, String)>,
    pub negative_mining: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Per OOD split, in input order.
    pub splits: Vec<(String, SplitMetrics)>,
    pub mean_auroc: f64,
    pub mean_fpr95: f64,
    pub id_accuracy: f64,
    pub config: ReportEcho,
}

impl EvalReport {
    pub fn split(&self, name: &str) -> Option<&SplitMetrics> {
        self.splits.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// ID-side evaluation input: rows plus the true class of each row.
#[derive(Debug, Clone, Copy)]
pub struct IdSplit<'a> {
    pub features: &'a FeatureMatrix,
    pub truth: &'a [usize],
}

/// Scores every split with NegLabel against `class_rows` (ID classes
/// first) and assembles a report. Multiple ID splits are pooled.
pub fn evaluate(
    id_splits: &[IdSplit<'_>],
    ood_splits: &[(String, &FeatureMatrix)],
    class_rows: &FeatureMatrix,
    num_id: usize,
    tau: f64,
    threads: usize,
) -> Result<EvalReport> {
    if id_splits.is_empty() {
        return Err(Error::EmptyInput("ID test splits"));
    }
    if ood_splits.is_empty() {
        return Err(Error::EmptyInput("OOD test splits"));
    }
    let mut id_scores = Vec::new();
    let mut preds = Vec::new();
    let mut truth = Vec::new();
    for split in id_splits {
        if split.truth.len() != split.features.len() {
            return Err(Error::LengthMismatch {
                left: split.features.len(),
                right: split.truth.len(),
            });
        }
        for r in score_rows(split.features, class_rows, num_id, tau, threads)? {
            id_scores.push(r.neglabel);
            preds.push(r.prediction);
        }
        truth.extend_from_slice(split.truth);
    }
    let mut splits = Vec::with_capacity(ood_splits.len());
    for (name, feats) in ood_splits {
        let ood: Vec<f64> = score_rows(feats, class_rows, num_id, tau, threads)?
            .into_iter()
            .map(|r| r.neglabel)
            .collect();
        splits.push((
            name.clone(),
            SplitMetrics {
                auroc: auroc(&id_scores, &ood)?,
                fpr95: fpr_at_tpr(&id_scores, &ood, DEFAULT_TPR)?,
            },
        ));
    }
    let k = splits.len() as f64;
    Ok(EvalReport {
        mean_auroc: splits.iter().map(|(_, m)| m.auroc).sum::<f64>() / k,
        mean_fpr95: splits.iter().map(|(_, m)| m.fpr95).sum::<f64>() / k,
        splits,
        id_accuracy: id_accuracy(&preds, &truth)?,
        config: ReportEcho {
            tau,
            ..ReportEcho::default()
        },
    })
}

/// Fixed-width AUROC / FPR95 table, one row per named report.
pub fn format_table(rows: &[(&str, &EvalReport)]) -> String {
    let mut out = String::new();
    let Some((_, first)) = rows.first() else {
        return out;
    };
    let names: Vec<&str> = first
        .splits
        .iter()
        .map(|(n, _)| n.as_str())
        .chain(["average"])
        .collect();
    let _ = write!(out, "{:<16}", "method");
    for n in &names {
        let _ = write!(out, " | {n:^17}");
    }
    let _ = writeln!(out, " | {:>7}", "ID ACC");
    let _ = write!(out, "{:<16}", "");
    for _ in &names {
        let _ = write!(out, " | {:>8} {:>8}", "AUROC↑", "FPR95↓");
    }
    let _ = writeln!(out, " | {:>7}", "");
    for (label, r) in rows {
        let _ = write!(out, "{label:<16}");
        for (_, m) in &r.splits {
            let _ = write!(out, " | {:>8.2} {:>8.2}", 100.0 * m.auroc, 100.0 * m.fpr95);
        }
        let _ = write!(
            out,
            " | {:>8.2} {:>8.2}",
            100.0 * r.mean_auroc,
            100.0 * r.mean_fpr95
        );
        let _ = writeln!(out, " | {:>7.2}", 100.0 * r.id_accuracy);
    }
    out
}

/// Pair-counting AUROC, quadratic. Kept public for test oracles.
pub fn auroc_pairwise(id_scores: &[f64], ood_scores: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in id_scores {
        for &b in ood_scores {
            wins += match a.partial_cmp(&b) {
                Some(Ordering::Greater) => 1.0,
                Some(Ordering::Equal) => 0.5,
                _ => 0.0,
            };
        }
    }
    wins / (id_scores.len() * ood_scores.len()) as f64
}

/// Threshold-scan FPR oracle: tries every observed score as a threshold
/// and keeps the largest one whose TPR reaches `level`.
pub fn fpr_at_tpr_scan(id_scores: &[f64], ood_scores: &[f64], level: f64) -> f64 {
    let n = id_scores.len() as f64;
    let mut best: Option<f64> = None;
    for &t in id_scores.iter().chain(ood_scores) {
        let kept = id_scores.iter().filter(|&&s| s >= t).count() as f64;
        if kept + 1e-9 >= level * n && best.is_none_or(|b| t > b) {
            best = Some(t);
        }
    }
    let gamma = best.expect("the minimum ID score always qualifies");
    ood_scores.iter().filter(|&&s| s >= gamma).count() as f64 / ood_scores.len() as f64
}

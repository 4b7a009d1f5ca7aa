//! Ranking and threshold metrics for binary, multi-label and multi-class
//! predictions.
//!
//! Every ranking metric works on groups of tied scores, so all of them are
//! invariant under strictly increasing transforms of the scores.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Label, TaskKind};
use crate::{Error, Result};

/// Counts per distinct score, highest score first.
fn tie_groups(labels: &[bool], scores: &[f64]) -> Result<Vec<(u64, u64)>> {
    if labels.len() != scores.len() {
        return Err(Error::shape("metric", &[labels.len()], &[scores.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { op: "metric scores" });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut last = None;
    for i in order {
        if last != Some(scores[i]) {
            groups.push((0, 0));
            last = Some(scores[i]);
        }
        let g = groups.last_mut().unwrap();
        if labels[i] {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    Ok(groups)
}

fn class_counts(labels: &[bool], what: &'static str) -> Result<(u64, u64)> {
    let pos = labels.iter().filter(|&&y| y).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels(what));
    }
    Ok((pos, neg))
}

/// Average precision: `sum_k precision_k * (recall_k - recall_{k-1})` over
/// descending distinct score thresholds.
pub fn auprc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let (pos, _) = class_counts(labels, "auprc needs both classes")?;
    let (mut tp, mut fp, mut ap) = (0u64, 0u64, 0.0);
    for (p, n) in tie_groups(labels, scores)? {
        tp += p;
        fp += n;
        if p > 0 {
            ap += (tp as f64 / (tp + fp) as f64) * p as f64;
        }
    }
    // dividing once keeps a perfect ranking at exactly 1
    Ok(ap / pos as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let (pos, neg) = class_counts(labels, "auroc needs both classes")?;
    // Twice the Mann-Whitney statistic, kept integral until the end.
    let (mut neg_above, mut twice_u) = (0u64, 0u64);
    for (p, n) in tie_groups(labels, scores)? {
        // positives in this group beat every negative below it
        twice_u += p * n;
        neg_above += n;
        twice_u += 2 * p * (neg - neg_above);
    }
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// F1 of the positive class with `score >= threshold` predicted positive;
/// 0 when there are neither predicted nor actual positives.
pub fn f1(labels: &[bool], scores: &[f64], threshold: f64) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::shape("f1", &[labels.len()], &[scores.len()]));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&y, &s) in labels.iter().zip(scores) {
        match (y, s >= threshold) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    })
}

/// `max` over thresholds of `min(sensitivity, precision)`.
pub fn min_se_pplus(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let (pos, _) = class_counts(labels, "min(Se, P+) needs both classes")?;
    let (mut tp, mut fp, mut best) = (0u64, 0u64, 0.0f64);
    for (p, n) in tie_groups(labels, scores)? {
        tp += p;
        fp += n;
        let se = tp as f64 / pos as f64;
        let pp = tp as f64 / (tp + fp) as f64;
        best = best.max(se.min(pp));
    }
    Ok(best)
}

/// Macro and micro AUROC over `K` label columns.
#[derive(Debug, Clone, PartialEq)]
pub struct RocSummary {
    pub macro_roc: f64,
    pub micro_roc: f64,
    /// Columns left out of the macro mean for lacking a class.
    pub skipped: Vec<usize>,
}

/// `labels` and `scores` are `n` rows of `K` entries.
pub fn macro_micro_roc(labels: &[Vec<bool>], scores: &[Vec<f64>]) -> Result<RocSummary> {
    if labels.len() != scores.len() {
        return Err(Error::shape("macro_micro_roc", &[labels.len()], &[scores.len()]));
    }
    let k = labels.first().map_or(0, Vec::len);
    if labels.iter().any(|r| r.len() != k) || scores.iter().any(|r| r.len() != k) {
        return Err(Error::invalid("ragged label or score rows"));
    }
    let mut per_column = Vec::new();
    let mut skipped = Vec::new();
    for c in 0..k {
        let y: Vec<bool> = labels.iter().map(|r| r[c]).collect();
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        match auroc(&y, &s) {
            Ok(v) => per_column.push(v),
            Err(Error::DegenerateLabels(_)) => skipped.push(c),
            Err(e) => return Err(e),
        }
    }
    if per_column.is_empty() {
        return Err(Error::DegenerateLabels("every label column lacks a class"));
    }
    let flat_y: Vec<bool> = labels.iter().flatten().copied().collect();
    let flat_s: Vec<f64> = scores.iter().flatten().copied().collect();
    Ok(RocSummary {
        macro_roc: per_column.iter().sum::<f64>() / per_column.len() as f64,
        micro_roc: auroc(&flat_y, &flat_s)?,
        skipped,
    })
}

/// Test-set scores; metrics that do not apply to the task are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: TaskKind,
    pub auprc: Option<f64>,
    pub auroc: Option<f64>,
    pub f1: Option<f64>,
    pub min_se_pplus: Option<f64>,
    pub ma_roc: Option<f64>,
    pub mi_roc: Option<f64>,
    pub n: usize,
    pub threshold: f64,
}

impl MetricsReport {
    /// Score used for model selection: AUPRC for binary tasks, macro AUROC
    /// otherwise.
    pub fn selection_metric(&self) -> Option<f64> {
        match self.task {
            TaskKind::Binary => self.auprc,
            _ => self.ma_roc,
        }
    }
}

/// Compute every applicable metric from labels and predicted probabilities.
///
/// Metrics undefined on the given labels (e.g. AUROC with one class) are
/// reported as `None` rather than failing.
pub fn evaluate_scores(task: TaskKind, labels: &[Label], scores: &[Vec<f64>], threshold: f64) -> Result<MetricsReport> {
    if labels.len() != scores.len() {
        return Err(Error::shape("evaluate_scores", &[labels.len()], &[scores.len()]));
    }
    let mut report = MetricsReport {
        task,
        auprc: None,
        auroc: None,
        f1: None,
        min_se_pplus: None,
        ma_roc: None,
        mi_roc: None,
        n: labels.len(),
        threshold,
    };
    let defined = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::DegenerateLabels(_)) => Ok(None),
        Err(e) => Err(e),
    };
    match task {
        TaskKind::Binary => {
            let y: Vec<bool> = labels.iter().map(|l| matches!(l, Label::Binary(true))).collect();
            let s: Vec<f64> = scores.iter().map(|r| r[0]).collect();
            report.auprc = defined(auprc(&y, &s))?;
            report.auroc = defined(auroc(&y, &s))?;
            report.f1 = Some(f1(&y, &s, threshold)?);
            report.min_se_pplus = defined(min_se_pplus(&y, &s))?;
        }
        _ => {
            let y: Vec<Vec<bool>> = labels
                .iter()
                .map(|l| l.to_targets(task).iter().map(|&t| t > 0.5).collect())
                .collect();
            match macro_micro_roc(&y, scores) {
                Ok(r) => {
                    report.ma_roc = Some(r.macro_roc);
                    report.mi_roc = Some(r.micro_roc);
                }
                Err(Error::DegenerateLabels(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(report)
}

//! Scoring-quality metrics and bid computation. Everything here is a pure
//! function of its inputs.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores in `[0, 1]` paired with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Contract(format!("score {s} outside [0, 1]")));
        }
        Ok(Self { scores, labels })
    }

    /// From 0/1 integer labels.
    pub fn from_binary(scores: Vec<f64>, labels: &[usize]) -> Result<Self> {
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Contract(format!("label {l} is not binary")));
        }
        Self::new(scores, labels.iter().map(|&l| l == 1).collect())
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    /// Indices sorted by descending score.
    fn descending(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        idx
    }
}

/// Probability that a random positive outranks a random negative, with ties
/// worth one half (the Mann–Whitney statistic).
pub fn roc_auc(set: &ScoredSet) -> Result<f64> {
    let (pos, neg) = (set.positives(), set.negatives());
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "ROC AUC needs both classes ({pos} positives, {neg} negatives)"
        )));
    }
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && set.scores[idx[j + 1]] == set.scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let tied_pos = idx[i..=j].iter().filter(|&&k| set.labels[k]).count();
        rank_sum += avg_rank * tied_pos as f64;
        i = j + 1;
    }
    let p = pos as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * neg as f64))
}

/// Area under the precision–recall curve as a step function over distinct
/// thresholds: `Σ (R_k − R_{k−1}) · P_k`.
pub fn prc_auc(set: &ScoredSet) -> Result<f64> {
    let pos = set.positives();
    if pos == 0 {
        return Err(Error::UndefinedMetric(
            "PRC AUC needs at least one positive".into(),
        ));
    }
    let idx = set.descending();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let score = set.scores[idx[i]];
        while i < idx.len() && set.scores[idx[i]] == score {
            if set.labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Confusion-matrix metrics when scores `>= threshold` are called positive.
pub fn threshold_metrics(set: &ScoredSet, threshold: f64) -> Result<ThresholdMetrics> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Contract(format!("threshold {threshold} outside [0, 1]")));
    }
    let c = confusion(set, threshold);
    if c.tp + c.fp == 0 {
        return Err(Error::UndefinedMetric(format!(
            "precision undefined: no predictions at threshold {threshold}"
        )));
    }
    if c.tp + c.fn_ == 0 {
        return Err(Error::UndefinedMetric(
            "recall undefined: no positive labels".into(),
        ));
    }
    Ok(ThresholdMetrics {
        accuracy: (c.tp + c.tn) as f64 / set.len() as f64,
        precision: c.tp as f64 / (c.tp + c.fp) as f64,
        recall: c.tp as f64 / (c.tp + c.fn_) as f64,
    })
}

struct Confusion {
    tp: usize,
    fp: usize,
    tn: usize,
    fn_: usize,
}

fn confusion(set: &ScoredSet, threshold: f64) -> Confusion {
    let mut c = Confusion {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&s, &l) in set.scores.iter().zip(&set.labels) {
        match (s >= threshold, l) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// The score threshold maximizing F1; among equal F1 values the largest
/// threshold wins.
pub fn select_threshold(set: &ScoredSet) -> Result<f64> {
    let pos = set.positives();
    if pos == 0 {
        return Err(Error::UndefinedMetric("F1 undefined without positives".into()));
    }
    let idx = set.descending();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = (f64::NEG_INFINITY, 1.0);
    let mut i = 0;
    while i < idx.len() {
        let score = set.scores[idx[i]];
        while i < idx.len() && set.scores[idx[i]] == score {
            if set.labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let f1 = 2.0 * tp as f64 / (2 * tp + fp + (pos - tp)) as f64;
        if f1 > best.0 {
            best = (f1, score);
        }
    }
    Ok(best.1)
}

/// Total predicted probability over total positive labels; 1 means the
/// aggregate prediction is calibrated.
pub fn bias(set: &ScoredSet) -> Result<f64> {
    let pos = set.positives();
    if pos == 0 {
        return Err(Error::UndefinedMetric("bias undefined without positives".into()));
    }
    Ok(set.scores.iter().sum::<f64>() / pos as f64)
}

/// Maximum auction bid for a conversion probability: `alpha · pcvr`.
pub fn compute_bid(pcvr: f64, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::Contract(format!(
            "bid factor must be non-negative, got {alpha}"
        )));
    }
    if !(0.0..=1.0).contains(&pcvr) {
        return Err(Error::Contract(format!("pCVR {pcvr} outside [0, 1]")));
    }
    Ok(alpha * pcvr)
}

/// One CSV row of evaluation results. Metrics that are undefined for the
/// data (for example ROC AUC with a single class) are left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub task: String,
    pub roc_auc: Option<f64>,
    pub prc_auc: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub bias: Option<f64>,
    pub threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Computes every metric for one scored set at `threshold`.
pub fn report_row(model: &str, task: &str, set: &ScoredSet, threshold: f64) -> ReportRow {
    let tm = threshold_metrics(set, threshold).ok();
    ReportRow {
        model: model.to_string(),
        task: task.to_string(),
        roc_auc: roc_auc(set).ok(),
        prc_auc: prc_auc(set).ok(),
        accuracy: tm.map(|m| m.accuracy),
        precision: tm.map(|m| m.precision),
        recall: tm.map(|m| m.recall),
        bias: bias(set).ok(),
        threshold,
        n_pos: set.positives(),
        n_neg: set.negatives(),
    }
}

pub fn task_name(k: usize) -> String {
    format!("Task {k}")
}

/// One-vs-rest scored set for class `k` of `[N×K]` outcome rows.
pub fn one_vs_rest(probs: &[Vec<f64>], labels: &[usize], k: usize) -> Result<ScoredSet> {
    ScoredSet::new(
        probs.iter().map(|row| row[k]).collect(),
        labels.iter().map(|&l| l == k).collect(),
    )
}

/// Per-task rows from K-way outcome distributions. Thresholds default to the
/// F1-maximizing one on the given data when not supplied.
pub fn multitask_report(
    model: &str,
    probs: &[Vec<f64>],
    labels: &[usize],
    thresholds: Option<&[f64]>,
) -> Result<Vec<ReportRow>> {
    if probs.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} probability rows vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let k = probs.first().map_or(0, Vec::len);
    for (i, row) in probs.iter().enumerate() {
        let total: f64 = row.iter().sum();
        if row.len() != k || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "probability row {i} is not a distribution"
            )));
        }
    }
    if let Some(l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!("label {l} outside {k} classes")));
    }
    (0..k)
        .map(|task| {
            let set = one_vs_rest(probs, labels, task)?;
            let threshold = match thresholds {
                Some(t) => *t
                    .get(task)
                    .ok_or_else(|| Error::Contract(format!("no threshold for task {task}")))?,
                None => select_threshold(&set).unwrap_or(0.5),
            };
            Ok(report_row(model, &task_name(task), &set, threshold))
        })
        .collect()
}

pub fn write_report_csv<W: Write>(writer: W, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

pub fn read_report_csv<R: Read>(reader: R) -> Result<Vec<ReportRow>> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(|e| Error::Parse(e.to_string())))
        .collect()
}

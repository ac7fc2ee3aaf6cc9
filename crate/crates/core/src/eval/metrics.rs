use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tpr: f64,
    pub tnr: f64,
    /// Binary F1 of the positive class.
    pub f1: f64,
    /// Mean of per-class F1 weighted by class support.
    pub weighted_f1: f64,
    /// `None` when only one class is present.
    pub auroc: Option<f64>,
    pub confusion: Confusion,
    pub threshold: f64,
    /// Names of metrics whose denominator was zero; they are reported as 0.
    pub undefined: Vec<String>,
}

fn ratio(num: usize, den: usize, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Threshold metrics; a score at or above `threshold` predicts class 1.
/// AUROC is filled in when both classes are present.
pub fn confusion_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<EvalReport> {
    check_inputs(scores, labels)?;
    let mut c = Confusion::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let mut undefined = Vec::new();
    let tpr = ratio(c.tp, c.tp + c.fn_, "tpr", &mut undefined);
    let tnr = ratio(c.tn, c.tn + c.fp, "tnr", &mut undefined);
    let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, "f1", &mut undefined);
    let f1_neg = ratio(
        2 * c.tn,
        2 * c.tn + c.fp + c.fn_,
        "f1_negative",
        &mut undefined,
    );
    let n = c.total() as f64;
    let weighted_f1 = (f1 * (c.tp + c.fn_) as f64 + f1_neg * (c.tn + c.fp) as f64) / n;
    Ok(EvalReport {
        tpr,
        tnr,
        f1,
        weighted_f1,
        auroc: auroc(scores, labels).ok(),
        confusion: c,
        threshold,
        undefined,
    })
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Validation("no scores to evaluate".into()));
    }
    if let Some(y) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Validation(format!("label {y} is not binary")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    Ok(())
}

/// Area under the ROC curve from the Mann-Whitney U statistic; tied
/// scores share their average rank, so a tied cross-class pair counts 1/2.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie group i..=j shares their mean
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Score threshold maximizing TPR + TNR - 1 over the observed scores; the
/// lowest such threshold wins ties.
pub fn youden_threshold(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let mut candidates = scores.to_vec();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best = (f64::NEG_INFINITY, candidates[0]);
    for &t in &candidates {
        let r = confusion_metrics(scores, labels, t)?;
        let j = r.tpr + r.tnr - 1.0;
        if j > best.0 {
            best = (j, t);
        }
    }
    Ok(best.1)
}

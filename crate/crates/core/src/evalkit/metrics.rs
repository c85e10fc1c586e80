use serde::Serialize;

use crate::error::{Result, VlaadError};

/// Parallel scores and binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(VlaadError::DimensionMismatch {
                expected: scores.len(),
                actual: labels.len(),
            });
        }
        if scores.is_empty() {
            return Err(VlaadError::Empty("scored set"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(VlaadError::NonFinite("scores"));
        }
        Ok(Self { scores, labels })
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

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l).count();
        (pos, self.labels.len() - pos)
    }

    fn require_both_classes(&self) -> Result<(usize, usize)> {
        let (p, n) = self.class_counts();
        if p == 0 || n == 0 {
            return Err(VlaadError::invalid("both classes must be present"));
        }
        Ok((p, n))
    }
}

/// 1-based ranks with ties sharing their mean rank.
pub(crate) fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve as the Mann-Whitney statistic; tied
/// positive/negative pairs count one half.
pub fn roc_auc(set: &ScoredSet) -> Result<f64> {
    let (np, nn) = set.require_both_classes()?;
    let ranks = midranks(&set.scores);
    let rank_sum: f64 = ranks.iter().zip(&set.labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (np * (np + 1)) as f64 / 2.0;
    Ok(u / (np as f64 * nn as f64))
}

/// ROC points `(fpr, tpr)` from thresholds swept over the distinct scores,
/// starting at (0, 0).
pub fn roc_curve(set: &ScoredSet) -> Result<Vec<(f64, f64)>> {
    let (np, nn) = set.require_both_classes()?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = set.scores[order[i]];
        while i < order.len() && set.scores[order[i]] == s {
            if set.labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / nn as f64, tp as f64 / np as f64));
    }
    Ok(pts)
}

/// Trapezoidal area under [`roc_curve`]; equal to [`roc_auc`].
pub fn trapezoid_auc(set: &ScoredSet) -> Result<f64> {
    let pts = roc_curve(set)?;
    Ok(pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdMetrics {
    pub f1: f64,
    pub accuracy: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Confusion-matrix metrics for the rule `score >= tau` is positive.
/// Undefined ratios (0/0) evaluate to 0.
pub fn threshold_metrics(set: &ScoredSet, tau: f64) -> ThresholdMetrics {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &l) in set.scores.iter().zip(&set.labels) {
        match (s >= tau, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    ThresholdMetrics {
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        accuracy: ratio(tp + tn, set.len()),
        tpr: ratio(tp, tp + fn_),
        fpr: ratio(fp, fp + tn),
        tp,
        fp,
        tn,
        fn_,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct YoudenResult {
    pub threshold: f64,
    pub j: f64,
    /// No threshold beats chance (`J <= 0`).
    pub degenerate: bool,
}

/// Candidate thresholds: a sentinel below the minimum, midpoints of adjacent
/// distinct scores, and a sentinel above the maximum.
pub fn youden_candidates(set: &ScoredSet) -> Vec<f64> {
    let mut s = set.scores.clone();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut c = Vec::with_capacity(s.len() + 1);
    c.push(s[0] - 1.0);
    c.extend(s.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    c.push(s[s.len() - 1] + 1.0);
    c
}

pub fn youden_j(set: &ScoredSet, tau: f64) -> f64 {
    let m = threshold_metrics(set, tau);
    m.tpr - m.fpr
}

/// Threshold maximizing `TPR - FPR`; ties go to the smallest candidate.
pub fn youden_threshold(set: &ScoredSet) -> Result<YoudenResult> {
    let (np, nn) = set.require_both_classes()?;
    let mut pos: Vec<f64> = Vec::with_capacity(np);
    let mut neg: Vec<f64> = Vec::with_capacity(nn);
    for (&s, &l) in set.scores.iter().zip(&set.labels) {
        if l {
            pos.push(s)
        } else {
            neg.push(s)
        }
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let at_least = |sorted: &[f64], tau: f64| sorted.len() - sorted.partition_point(|&s| s < tau);

    let mut best = YoudenResult {
        threshold: f64::NAN,
        j: f64::NEG_INFINITY,
        degenerate: false,
    };
    for tau in youden_candidates(set) {
        let j = at_least(&pos, tau) as f64 / np as f64 - at_least(&neg, tau) as f64 / nn as f64;
        if j > best.j {
            best.j = j;
            best.threshold = tau;
        }
    }
    best.degenerate = best.j <= 0.0;
    Ok(best)
}

//! Classification and regression metrics.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn at(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
        let mut c = Self::default();
        for (&s, &y) in scores.iter().zip(labels) {
            match (s >= threshold, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    /// Mean of sensitivity and specificity; a class with no members counts as 1.
    pub fn balanced_accuracy(&self) -> f64 {
        let rate = |hit: usize, miss: usize| if hit + miss == 0 { 1.0 } else { hit as f64 / (hit + miss) as f64 };
        0.5 * (rate(self.tp, self.fn_) + rate(self.tn, self.fp))
    }
}

/// Average precision: Σ (R_k − R_{k−1}) P_k over distinct score thresholds,
/// with tied scores entering together. NaN when there are no positives.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> f64 {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 {
        return f64::NAN;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += usize::from(labels[order[i]]);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
    }
    ap
}

pub fn f1(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    Confusion::at(scores, labels, threshold).f1()
}

pub fn balanced_accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    Confusion::at(scores, labels, threshold).balanced_accuracy()
}

/// Coefficient of determination; NaN when the targets are constant.
pub fn r2(pred: &[f64], actual: &[f64]) -> f64 {
    assert_eq!(pred.len(), actual.len(), "prediction and target differ in length");
    if actual.is_empty() {
        return f64::NAN;
    }
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let ss_tot: f64 = actual.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return f64::NAN;
    }
    let ss_res: f64 = pred.iter().zip(actual).map(|(p, y)| (y - p).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

pub const THRESHOLD_GRID: [f64; 19] =
    [0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Threshold on [`THRESHOLD_GRID`] maximizing F1; ties go to the one nearest 0.5.
pub fn best_f1_threshold(scores: &[f64], labels: &[bool]) -> (f64, f64) {
    let mut best: (f64, f64) = (0.5, f1(scores, labels, 0.5));
    for &t in &THRESHOLD_GRID {
        let f = f1(scores, labels, t);
        if f > best.1 + 1e-12 || ((f - best.1).abs() <= 1e-12 && (t - 0.5).abs() < (best.0 - 0.5).abs()) {
            best = (t, f);
        }
    }
    best
}

/// Test-split metrics for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub edge_pr_auc: f64,
    pub node_pr_auc: f64,
    pub edge_f1: f64,
    pub node_f1: f64,
    pub severity_f1: f64,
    pub severity_balanced_accuracy: f64,
    pub dns_r2: f64,
    pub thresholds: [f64; 3],
    pub n_samples: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_hand_examples() {
        assert_eq!(pr_auc(&[0.9, 0.8, 0.1], &[true, true, false]), 1.0);
        // ranks: +, -, + → 0.5·1 + 0.5·(2/3)
        let ap = pr_auc(&[0.9, 0.5, 0.1], &[true, false, true]);
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
        // all tied: precision = prevalence
        assert!((pr_auc(&[0.3; 4], &[true, false, false, false]) - 0.25).abs() < 1e-15);
        assert!(pr_auc(&[0.1, 0.2], &[false, false]).is_nan());
    }

    #[test]
    fn r2_and_confusion() {
        assert_eq!(r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 1.0);
        assert_eq!(r2(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]), 0.0);
        assert!(r2(&[1.0, 2.0], &[5.0, 5.0]).is_nan());
        let c = Confusion::at(&[0.9, 0.6, 0.4, 0.1], &[true, false, true, false], 0.5);
        assert_eq!(c, Confusion { tp: 1, fp: 1, tn: 1, fn_: 1 });
        assert_eq!(c.f1(), 0.5);
        assert_eq!(c.balanced_accuracy(), 0.5);
    }

    #[test]
    fn threshold_ties_prefer_half() {
        let (t, f) = best_f1_threshold(&[0.99, 0.01], &[true, false]);
        assert_eq!((t, f), (0.5, 1.0));
    }
}

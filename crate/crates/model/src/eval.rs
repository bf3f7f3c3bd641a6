use gridcascade::dataset::GraphSample;
use gridcascade::metrics::{balanced_accuracy, f1, pr_auc, r2, EvalReport};
use gridcascade_autodiff::Tape;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::GraphBatch;
use crate::error::{ModelError, Result};
use crate::model::Model;
use crate::train::Thresholds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    OneShot,
    MultiRound,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "one-shot" => Ok(Mode::OneShot),
            "multi-round" => Ok(Mode::MultiRound),
            _ => Err(format!("unknown mode `{s}`")),
        }
    }
}

/// Probabilities for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub edge: Vec<f64>,
    pub node: Vec<f64>,
    pub p_unsafe: f64,
    pub dns: f64,
    /// `(edge, node)` probabilities per executed round.
    pub rounds: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Prediction {
    /// Branch-level score: the larger of the two orientations.
    pub fn branch_scores(edge: &[f64]) -> Vec<f64> {
        edge.chunks(2).map(|p| p[0].max(p[1])).collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inference without dropout. Multi-round mode is fully autoregressive and
/// runs one sample per rollout so early stopping is per sample.
pub fn predict(model: &Model, samples: &[GraphSample], mode: Mode, batch_size: usize) -> Result<Vec<Prediction>> {
    let chunk = if mode == Mode::MultiRound { 1 } else { batch_size.max(1) };
    let groups: Vec<&[GraphSample]> = samples.chunks(chunk).collect();
    let out: Vec<Vec<Prediction>> = groups.par_iter().map(|g| predict_batch(model, g, mode)).collect::<Result<_>>()?;
    Ok(out.into_iter().flatten().collect())
}

fn predict_batch(model: &Model, samples: &[GraphSample], mode: Mode) -> Result<Vec<Prediction>> {
    let refs: Vec<&GraphSample> = samples.iter().collect();
    let b = GraphBatch::new(&refs);
    let mut t = Tape::new();
    let out = match mode {
        Mode::OneShot => model.forward_one_shot(&mut t, &b, None)?,
        Mode::MultiRound => model.forward_multi_round(&mut t, &b, None, None)?,
    };
    let col = |v| t.value(v).column(0).mapv(sigmoid).to_vec();
    let (edge, node) = (col(out.edge_logits), col(out.node_logits));
    let sev = t.value(out.sev_logits);
    let dns = t.value(out.dns);
    let rounds: Vec<(Vec<f64>, Vec<f64>)> = out.per_round.iter().map(|&(e, n)| (col(e), col(n))).collect();
    Ok((0..samples.len())
        .map(|g| {
            let (eo, no) = (b.edge_offset[g], b.node_offset[g]);
            let (ne, nn) = (samples[g].n_edges(), samples[g].n_nodes());
            let logit_gap = sev[[g, 1]] - sev[[g, 0]];
            Prediction {
                edge: edge[eo..eo + ne].to_vec(),
                node: node[no..no + nn].to_vec(),
                p_unsafe: sigmoid(logit_gap),
                dns: dns[[g, 0]],
                rounds: rounds.iter().map(|(e, n)| (e[eo..eo + ne].to_vec(), n[no..no + nn].to_vec())).collect(),
            }
        })
        .collect())
}

/// Scores and labels pooled over a split; multi-round pools every (round, component) pair.
pub struct Pooled {
    pub edge_scores: Vec<f64>,
    pub edge_labels: Vec<bool>,
    pub node_scores: Vec<f64>,
    pub node_labels: Vec<bool>,
}

pub fn pool(samples: &[GraphSample], preds: &[Prediction], mode: Mode, rounds: usize) -> Pooled {
    let mut p = Pooled { edge_scores: vec![], edge_labels: vec![], node_scores: vec![], node_labels: vec![] };
    for (s, pr) in samples.iter().zip(preds) {
        match mode {
            Mode::OneShot => {
                p.edge_scores.extend(Prediction::branch_scores(&pr.edge));
                p.edge_labels.extend(s.y_edge.iter().step_by(2).map(|&y| y == 1));
                p.node_scores.extend(&pr.node);
                p.node_labels.extend(s.y_node.iter().map(|&y| y == 1));
            }
            Mode::MultiRound => {
                let labels = s.rounds_padded(rounds.max(s.rounds.len()));
                for (r, lab) in labels.iter().enumerate() {
                    match pr.rounds.get(r) {
                        Some((e, n)) => {
                            p.edge_scores.extend(Prediction::branch_scores(e));
                            p.node_scores.extend(n);
                        }
                        None => {
                            p.edge_scores.extend(std::iter::repeat_n(0.0, s.n_edges() / 2));
                            p.node_scores.extend(std::iter::repeat_n(0.0, s.n_nodes()));
                        }
                    }
                    p.edge_labels.extend(lab.y_edge.iter().step_by(2).map(|&y| y == 1));
                    p.node_labels.extend(lab.y_node.iter().map(|&y| y == 1));
                }
            }
        }
    }
    p
}

pub fn report(samples: &[GraphSample], preds: &[Prediction], thresholds: &Thresholds, mode: Mode, rounds: usize) -> EvalReport {
    let p = pool(samples, preds, mode, rounds);
    let sev_scores: Vec<f64> = preds.iter().map(|x| x.p_unsafe).collect();
    let sev_labels: Vec<bool> = samples.iter().map(|s| s.y_sev == 1).collect();
    let dns_pred: Vec<f64> = preds.iter().map(|x| x.dns).collect();
    let dns_true: Vec<f64> = samples.iter().map(|s| s.y_dns).collect();
    EvalReport {
        edge_pr_auc: pr_auc(&p.edge_scores, &p.edge_labels),
        node_pr_auc: pr_auc(&p.node_scores, &p.node_labels),
        edge_f1: f1(&p.edge_scores, &p.edge_labels, thresholds.edge),
        node_f1: f1(&p.node_scores, &p.node_labels, thresholds.node),
        severity_f1: f1(&sev_scores, &sev_labels, 0.5),
        severity_balanced_accuracy: balanced_accuracy(&sev_scores, &sev_labels, 0.5),
        dns_r2: r2(&dns_pred, &dns_true),
        thresholds: [thresholds.edge, thresholds.node, 0.5],
        n_samples: samples.len(),
    }
}

/// Metrics of one rollout round, pooled over samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub edge_positives: usize,
    pub node_positives: usize,
    /// NaN when the round has no positives.
    pub edge_pr_auc: f64,
    pub node_pr_auc: f64,
    pub edge_f1: f64,
    pub node_f1: f64,
    /// Samples whose rollout was still running in this round.
    pub active_samples: usize,
}

/// Round-wise breakdown over `max(rounds, depth)` rounds; unexecuted rounds score 0.
pub fn per_round_report(samples: &[GraphSample], preds: &[Prediction], thresholds: &Thresholds, rounds: usize) -> Vec<RoundReport> {
    let depth = samples.iter().map(|s| s.rounds.len()).max().unwrap_or(0).max(rounds);
    (0..depth)
        .map(|r| {
            let mut p = Pooled { edge_scores: vec![], edge_labels: vec![], node_scores: vec![], node_labels: vec![] };
            let mut active = 0;
            for (s, pr) in samples.iter().zip(preds) {
                let lab = &s.rounds_padded(depth)[r];
                match pr.rounds.get(r) {
                    Some((e, n)) => {
                        active += 1;
                        p.edge_scores.extend(Prediction::branch_scores(e));
                        p.node_scores.extend(n);
                    }
                    None => {
                        p.edge_scores.extend(std::iter::repeat_n(0.0, s.n_edges() / 2));
                        p.node_scores.extend(std::iter::repeat_n(0.0, s.n_nodes()));
                    }
                }
                p.edge_labels.extend(lab.y_edge.iter().step_by(2).map(|&y| y == 1));
                p.node_labels.extend(lab.y_node.iter().map(|&y| y == 1));
            }
            RoundReport {
                round: r,
                edge_positives: p.edge_labels.iter().filter(|&&y| y).count(),
                node_positives: p.node_labels.iter().filter(|&&y| y).count(),
                edge_pr_auc: pr_auc(&p.edge_scores, &p.edge_labels),
                node_pr_auc: pr_auc(&p.node_scores, &p.node_labels),
                edge_f1: f1(&p.edge_scores, &p.edge_labels, thresholds.edge),
                node_f1: f1(&p.node_scores, &p.node_labels, thresholds.node),
                active_samples: active,
            }
        })
        .collect()
}

/// Predicts on `samples` (already normalized) and scores against their labels.
pub fn evaluate(model: &Model, thresholds: &Thresholds, samples: &[GraphSample], mode: Mode) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(ModelError::EmptySplit("test"));
    }
    let preds = predict(model, samples, mode, 64)?;
    let rounds = model.cfg.multi_round.map(|m| m.rounds).unwrap_or(1);
    Ok(report(samples, &preds, thresholds, mode, rounds))
}

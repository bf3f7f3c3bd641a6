use gridcascade::dataset::GraphSample;
use gridcascade_autodiff::{Mat, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::model::ModelOutput;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_node: f64,
    pub lambda_edge: f64,
    pub lambda_sev: f64,
    pub lambda_dns: f64,
    pub lambda_phys_target: f64,
    pub warmup_epochs: usize,
    pub edge_pos_weight_cap: f64,
    pub node_pos_weight_cap: f64,
    pub sqrt_inverse_severity: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_node: 1.0,
            lambda_edge: 1.0,
            lambda_sev: 0.3,
            lambda_dns: 1.0,
            lambda_phys_target: 0.15,
            warmup_epochs: 30,
            edge_pos_weight_cap: 100.0,
            node_pos_weight_cap: 30.0,
            sqrt_inverse_severity: true,
        }
    }
}

impl LossConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("lambda_node", self.lambda_node),
            ("lambda_edge", self.lambda_edge),
            ("lambda_sev", self.lambda_sev),
            ("lambda_dns", self.lambda_dns),
            ("lambda_phys_target", self.lambda_phys_target),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(format!("{name} {v} must be non-negative"));
            }
        }
        if !(self.edge_pos_weight_cap > 0.0 && self.node_pos_weight_cap > 0.0) {
            out.push("positive-weight caps must be positive".into());
        }
        out
    }
}

/// Physics weight after linear warm-up: `target · t / T_w` before `T_w`, `target` after.
pub fn lambda_physics(cfg: &LossConfig, epoch: usize) -> f64 {
    if epoch < cfg.warmup_epochs {
        cfg.lambda_phys_target * epoch as f64 / cfg.warmup_epochs as f64
    } else {
        cfg.lambda_phys_target
    }
}

/// Teacher-forcing probability `max(floor, 1 − t / T_ss)`.
pub fn tf_ratio(epoch: usize, t_ss: usize, floor: f64) -> f64 {
    let raw = if t_ss == 0 { 0.0 } else { (1.0 - epoch as f64 / t_ss as f64).max(0.0) };
    raw.max(floor)
}

/// Negative-to-positive ratio capped at `cap`; 1 when there are no positives.
pub fn pos_weight(positives: usize, negatives: usize, cap: f64) -> f64 {
    if positives == 0 {
        1.0
    } else {
        (negatives as f64 / positives as f64).min(cap)
    }
}

/// Square-root inverse class frequency, scaled so balanced classes weigh 1.
pub fn severity_weights(train: &[GraphSample]) -> [f64; 2] {
    let n = train.len() as f64;
    let unsafe_ = train.iter().filter(|s| s.y_sev == 1).count() as f64;
    let w = |count: f64| if count == 0.0 { 1.0 } else { (n / (2.0 * count)).sqrt() };
    [w(n - unsafe_), w(unsafe_)]
}

/// Batch targets laid out to match a [`crate::GraphBatch`] of the same samples.
#[derive(Debug, Clone)]
pub struct BatchLabels {
    pub y_node: Mat,
    pub y_edge: Mat,
    pub y_sev: Vec<usize>,
    pub y_dns: Mat,
    /// `(node, edge)` targets per round, padded to the requested count.
    pub rounds: Vec<(Mat, Mat)>,
}

fn column(values: impl Iterator<Item = f64>) -> Mat {
    let v: Vec<f64> = values.collect();
    Mat::from_shape_vec((v.len(), 1), v).expect("column")
}

impl BatchLabels {
    pub fn new(samples: &[&GraphSample], rounds: usize) -> Self {
        let y_node = column(samples.iter().flat_map(|s| s.y_node.iter().map(|&y| f64::from(y))));
        let y_edge = column(samples.iter().flat_map(|s| s.y_edge.iter().map(|&y| f64::from(y))));
        let padded: Vec<_> = samples.iter().map(|s| s.rounds_padded(rounds)).collect();
        let rounds = (0..rounds)
            .map(|r| {
                let node = column(padded.iter().flat_map(|p| p[r].y_node.iter().map(|&y| f64::from(y))));
                let edge = column(padded.iter().flat_map(|p| p[r].y_edge.iter().map(|&y| f64::from(y))));
                (node, edge)
            })
            .collect();
        BatchLabels {
            y_node,
            y_edge,
            y_sev: samples.iter().map(|s| usize::from(s.y_sev)).collect(),
            y_dns: column(samples.iter().map(|s| s.y_dns)),
            rounds,
        }
    }

    fn weights(&self, cfg: &LossConfig) -> (f64, f64) {
        let count = |m: &Mat| m.iter().filter(|&&y| y > 0.5).count();
        let (pn, pe) = (count(&self.y_node), count(&self.y_edge));
        (pos_weight(pn, self.y_node.len() - pn, cfg.node_pos_weight_cap), pos_weight(pe, self.y_edge.len() - pe, cfg.edge_pos_weight_cap))
    }
}

/// Unweighted component values of one loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub node: f64,
    pub edge: f64,
    pub severity: f64,
    pub dns: f64,
    pub physics: f64,
    pub total: f64,
}

impl LossParts {
    pub fn check(&self, epoch: usize) -> Result<()> {
        for (component, v) in [
            ("node", self.node),
            ("edge", self.edge),
            ("severity", self.severity),
            ("dns", self.dns),
            ("physics", self.physics),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(ModelError::NonFiniteLoss { component, epoch });
            }
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, other: &LossParts, k: f64) {
        self.node += k * other.node;
        self.edge += k * other.edge;
        self.severity += k * other.severity;
        self.dns += k * other.dns;
        self.physics += k * other.physics;
        self.total += k * other.total;
    }
}

fn weighted_sum(t: &mut Tape, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        if w == 0.0 {
            continue;
        }
        let s = t.scale(v, w)?;
        acc = Some(match acc {
            None => s,
            Some(a) => t.add(a, s)?,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => Ok(t.constant(Mat::zeros((1, 1)))?),
    }
}

fn graph_terms(t: &mut Tape, out: &ModelOutput, y: &BatchLabels, sev_w: [f64; 2]) -> Result<(Var, Var)> {
    let sev = t.cross_entropy(out.sev_logits, &y.y_sev, &sev_w)?;
    let dns = t.mse(out.dns, &y.y_dns)?;
    Ok((sev, dns))
}

/// Weighted sum of node, edge, severity, DNS and warm-up-scaled physics terms.
pub fn composite_loss(
    t: &mut Tape,
    out: &ModelOutput,
    y: &BatchLabels,
    cfg: &LossConfig,
    epoch: usize,
    sev_w: [f64; 2],
) -> Result<(Var, LossParts)> {
    let (pw_node, pw_edge) = y.weights(cfg);
    let node = t.bce_with_logits(out.node_logits, &y.y_node, pw_node)?;
    let edge = t.bce_with_logits(out.edge_logits, &y.y_edge, pw_edge)?;
    let (sev, dns) = graph_terms(t, out, y, sev_w)?;
    let lp = lambda_physics(cfg, epoch);
    let mut terms = vec![(cfg.lambda_node, node), (cfg.lambda_edge, edge), (cfg.lambda_sev, sev), (cfg.lambda_dns, dns)];
    if let Some(p) = out.physics {
        terms.push((lp, p));
    }
    let total = weighted_sum(t, &terms)?;
    let parts = LossParts {
        node: t.scalar(node),
        edge: t.scalar(edge),
        severity: t.scalar(sev),
        dns: t.scalar(dns),
        physics: out.physics.map(|p| t.scalar(p)).unwrap_or(0.0),
        total: t.scalar(total),
    };
    Ok((total, parts))
}

/// `Σ_r β^r · round_r`.
pub fn discounted_rounds(t: &mut Tape, round_losses: &[Var], beta: f64) -> Result<Var> {
    let terms: Vec<(f64, Var)> = round_losses.iter().enumerate().map(|(r, &v)| (beta.powi(r as i32), v)).collect();
    weighted_sum(t, &terms)
}

/// Discounted per-round node/edge terms plus final-round severity, DNS and physics.
/// Positive weights come from the cumulative labels of the batch.
pub fn multi_round_loss(
    t: &mut Tape,
    out: &ModelOutput,
    y: &BatchLabels,
    cfg: &LossConfig,
    beta: f64,
    epoch: usize,
    sev_w: [f64; 2],
) -> Result<(Var, LossParts)> {
    if out.per_round.len() != y.rounds.len() {
        return Err(ModelError::RoundMismatch(out.per_round.len(), y.rounds.len()));
    }
    let (pw_node, pw_edge) = y.weights(cfg);
    let mut round_losses = Vec::with_capacity(out.per_round.len());
    let (mut node_sum, mut edge_sum) = (0.0, 0.0);
    for (r, (&(el, nl), (yn, ye))) in out.per_round.iter().zip(&y.rounds).enumerate() {
        let node = t.bce_with_logits(nl, yn, pw_node)?;
        let edge = t.bce_with_logits(el, ye, pw_edge)?;
        let k = beta.powi(r as i32);
        node_sum += k * t.scalar(node);
        edge_sum += k * t.scalar(edge);
        round_losses.push(weighted_sum(t, &[(cfg.lambda_node, node), (cfg.lambda_edge, edge)])?);
    }
    let rounds = discounted_rounds(t, &round_losses, beta)?;
    let (sev, dns) = graph_terms(t, out, y, sev_w)?;
    let mut terms = vec![(1.0, rounds), (cfg.lambda_sev, sev), (cfg.lambda_dns, dns)];
    if let Some(p) = out.physics {
        terms.push((lambda_physics(cfg, epoch), p));
    }
    let total = weighted_sum(t, &terms)?;
    let parts = LossParts {
        node: node_sum,
        edge: edge_sum,
        severity: t.scalar(sev),
        dns: t.scalar(dns),
        physics: out.physics.map(|p| t.scalar(p)).unwrap_or(0.0),
        total: t.scalar(total),
    };
    Ok((total, parts))
}

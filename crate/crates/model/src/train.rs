use std::io::Write;
use std::path::Path;

use gridcascade::dataset::GraphSample;
use gridcascade::metrics::{best_f1_threshold, pr_auc, r2};
use gridcascade::rng::stream;
use gridcascade_autodiff::{clip_global_norm, AdamW, Tape};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::GraphBatch;
use crate::error::{ModelError, Result};
use crate::eval::{pool, predict, Mode};
use crate::loss::{composite_loss, lambda_physics, multi_round_loss, severity_weights, tf_ratio, BatchLabels, LossConfig, LossParts};
use crate::model::{Model, TeacherSignal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub warmup_frac: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub t_ss: usize,
    pub tf_floor: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-5,
            batch_size: 16,
            max_epochs: 100,
            patience: 15,
            clip_norm: 1.0,
            warmup_frac: 0.1,
            div_factor: 25.0,
            final_div_factor: 1e4,
            t_ss: 60,
            tf_floor: 0.0,
            mode: Mode::OneShot,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr > 0.0) {
            out.push(format!("lr {} must be positive", self.lr));
        }
        if self.weight_decay < 0.0 {
            out.push(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            out.push("batch_size and max_epochs must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            out.push(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            out.push(format!("warmup_frac {} must be in (0, 1)", self.warmup_frac));
        }
        if !(0.0..=1.0).contains(&self.tf_floor) {
            out.push(format!("tf_floor {} must be in [0, 1]", self.tf_floor));
        }
        out
    }
}

/// Linear warm-up to `peak` then cosine decay to `peak / final_div`.
#[derive(Debug, Clone, Copy)]
pub struct OneCycle {
    pub peak: f64,
    pub initial: f64,
    pub floor: f64,
    pub total: usize,
    pub warm: usize,
}

impl OneCycle {
    pub fn new(cfg: &TrainConfig, total_steps: usize) -> Self {
        let total = total_steps.max(2);
        OneCycle {
            peak: cfg.lr,
            initial: cfg.lr / cfg.div_factor,
            floor: cfg.lr / cfg.final_div_factor,
            total,
            warm: ((cfg.warmup_frac * total as f64).round() as usize).clamp(1, total - 1),
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warm {
            return self.initial + (self.peak - self.initial) * step as f64 / self.warm as f64;
        }
        let span = (self.total - 1 - self.warm).max(1) as f64;
        let frac = ((step - self.warm) as f64 / span).min(1.0);
        self.floor + (self.peak - self.floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Decision thresholds for the binary per-component targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub edge: f64,
    pub node: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { edge: 0.5, node: 0.5 }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossParts,
    pub val: LossParts,
    pub val_edge_pr_auc: f64,
    pub val_node_pr_auc: f64,
    pub val_dns_r2: f64,
    pub lr: f64,
    pub tf_ratio: f64,
    pub lambda_physics: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub thresholds: Thresholds,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

fn rounds_of(model: &Model, mode: Mode) -> usize {
    match mode {
        Mode::OneShot => 1,
        Mode::MultiRound => model.cfg.multi_round.map(|m| m.rounds).unwrap_or(1),
    }
}

/// Forward and loss for one batch. `draw` decides teacher forcing per (sample, round).
pub(crate) fn batch_loss(
    model: &Model,
    t: &mut Tape,
    samples: &[&GraphSample],
    loss_cfg: &LossConfig,
    mode: Mode,
    epoch: usize,
    sev_w: [f64; 2],
    rng: Option<&mut rand_chacha::ChaCha8Rng>,
    draw: &dyn Fn(usize, usize) -> bool,
) -> Result<(gridcascade_autodiff::Var, LossParts)> {
    let b = GraphBatch::new(samples);
    match mode {
        Mode::OneShot => {
            let y = BatchLabels::new(samples, 1);
            let out = model.forward_one_shot(t, &b, rng)?;
            composite_loss(t, &out, &y, loss_cfg, epoch, sev_w)
        }
        Mode::MultiRound => {
            let mr = model.cfg.multi_round.ok_or(ModelError::NotMultiRound)?;
            let y = BatchLabels::new(samples, mr.rounds);
            let teacher = TeacherSignal {
                node: y.rounds.iter().map(|(n, _)| n.iter().map(|&v| v > 0.5).collect()).collect(),
                edge: y.rounds.iter().map(|(_, e)| e.iter().map(|&v| v > 0.5).collect()).collect(),
                use_truth: (0..mr.rounds).map(|r| (0..samples.len()).map(|g| draw(g, r)).collect()).collect(),
            };
            let out = model.forward_multi_round(t, &b, Some(&teacher), rng)?;
            multi_round_loss(t, &out, &y, loss_cfg, mr.beta, epoch, sev_w)
        }
    }
}

/// Mean loss over `samples` in evaluation mode, fully autoregressive for multi-round.
pub fn validation_loss(
    model: &Model,
    samples: &[GraphSample],
    loss_cfg: &LossConfig,
    mode: Mode,
    epoch: usize,
    sev_w: [f64; 2],
    batch_size: usize,
) -> Result<LossParts> {
    let mut acc = LossParts::default();
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&GraphSample> = chunk.iter().collect();
        let mut t = Tape::new();
        let (_, parts) = batch_loss(model, &mut t, &refs, loss_cfg, mode, epoch, sev_w, None, &|_, _| false)?;
        acc.add_scaled(&parts, chunk.len() as f64 / samples.len() as f64);
    }
    Ok(acc)
}

/// Grid-searches F1-maximizing thresholds on the validation split.
pub fn calibrate_thresholds(model: &Model, val: &[GraphSample], mode: Mode) -> Result<Thresholds> {
    let preds = predict(model, val, mode, 64)?;
    let p = pool(val, &preds, mode, rounds_of(model, mode));
    let pick = |scores: &[f64], labels: &[bool], what: &str| {
        if !labels.iter().any(|&y| y) {
            log::warn!("validation split has no positive {what} labels; using threshold 0.5");
            return 0.5;
        }
        best_f1_threshold(scores, labels).0
    };
    Ok(Thresholds { edge: pick(&p.edge_scores, &p.edge_labels, "edge"), node: pick(&p.node_scores, &p.node_labels, "node") })
}

/// Trains on normalized samples, keeping the parameters with the lowest validation loss.
pub fn train(
    mut model: Model,
    train: &[GraphSample],
    val: &[GraphSample],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut problems = cfg.problems();
    problems.extend(loss_cfg.problems());
    if cfg.mode == Mode::MultiRound && model.cfg.multi_round.is_none() {
        problems.push("multi-round mode needs a multi_round model config".into());
    }
    if !problems.is_empty() {
        return Err(ModelError::Config(problems));
    }
    if train.is_empty() {
        return Err(ModelError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(ModelError::EmptySplit("validation"));
    }
    let sev_w = if loss_cfg.sqrt_inverse_severity { severity_weights(train) } else { [1.0, 1.0] };
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = OneCycle::new(cfg, cfg.max_epochs * batches_per_epoch);
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut best = (f64::INFINITY, model.store.clone(), 0usize);
    let mut step = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut stream(cfg.seed, "shuffle", &[epoch as u64]));
        let tau = tf_ratio(epoch, cfg.t_ss, cfg.tf_floor);
        let mut train_parts = LossParts::default();
        let mut lr = schedule.lr(step);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&GraphSample> = idx.iter().map(|&i| &train[i]).collect();
            let mut dropout_rng = stream(cfg.seed, "dropout", &[epoch as u64, bi as u64]);
            let draw = |g: usize, r: usize| stream(cfg.seed, "scheduled-sampling", &[epoch as u64, idx[g] as u64, r as u64]).gen_bool(tau);
            let mut t = Tape::new();
            let (loss, parts) = batch_loss(&model, &mut t, &samples, loss_cfg, cfg.mode, epoch, sev_w, Some(&mut dropout_rng), &draw)?;
            parts.check(epoch)?;
            let mut grads = t.backward(loss)?.param_grads(&model.store);
            clip_global_norm(&mut grads, cfg.clip_norm);
            lr = schedule.lr(step);
            opt.step(&mut model.store, &grads, lr);
            step += 1;
            train_parts.add_scaled(&parts, samples.len() as f64 / train.len() as f64);
        }
        let val_parts = validation_loss(&model, val, loss_cfg, cfg.mode, epoch, sev_w, 64)?;
        val_parts.check(epoch)?;
        let preds = predict(&model, val, cfg.mode, 64)?;
        let p = pool(val, &preds, cfg.mode, rounds_of(&model, cfg.mode));
        let dns_pred: Vec<f64> = preds.iter().map(|x| x.dns).collect();
        let dns_true: Vec<f64> = val.iter().map(|s| s.y_dns).collect();
        let row = EpochLog {
            epoch,
            train: train_parts,
            val: val_parts,
            val_edge_pr_auc: pr_auc(&p.edge_scores, &p.edge_labels),
            val_node_pr_auc: pr_auc(&p.node_scores, &p.node_labels),
            val_dns_r2: r2(&dns_pred, &dns_true),
            lr,
            tf_ratio: tau,
            lambda_physics: lambda_physics(loss_cfg, epoch),
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {:.4} edge AP {:.3} node AP {:.3} dns R2 {:.3}",
            row.train.total,
            row.val.total,
            row.val_edge_pr_auc,
            row.val_node_pr_auc,
            row.val_dns_r2
        );
        log.push(row);
        if val_parts.total < best.0 {
            best = (val_parts.total, model.store.clone(), epoch);
        } else if epoch - best.2 >= cfg.patience {
            log::info!("early stop at epoch {epoch}, best epoch {}", best.2);
            break;
        }
    }
    model.store = best.1;
    let thresholds = calibrate_thresholds(&model, val, cfg.mode)?;
    Ok(TrainOutcome { model, thresholds, log, best_epoch: best.2 })
}

pub const LOG_HEADER: &str = "epoch,train_total,train_node,train_edge,train_severity,train_dns,train_physics,val_total,val_node,val_edge,val_severity,val_dns,val_physics,val_edge_pr_auc,val_node_pr_auc,val_dns_r2,lr,tf_ratio,lambda_physics";

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{LOG_HEADER}")?;
    for r in log {
        let (a, b) = (&r.train, &r.val);
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            a.total,
            a.node,
            a.edge,
            a.severity,
            a.dns,
            a.physics,
            b.total,
            b.node,
            b.edge,
            b.severity,
            b.dns,
            b.physics,
            r.val_edge_pr_auc,
            r.val_node_pr_auc,
            r.val_dns_r2,
            r.lr,
            r.tf_ratio,
            r.lambda_physics
        )?;
    }
    f.flush()
}

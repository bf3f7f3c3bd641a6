mod common;

use common::{small, tiny, tiny_multi};
use gridcascade::dataset::GraphSample;
use gridcascade_autodiff::{Mat, Tape};
use gridcascade_model::loss::{
    composite_loss, discounted_rounds, lambda_physics, multi_round_loss, pos_weight, severity_weights, tf_ratio, BatchLabels,
};
use gridcascade_model::model::Trace;
use gridcascade_model::train::OneCycle;
use gridcascade_model::{GraphBatch, LossConfig, LossParts, Model, ModelError, ModelOutput, TrainConfig, Variant};
use proptest::prelude::*;

#[test]
fn physics_weight_warms_up_linearly() {
    let cfg = LossConfig::default();
    let tw = cfg.warmup_epochs;
    for (epoch, want) in [(0, 0.0), (tw / 2, 0.075), (tw, 0.15), (2 * tw, 0.15)] {
        assert!((lambda_physics(&cfg, epoch) - want).abs() < 1e-12, "epoch {epoch}");
    }
}

#[test]
fn teacher_forcing_ratio_decays_linearly() {
    let t_ss = 60;
    for (epoch, want) in [(0, 1.0), (t_ss / 2, 0.5), (t_ss, 0.0), (2 * t_ss, 0.0), (42, 0.3)] {
        assert!((tf_ratio(epoch, t_ss, 0.0) - want).abs() < 1e-12, "epoch {epoch}");
    }
    assert_eq!(tf_ratio(100, t_ss, 0.2), 0.2);
}

proptest! {
    #[test]
    fn schedules_are_monotone(a in 0usize..200, b in 0usize..200, t_ss in 1usize..100) {
        let (lo, hi) = (a.min(b), a.max(b));
        let cfg = LossConfig::default();
        prop_assert!(lambda_physics(&cfg, lo) <= lambda_physics(&cfg, hi));
        prop_assert!(tf_ratio(lo, t_ss, 0.0) >= tf_ratio(hi, t_ss, 0.0));
        prop_assert!((0.0..=1.0).contains(&tf_ratio(lo, t_ss, 0.0)));
    }
}

#[test]
fn positive_weights_are_capped_ratios() {
    assert_eq!(pos_weight(2, 98, 100.0), 49.0);
    assert_eq!(pos_weight(1, 999, 100.0), 100.0);
    assert_eq!(pos_weight(0, 50, 30.0), 1.0);
}

#[test]
fn severity_weights_use_square_root_inverse_frequency() {
    let mut samples: Vec<GraphSample> = (0..10).map(|k| small(4, k)).collect();
    for (k, s) in samples.iter_mut().enumerate() {
        s.y_sev = u8::from(k < 3);
    }
    let w = severity_weights(&samples);
    assert!((w[0] - (10.0f64 / 14.0).sqrt()).abs() < 1e-12);
    assert!((w[1] - (10.0f64 / 6.0).sqrt()).abs() < 1e-12);
}

#[test]
fn round_discount_is_geometric() {
    let mut t = Tape::new();
    let ones: Vec<_> = (0..3).map(|_| t.constant(Mat::from_elem((1, 1), 1.0)).unwrap()).collect();
    let total = discounted_rounds(&mut t, &ones, 0.95).unwrap();
    assert!((t.scalar(total) - 2.8525).abs() < 1e-12);
    let x = t.constant(Mat::from_elem((1, 1), 0.7)).unwrap();
    let two = discounted_rounds(&mut t, &[x, x], 0.95).unwrap();
    assert!((t.scalar(two) - 1.95 * 0.7).abs() < 1e-12);
}

fn perfect_output(t: &mut Tape, y: &BatchLabels) -> ModelOutput {
    let logit = |m: &Mat| m.mapv(|v| if v > 0.5 { 20.0 } else { -20.0 });
    let sev = Mat::from_shape_fn((y.y_sev.len(), 2), |(g, c)| if c == y.y_sev[g] { 20.0 } else { -20.0 });
    ModelOutput {
        edge_logits: t.constant(logit(&y.y_edge)).unwrap(),
        node_logits: t.constant(logit(&y.y_node)).unwrap(),
        sev_logits: t.constant(sev).unwrap(),
        dns: t.constant(y.y_dns.clone()).unwrap(),
        physics: None,
        trip_probs: None,
        per_round: Vec::new(),
        failed: Vec::new(),
        trace: Trace::default(),
    }
}

#[test]
fn perfect_predictions_cost_nothing() {
    let samples: Vec<GraphSample> = (0..4).map(|k| small(6, k)).collect();
    let refs: Vec<&GraphSample> = samples.iter().collect();
    let y = BatchLabels::new(&refs, 2);
    let mut t = Tape::new();
    let out = perfect_output(&mut t, &y);
    let (_, parts) = composite_loss(&mut t, &out, &y, &LossConfig::default(), 50, [1.0, 1.7]).unwrap();
    assert!(parts.total < 1e-6, "{parts:?}");
}

fn one_round(mut s: GraphSample) -> GraphSample {
    s.rounds.truncate(1);
    s.y_edge = s.rounds[0].y_edge.clone();
    s.y_node = s.rounds[0].y_node.clone();
    s
}

#[test]
fn single_undiscounted_round_equals_composite_loss() {
    let samples: Vec<GraphSample> = (0..3).map(|k| one_round(small(6, k))).collect();
    let refs: Vec<&GraphSample> = samples.iter().collect();
    let b = GraphBatch::new(&refs);
    let model = Model::new(tiny_multi(Variant::Full, 1), 4).unwrap();
    let cfg = LossConfig::default();
    let y = BatchLabels::new(&refs, 1);
    let mut t = Tape::new();
    let one = model.forward_one_shot(&mut t, &b, None).unwrap();
    let (a, _) = composite_loss(&mut t, &one, &y, &cfg, 40, [1.0, 1.2]).unwrap();
    let multi = model.forward_multi_round(&mut t, &b, None, None).unwrap();
    let (m, _) = multi_round_loss(&mut t, &multi, &y, &cfg, 1.0, 40, [1.0, 1.2]).unwrap();
    assert!((t.scalar(a) - t.scalar(m)).abs() < 1e-12);
}

#[test]
fn round_count_mismatch_is_an_error() {
    let s = small(6, 1);
    let b = GraphBatch::new(&[&s]);
    let model = Model::new(tiny_multi(Variant::Full, 3), 4).unwrap();
    let y = BatchLabels::new(&[&s], 3);
    let mut t = Tape::new();
    let mut out = model.forward_multi_round(&mut t, &b, None, None).unwrap();
    out.per_round.truncate(1);
    let err = multi_round_loss(&mut t, &out, &y, &LossConfig::default(), 0.95, 0, [1.0, 1.0]).unwrap_err();
    assert!(matches!(err, ModelError::RoundMismatch(1, 3)));
}

#[test]
fn duplicated_batch_has_the_same_mean_loss() {
    let s = small(7, 3);
    let model = Model::new(tiny(Variant::Full), 5).unwrap();
    let loss = |refs: &[&GraphSample]| {
        let b = GraphBatch::new(refs);
        let y = BatchLabels::new(refs, 1);
        let mut t = Tape::new();
        let out = model.forward_one_shot(&mut t, &b, None).unwrap();
        composite_loss(&mut t, &out, &y, &LossConfig::default(), 40, [1.0, 1.3]).unwrap().1.total
    };
    let (one, two) = (loss(&[&s]), loss(&[&s, &s]));
    assert!((2.0 * two - 2.0 * one).abs() < 1e-12, "{one} vs {two}");
}

#[test]
fn physics_term_is_absent_at_epoch_zero() {
    let s = small(7, 3);
    let model = Model::new(tiny(Variant::Full), 5).unwrap();
    let b = GraphBatch::new(&[&s]);
    let y = BatchLabels::new(&[&s], 1);
    let mut t = Tape::new();
    let out = model.forward_one_shot(&mut t, &b, None).unwrap();
    let (_, p) = composite_loss(&mut t, &out, &y, &LossConfig::default(), 0, [1.0, 1.0]).unwrap();
    assert!(p.physics > 0.0);
    let cfg = LossConfig::default();
    let want = cfg.lambda_node * p.node + cfg.lambda_edge * p.edge + cfg.lambda_sev * p.severity + cfg.lambda_dns * p.dns;
    assert!((p.total - want).abs() < 1e-12);
}

#[test]
fn non_finite_components_are_named() {
    let parts = LossParts { edge: f64::NAN, ..LossParts::default() };
    let err = parts.check(7).unwrap_err();
    assert!(matches!(err, ModelError::NonFiniteLoss { component: "edge", epoch: 7 }));
}

#[test]
fn one_cycle_schedule_examples() {
    let cfg = TrainConfig::default();
    let total = 1000;
    let s = OneCycle::new(&cfg, total);
    assert!((s.lr(0) - 1e-3 / 25.0).abs() < 1e-15);
    assert!((s.lr(100) - 1e-3).abs() < 1e-15);
    assert!(s.lr(total - 1) < 1e-5);
    assert!((s.lr(total - 1) - 1e-7).abs() < 1e-15);
    for step in 100..total - 1 {
        assert!(s.lr(step + 1) <= s.lr(step));
    }
}

#[test]
fn config_problems_are_reported_together() {
    let cfg = TrainConfig { lr: 0.0, batch_size: 0, warmup_frac: 1.5, ..TrainConfig::default() };
    assert_eq!(cfg.problems().len(), 3);
    let loss = LossConfig { lambda_edge: -1.0, edge_pos_weight_cap: 0.0, ..LossConfig::default() };
    assert_eq!(loss.problems().len(), 2);
}

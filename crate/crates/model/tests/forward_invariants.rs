mod common;

use common::{assert_close, small, tiny, tiny_multi};
use gridcascade::dataset::GraphSample;
use gridcascade::grid::{bundled_rts24_path, load_case};
use gridcascade_autodiff::{Mat, Tape};
use gridcascade_model::model::physics_loss;
use gridcascade_model::{GraphBatch, Model, TeacherSignal, Variant};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn set(model: &mut Model, name: &str, f: impl Fn(&mut Mat)) {
    let id = model.store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    f(model.store.value_mut(id));
}

fn batch(samples: &[&GraphSample]) -> GraphBatch {
    GraphBatch::new(samples)
}

struct Out {
    edge: Mat,
    node: Mat,
    sev: Mat,
    dns: Mat,
}

fn run(model: &Model, s: &GraphSample) -> Out {
    let mut t = Tape::new();
    let o = model.forward_one_shot(&mut t, &batch(&[s]), None).unwrap();
    Out {
        edge: t.value(o.edge_logits).clone(),
        node: t.value(o.node_logits).clone(),
        sev: t.value(o.sev_logits).clone(),
        dns: t.value(o.dns).clone(),
    }
}

fn permute(s: &GraphSample, perm: &[usize]) -> GraphSample {
    let mut p = s.clone();
    for (old, &new) in perm.iter().enumerate() {
        p.node_features[new] = s.node_features[old];
        p.y_node[new] = s.y_node[old];
    }
    for (k, e) in s.edge_index.iter().enumerate() {
        p.edge_index[k] = [perm[e[0]], perm[e[1]]];
    }
    p
}

#[test]
fn node_permutation_is_equivariant() {
    let model = Model::new(tiny(Variant::Full), 3).unwrap();
    let s = small(7, 11);
    let perm = [3, 0, 6, 1, 5, 2, 4];
    let p = permute(&s, &perm);
    let (a, b) = (run(&model, &s), run(&model, &p));
    for (old, &new) in perm.iter().enumerate() {
        assert!((a.node[[old, 0]] - b.node[[new, 0]]).abs() < 1e-9);
    }
    assert_close(&a.edge, &b.edge, 1e-9, "edge logits");
    assert_close(&a.sev, &b.sev, 1e-9, "severity");
    assert_close(&a.dns, &b.dns, 1e-9, "dns");
}

#[test]
fn attention_and_pooling_rows_are_normalized() {
    let model = Model::new(tiny(Variant::Full), 4).unwrap();
    let (s1, s2) = (small(6, 1), small(9, 2));
    let b = batch(&[&s1, &s2]);
    let mut t = Tape::new();
    let o = model.forward_one_shot(&mut t, &b, None).unwrap();
    let dst = b.mp_dst();
    for &alpha in &o.trace.attention {
        let a = t.value(alpha);
        for head in 0..a.ncols() {
            let mut sums = vec![0.0; b.n_nodes()];
            for (k, &d) in dst.iter().enumerate() {
                sums[d] += a[[k, head]];
            }
            for s in sums {
                assert!((s - 1.0).abs() < 1e-9, "attention row sums to {s}");
            }
        }
    }
    let w = t.value(o.trace.pool_weights.unwrap());
    let mut sums = vec![0.0; b.n_graphs];
    for (i, &g) in b.node_graph.iter().enumerate() {
        sums[g] += w[[i, 0]];
    }
    for s in sums {
        assert!((s - 1.0).abs() < 1e-9, "pool weights sum to {s}");
    }
}

#[test]
fn single_in_neighbour_gets_full_attention() {
    // a path 0 -> 1 -> 2 with only forward orientations
    let mut s = small(3, 5);
    s.edge_index = vec![[0, 1], [1, 2]];
    s.edge_features.truncate(2);
    s.y_edge.truncate(2);
    let model = Model::new(tiny(Variant::Full), 1).unwrap();
    let b = batch(&[&s]);
    let mut t = Tape::new();
    let o = model.forward_one_shot(&mut t, &b, None).unwrap();
    let dst = b.mp_dst();
    for &alpha in &o.trace.attention {
        let a = t.value(alpha);
        for (k, &d) in dst.iter().enumerate() {
            assert_eq!(dst.iter().filter(|&&x| x == d).count(), 1);
            for head in 0..a.ncols() {
                assert_eq!(a[[k, head]], 1.0, "edge {k} into {d}");
            }
        }
    }
}

fn first_layer_attention(model: &Model, s: &GraphSample) -> Mat {
    let mut t = Tape::new();
    let o = model.forward_one_shot(&mut t, &batch(&[s]), None).unwrap();
    t.value(o.trace.attention[0]).clone()
}

#[test]
fn zero_edge_projection_leaves_query_key_attention() {
    let mut model = Model::new(tiny(Variant::Full), 8).unwrap();
    let s = small(6, 3);
    let mut shifted = s.clone();
    for row in &mut shifted.edge_features {
        row[1] += 2.0;
        row[4] -= 1.0;
    }
    assert!(
        (first_layer_attention(&model, &s) - first_layer_attention(&model, &shifted)).iter().any(|x| x.abs() > 1e-6),
        "edge features should matter while W_E is nonzero"
    );
    set(&mut model, "enc.layer0.we.w", |w| w.fill(0.0));
    let (a, b) = (first_layer_attention(&model, &s), first_layer_attention(&model, &shifted));
    assert_eq!(a, b);

    // independent query-key oracle from the input projection
    let d = model.cfg.hidden_dim;
    let p = |name: &str| model.store.value(model.store.id(name).unwrap()).clone();
    let x = Mat::from_shape_fn((s.n_nodes(), s.node_features[0].len()), |(i, c)| s.node_features[i][c]);
    let pre = (x.dot(&p("enc.node_in.w")) + &p("enc.node_in.b")).mapv(|v| v.max(0.0));
    let mut h = pre.clone();
    for mut row in h.rows_mut() {
        let mean = row.mean().unwrap();
        let var = row.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        row.mapv_inplace(|v| (v - mean) / (var + 1e-5).sqrt());
    }
    let (q, k) = (h.dot(&p("enc.layer0.wq.w")), h.dot(&p("enc.layer0.wk.w")));
    let heads = model.cfg.heads;
    let dk = d / heads;
    for (e, &[src, dst]) in s.edge_index.iter().enumerate() {
        for head in 0..heads {
            let score = |j: usize| (0..dk).map(|c| q[[dst, head * dk + c]] * k[[j, head * dk + c]]).sum::<f64>() / (dk as f64).sqrt();
            let senders: Vec<usize> = s.edge_index.iter().filter(|x| x[1] == dst).map(|x| x[0]).collect();
            let z: f64 = senders.iter().map(|&j| score(j).exp()).sum();
            let want = score(src).exp() / z;
            assert!((a[[e, head]] - want).abs() < 1e-9, "edge {e} head {head}: {} vs {want}", a[[e, head]]);
        }
    }
}

fn states(model: &Model, s: &GraphSample) -> (Mat, Mat, Mat) {
    let mut t = Tape::new();
    let o = model.forward_one_shot(&mut t, &batch(&[s]), None).unwrap();
    let tr = o.trace;
    (t.value(tr.h0.unwrap()).clone(), t.value(tr.hc.unwrap()).clone(), t.value(tr.hf.unwrap()).clone())
}

#[test]
fn euler_step_is_bounded_by_horizon() {
    for horizon in [0.3, 1.0, 2.5] {
        let model = Model::new(gridcascade_model::ModelConfig { ode_time: horizon, ..tiny(Variant::Full) }, 2).unwrap();
        let (h0, hc, _) = states(&model, &small(8, 4));
        let gap = (&hc - &h0).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(gap <= horizon + 1e-12, "gap {gap} exceeds {horizon}");
        assert!(gap > 0.0);
    }
}

#[test]
fn zero_horizon_or_zero_field_is_identity() {
    let model = Model::new(gridcascade_model::ModelConfig { ode_time: 0.0, ..tiny(Variant::Full) }, 2).unwrap();
    let (h0, hc, _) = states(&model, &small(8, 4));
    assert_eq!(h0, hc);
    let mut model = Model::new(tiny(Variant::Full), 2).unwrap();
    set(&mut model, "ode.wf.w", |w| w.fill(0.0));
    set(&mut model, "ode.wf.b", |w| w.fill(0.0));
    let (h0, hc, _) = states(&model, &small(8, 4));
    assert_eq!(h0, hc);
}

#[test]
fn no_trips_means_no_jump() {
    let mut model = Model::new(tiny(Variant::Full), 5).unwrap();
    set(&mut model, "jump.trip.1.b", |b| b.fill(-50.0));
    let s = small(8, 6);
    let mut t = Tape::new();
    let o = model.forward_one_shot(&mut t, &batch(&[&s]), None).unwrap();
    assert!(t.value(o.trip_probs.unwrap()).iter().all(|&p| p <= 0.5));
    assert!(o.trace.delta.is_none());
    assert_eq!(t.value(o.trace.hf.unwrap()), t.value(o.trace.hc.unwrap()));
}

#[test]
fn zero_gamma_means_no_jump() {
    let mut model = Model::new(tiny(Variant::Full), 5).unwrap();
    set(&mut model, "jump.trip.1.b", |b| b.fill(50.0));
    set(&mut model, "jump.gamma", |g| g.fill(0.0));
    let s = small(8, 6);
    let mut t = Tape::new();
    let o = model.forward_one_shot(&mut t, &batch(&[&s]), None).unwrap();
    let delta = t.value(o.trace.delta.unwrap());
    assert!(delta.iter().any(|x| x.abs() > 1e-6));
    assert_eq!(t.value(o.trace.hf.unwrap()), t.value(o.trace.hc.unwrap()));
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[test]
fn single_tripped_edge_matches_loop_reference() {
    let mut model = Model::new(tiny(Variant::Full), 9).unwrap();
    let s = small(7, 8);
    let b = batch(&[&s]);
    let mut t = Tape::new();
    let enc = model.encode(&mut t, &b, None, None).unwrap();
    let hc = model.ode_step(&mut t, &b, enc.h, enc.e).unwrap();
    let probe = model.jump(&mut t, &b, hc, enc.e).unwrap();
    let p = t.value(probe.trip_probs).column(0).to_vec();
    let logit = |q: f64| (q / (1.0 - q)).ln();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    let (top, second) = (logit(p[order[0]]), logit(p[order[1]]));
    assert!(top - second > 1e-6, "trip logits tie");
    let shift = -(top + second) / 2.0;
    set(&mut model, "jump.trip.1.b", |b| b.mapv_inplace(|v| v + shift));

    let mut t = Tape::new();
    let enc = model.encode(&mut t, &b, None, None).unwrap();
    let hc = model.ode_step(&mut t, &b, enc.h, enc.e).unwrap();
    let out = model.jump(&mut t, &b, hc, enc.e).unwrap();
    let probs = t.value(out.trip_probs).column(0).to_vec();
    let tripped: Vec<usize> = (0..probs.len()).filter(|&k| probs[k] > 0.5).collect();
    assert_eq!(tripped, vec![order[0]]);
    let k = tripped[0];
    let (src, dst) = (s.edge_index[k][0], s.edge_index[k][1]);

    let par = |name: &str| model.store.value(model.store.id(name).unwrap()).clone();
    let (w0, w1, b0, w2, b2) =
        (par("jump.delta.0.w0"), par("jump.delta.0.w1"), par("jump.delta.0.b"), par("jump.delta.1.w"), par("jump.delta.1.b"));
    let gamma = par("jump.gamma")[[0, 0]];
    let (hcv, ev) = (t.value(hc).clone(), t.value(enc.e).clone());
    let d = hcv.ncols();
    let n = hcv.nrows();
    let mut delta = vec![vec![0.0; d]; n];
    for end in [src, dst] {
        let mut hidden = vec![0.0; d];
        for (j, slot) in hidden.iter_mut().enumerate() {
            let mut acc = b0[[0, j]];
            for i in 0..d {
                acc += hcv[[end, i]] * w0[[i, j]] + ev[[k, i]] * w1[[i, j]];
            }
            *slot = gelu(acc);
        }
        for j in 0..d {
            let mut acc = b2[[0, j]];
            for i in 0..d {
                acc += hidden[i] * w2[[i, j]];
            }
            delta[end][j] += acc;
        }
    }
    let hf = t.value(out.h);
    for i in 0..n {
        let w = (0..s.n_edges()).filter(|&e| s.edge_index[e][0] == i).map(|e| probs[e]).fold(0.0f64, f64::max);
        for j in 0..d {
            let want = hcv[[i, j]] + delta[i][j] * w * gamma;
            assert!((hf[[i, j]] - want).abs() < 1e-12, "node {i} dim {j}: {} vs {want}", hf[[i, j]]);
            if i != src && i != dst {
                assert_eq!(hf[[i, j]], hcv[[i, j]]);
            }
        }
    }
    assert!(delta[src].iter().chain(&delta[dst]).any(|x| x.abs() > 1e-6));
}

#[test]
fn identical_embeddings_pool_uniformly() {
    let model = Model::new(tiny(Variant::Full), 6).unwrap();
    let (s1, s2) = (small(5, 1), small(8, 2));
    let b = batch(&[&s1, &s2]);
    let mut t = Tape::new();
    let enc = model.encode(&mut t, &b, None, None).unwrap();
    let row = t.value(enc.h).row(0).to_owned();
    let h = t.constant(Mat::from_shape_fn((b.n_nodes(), row.len()), |(_, c)| row[c])).unwrap();
    let dec = model.decode(&mut t, &b, h, enc.e).unwrap();
    let w = t.value(dec.pool_weights);
    for (i, &g) in b.node_graph.iter().enumerate() {
        let size = if g == 0 { 5.0 } else { 8.0 };
        assert!((w[[i, 0]] - 1.0 / size).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn dns_is_a_fraction(seed in 0u64..1000, scale in 0.1f64..50.0) {
        let model = Model::new(tiny(Variant::Full), seed).unwrap();
        let mut s = small(6, seed);
        for row in &mut s.node_features {
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
        let o = run(&model, &s);
        prop_assert!((0.0..=1.0).contains(&o.dns[[0, 0]]));
    }
}

#[test]
fn physics_loss_hand_example() {
    let mut t = Tape::new();
    let inj = t.constant(Mat::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let flow = t.constant(Mat::from_shape_vec((2, 2), vec![0.5, 1.0, 2.0, -1.0]).unwrap()).unwrap();
    let loss = physics_loss(&mut t, inj, flow, &[0, 1], &[1, 0], 2).unwrap();
    // node 0: (1 + 2 - 0.5, 2 - 1 - 1) = (2.5, 0); node 1: (3 + 0.5 - 2, 4 + 1 + 1) = (1.5, 6)
    assert!((t.scalar(loss) - (6.25 + 2.25 + 36.0) / 2.0).abs() < 1e-12);
    let zi = t.constant(Mat::zeros((2, 2))).unwrap();
    let zf = t.constant(Mat::zeros((2, 2))).unwrap();
    let zero = physics_loss(&mut t, zi, zf, &[0, 1], &[1, 0], 2).unwrap();
    assert_eq!(t.scalar(zero), 0.0);
}

#[test]
fn physics_residual_is_non_negative() {
    for seed in 0..5 {
        let model = Model::new(tiny(Variant::Full), seed).unwrap();
        let s = small(6, seed);
        let mut t = Tape::new();
        let o = model.forward_one_shot(&mut t, &batch(&[&s]), None).unwrap();
        assert!(t.scalar(o.physics.unwrap()) >= 0.0);
    }
}

#[test]
fn gnn_only_ignores_bypassed_parameters() {
    let mut model = Model::new(tiny(Variant::GnnOnly), 12).unwrap();
    let s = small(7, 3);
    let before = run(&model, &s);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        if name.starts_with("ode.") || name.starts_with("jump.") || name.starts_with("phys.") {
            model.store.value_mut(id).mapv_inplace(|_| rng.gen_range(-3.0..3.0));
        }
    }
    let after = run(&model, &s);
    assert_eq!(before.edge, after.edge);
    assert_eq!(before.node, after.node);
    assert_eq!(before.sev, after.sev);
    assert_eq!(before.dns, after.dns);
}

#[test]
fn no_jump_matches_full_when_nothing_trips() {
    let mut full = Model::new(tiny(Variant::Full), 21).unwrap();
    let mut no_jump = Model::new(tiny(Variant::NoJump), 21).unwrap();
    for m in [&mut full, &mut no_jump] {
        set(m, "jump.trip.1.b", |b| b.fill(-50.0));
    }
    let s = small(9, 1);
    let (a, b) = (run(&full, &s), run(&no_jump, &s));
    assert_eq!(a.edge, b.edge);
    assert_eq!(a.node, b.node);
}

#[test]
fn no_physics_logits_equal_full() {
    let full = Model::new(tiny(Variant::Full), 30).unwrap();
    let np = Model::new(tiny(Variant::NoPhysics), 30).unwrap();
    assert_eq!(full.store.to_checkpoint(serde_json::Value::Null), np.store.to_checkpoint(serde_json::Value::Null));
    let s = small(9, 2);
    let (a, b) = (run(&full, &s), run(&np, &s));
    assert_eq!(a.edge, b.edge);
    assert_eq!(a.node, b.node);
    assert_eq!(a.sev, b.sev);
    assert_eq!(a.dns, b.dns);
}

#[test]
fn rts24_output_shapes() {
    let case = load_case(bundled_rts24_path()).unwrap();
    let branches: Vec<(usize, usize)> = case.branches.iter().map(|b| (b.from_bus, b.to_bus)).collect();
    let s = common::sample(case.n_buses(), &branches, 1);
    for variant in Variant::ALL {
        let model = Model::new(gridcascade_model::ModelConfig { variant, ..Default::default() }, 0).unwrap();
        let o = run(&model, &s);
        assert_eq!(o.edge.dim(), (76, 1));
        assert_eq!(o.node.dim(), (24, 1));
        assert_eq!(o.sev.dim(), (1, 2));
        assert_eq!(o.dns.dim(), (1, 1));
    }
}

#[test]
fn single_round_rollout_equals_one_shot() {
    for variant in Variant::ALL {
        let one = Model::new(tiny(variant), 14).unwrap();
        let multi = Model::new(tiny_multi(variant, 1), 14).unwrap();
        let (s1, s2) = (small(6, 1), small(7, 2));
        let b = batch(&[&s1, &s2]);
        let mut t1 = Tape::new();
        let a = one.forward_one_shot(&mut t1, &b, None).unwrap();
        let mut t2 = Tape::new();
        let m = multi.forward_multi_round(&mut t2, &b, None, None).unwrap();
        assert_eq!(m.per_round.len(), 1);
        assert_eq!(t1.value(a.edge_logits), t2.value(m.per_round[0].0));
        assert_eq!(t1.value(a.node_logits), t2.value(m.per_round[0].1));
        assert_eq!(t1.value(a.sev_logits), t2.value(m.sev_logits));
        assert_eq!(t1.value(a.dns), t2.value(m.dns));
    }
}

fn teacher(b: &GraphBatch, rounds: usize, truth: bool, edge: bool, node: bool) -> TeacherSignal {
    TeacherSignal {
        node: vec![vec![node; b.n_nodes()]; rounds],
        edge: vec![vec![edge; b.n_edges()]; rounds],
        use_truth: vec![vec![truth; b.n_graphs]; rounds],
    }
}

#[test]
fn full_teacher_forcing_with_zero_labels_keeps_masks() {
    let mut model = Model::new(tiny_multi(Variant::Full, 4), 2).unwrap();
    set(&mut model, "dec.edge.2.b", |b| b.fill(50.0));
    set(&mut model, "dec.node.2.b", |b| b.fill(50.0));
    let s = small(6, 3);
    let b = batch(&[&s]);
    let mut t = Tape::new();
    let o = model.forward_multi_round(&mut t, &b, Some(&teacher(&b, 4, true, false, false)), None).unwrap();
    assert_eq!(o.per_round.len(), 4);
    for (nodes, edges) in &o.failed {
        assert!(nodes.iter().chain(edges).all(|&f| !f));
    }
    // the same model without forcing feeds its own confident predictions back
    let mut t = Tape::new();
    let o = model.forward_multi_round(&mut t, &b, Some(&teacher(&b, 4, false, false, false)), None).unwrap();
    assert!(o.failed[0].1.iter().all(|&f| f));
}

#[test]
fn teacher_labels_drive_the_failure_state() {
    let mut model = Model::new(tiny_multi(Variant::Full, 3), 2).unwrap();
    set(&mut model, "dec.edge.2.b", |b| b.fill(-50.0));
    let s = small(6, 3);
    let b = batch(&[&s]);
    let mut sig = teacher(&b, 3, true, false, false);
    sig.edge[1][2] = true;
    sig.edge[1][3] = true;
    sig.node[1][4] = true;
    let mut t = Tape::new();
    let o = model.forward_multi_round(&mut t, &b, Some(&sig), None).unwrap();
    assert!(o.failed[0].1.iter().all(|&f| !f));
    for r in 1..3 {
        let (nodes, edges) = &o.failed[r];
        assert_eq!(edges.iter().filter(|&&f| f).count(), 2);
        assert!(edges[2] && edges[3] && nodes[4]);
    }
}

#[test]
fn rollout_stops_when_nothing_new_is_predicted() {
    let mut model = Model::new(tiny_multi(Variant::Full, 10), 2).unwrap();
    set(&mut model, "dec.edge.2.b", |b| b.fill(-50.0));
    let s = small(6, 3);
    let mut t = Tape::new();
    let o = model.forward_multi_round(&mut t, &batch(&[&s]), None, None).unwrap();
    assert_eq!(o.per_round.len(), 1);
}

#[test]
fn teacher_signal_must_cover_every_round() {
    let model = Model::new(tiny_multi(Variant::Full, 3), 2).unwrap();
    let s = small(6, 3);
    let b = batch(&[&s]);
    let mut t = Tape::new();
    let err = model.forward_multi_round(&mut t, &b, Some(&teacher(&b, 2, true, false, false)), None).unwrap_err();
    assert!(matches!(err, gridcascade_model::ModelError::MissingTeacherLabels { needed: 3, got: 2 }));
    let one = Model::new(tiny(Variant::Full), 2).unwrap();
    assert!(matches!(one.forward_multi_round(&mut t, &b, None, None), Err(gridcascade_model::ModelError::NotMultiRound)));
}

#[test]
fn dropout_is_off_without_rng_and_seeded_with_one() {
    let model = Model::new(gridcascade_model::ModelConfig { dropout: 0.3, ..tiny(Variant::Full) }, 2).unwrap();
    let s = small(6, 3);
    let b = batch(&[&s]);
    let eval = |rng: Option<u64>| {
        let mut t = Tape::new();
        let mut r = rng.map(ChaCha8Rng::seed_from_u64);
        let o = model.forward_one_shot(&mut t, &b, r.as_mut()).unwrap();
        t.value(o.edge_logits).clone()
    };
    assert_eq!(eval(None), eval(None));
    assert_eq!(eval(Some(1)), eval(Some(1)));
    assert_ne!(eval(Some(1)), eval(None));
}

use gridcascade::rng::stream;
use gridcascade_autodiff::{Checkpoint, Mat, ParamStore, Tape, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::GraphBatch;
use crate::config::{ModelConfig, Variant};
use crate::error::{ModelError, Result};
use crate::layers::{head_indicator, LayerNorm, Linear, Mlp};
use gridcascade::dataset::{EDGE_DIM, NODE_DIM};

/// Edge-conditioned multi-head attention plus message MLP.
#[derive(Debug, Clone)]
struct AttnLayer {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    we: Linear,
    wo: Linear,
    msg_in: Linear,
    msg_out: Linear,
    ffn: Mlp,
    norm: Option<LayerNorm>,
}

impl AttnLayer {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, with_norm: bool) -> gridcascade_autodiff::Result<Self> {
        Ok(AttnLayer {
            wq: Linear::no_bias(store, rng, &format!("{name}.wq"), &[d], d)?,
            wk: Linear::no_bias(store, rng, &format!("{name}.wk"), &[d], d)?,
            wv: Linear::no_bias(store, rng, &format!("{name}.wv"), &[d], d)?,
            we: Linear::no_bias(store, rng, &format!("{name}.we"), &[d], d)?,
            wo: Linear::new(store, rng, &format!("{name}.wo"), &[d], d)?,
            msg_in: Linear::new(store, rng, &format!("{name}.msg.0"), &[d, d, d], d)?,
            msg_out: Linear::new(store, rng, &format!("{name}.msg.1"), &[d], d)?,
            ffn: Mlp::new(store, rng, &format!("{name}.ffn"), &[d], &[2 * d, d])?,
            norm: if with_norm { Some(LayerNorm::new(store, &format!("{name}.norm"), d)?) } else { None },
        })
    }
}

#[derive(Debug, Clone)]
struct Params {
    node_in: Linear,
    node_in_norm: LayerNorm,
    edge_in: Linear,
    edge_in_norm: LayerNorm,
    layers: Vec<AttnLayer>,
    ode_conv: AttnLayer,
    ode_out: Linear,
    trip: Mlp,
    jump: Mlp,
    gamma: gridcascade_autodiff::ParamId,
    node_head: Mlp,
    edge_head: Mlp,
    pool: Mlp,
    sev_head: Mlp,
    dns_head: Mlp,
    inj: Mlp,
    flow: Mlp,
    updater: Mlp,
    baseline: Option<Baseline>,
}

/// Independent per-node and per-edge towers for the MLP baseline.
#[derive(Debug, Clone)]
struct Baseline {
    node: Vec<(Mlp, LayerNorm)>,
    edge: Vec<(Mlp, LayerNorm)>,
}

/// Values recorded on the tape by one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub edge_logits: Var,
    pub node_logits: Var,
    pub sev_logits: Var,
    pub dns: Var,
    pub physics: Option<Var>,
    pub trip_probs: Option<Var>,
    /// `(edge_logits, node_logits)` per executed round, multi-round only.
    pub per_round: Vec<(Var, Var)>,
    /// Cumulative `(node, edge)` failure flags fed forward after each round, multi-round only.
    pub failed: Vec<(Vec<bool>, Vec<bool>)>,
    pub trace: Trace,
}

/// Intermediate nodes exposed for inspection.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub attention: Vec<Var>,
    pub pool_weights: Option<Var>,
    pub h0: Option<Var>,
    pub hc: Option<Var>,
    pub hf: Option<Var>,
    pub delta: Option<Var>,
}

pub struct Encoded {
    pub h: Var,
    pub e: Var,
    pub attention: Vec<Var>,
}

pub struct JumpOut {
    pub h: Var,
    pub trip_probs: Var,
    pub delta: Option<Var>,
}

pub struct Decoded {
    pub edge_logits: Var,
    pub node_logits: Var,
    pub sev_logits: Var,
    pub dns: Var,
    pub pool_weights: Var,
}

/// Per-round ground truth for teacher forcing: labels flattened over the
/// batch and one Bernoulli draw per (round, graph).
#[derive(Debug, Clone)]
pub struct TeacherSignal {
    pub node: Vec<Vec<bool>>,
    pub edge: Vec<Vec<bool>>,
    pub use_truth: Vec<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    p: Params,
    heads: Mat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub variant: Variant,
    pub stats_hash: String,
    pub thresholds: Option<crate::train::Thresholds>,
}

type Rng<'a> = Option<&'a mut ChaCha8Rng>;

impl Model {
    /// Registers every parameter; each component draws from its own init sub-stream.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let problems = cfg.problems();
        if !problems.is_empty() {
            return Err(ModelError::Config(problems));
        }
        let d = cfg.hidden_dim;
        let h = d / 2;
        let mut store = ParamStore::new();
        let s = &mut store;
        let r = |k: u64| stream(seed, "init", &[k]);
        let node_in = Linear::new(s, &mut r(0), "enc.node_in", &[NODE_DIM], d)?;
        let node_in_norm = LayerNorm::new(s, "enc.node_in_norm", d)?;
        let edge_in = Linear::new(s, &mut r(1), "enc.edge_in", &[EDGE_DIM], d)?;
        let edge_in_norm = LayerNorm::new(s, "enc.edge_in_norm", d)?;
        let mut rl = r(2);
        let layers = (0..cfg.layers)
            .map(|l| AttnLayer::new(s, &mut rl, &format!("enc.layer{l}"), d, true))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut ro = r(3);
        let ode_conv = AttnLayer::new(s, &mut ro, "ode.conv", d, false)?;
        let ode_out = Linear::new(s, &mut ro, "ode.wf", &[d], d)?;
        let mut rj = r(4);
        let trip = Mlp::new(s, &mut rj, "jump.trip", &[d, d, d], &[d, 1])?;
        let jump = Mlp::new(s, &mut rj, "jump.delta", &[d, d], &[d, d])?;
        let gamma = s.filled("jump.gamma", 1, 1, cfg.gamma_init)?;
        let mut rd = r(5);
        let node_head = Mlp::new(s, &mut rd, "dec.node", &[d], &[d, h, 1])?;
        let edge_head = Mlp::new(s, &mut rd, "dec.edge", &[d, d, d], &[d, h, 1])?;
        let pool = Mlp::new(s, &mut rd, "dec.pool", &[d], &[h, 1])?;
        let sev_head = Mlp::new(s, &mut rd, "dec.sev", &[2 * d], &[d, 2])?;
        let dns_head = Mlp::new(s, &mut rd, "dec.dns", &[2 * d], &[d, 1])?;
        let mut rp = r(6);
        let inj = Mlp::new(s, &mut rp, "phys.inj", &[d], &[h, 2])?;
        let flow = Mlp::new(s, &mut rp, "phys.flow", &[d, d], &[h, 2])?;
        let updater = Mlp::new(s, &mut r(7), "update", &[d, 2], &[d, d])?;
        let baseline = if cfg.variant == Variant::MlpBaseline {
            let mut rb = r(8);
            let tower = |s: &mut ParamStore, rb: &mut ChaCha8Rng, kind: &str| {
                (0..cfg.layers)
                    .map(|l| {
                        let name = format!("mlp.{kind}{l}");
                        Ok((Mlp::new(s, rb, &format!("{name}.ffn"), &[d], &[2 * d, d])?, LayerNorm::new(s, &format!("{name}.norm"), d)?))
                    })
                    .collect::<gridcascade_autodiff::Result<Vec<_>>>()
            };
            let node = tower(s, &mut rb, "node")?;
            let edge = tower(s, &mut rb, "edge")?;
            Some(Baseline { node, edge })
        } else {
            None
        };
        let heads = head_indicator(d, cfg.heads);
        Ok(Model {
            p: Params {
                node_in,
                node_in_norm,
                edge_in,
                edge_in_norm,
                layers,
                ode_conv,
                ode_out,
                trip,
                jump,
                gamma,
                node_head,
                edge_head,
                pool,
                sev_head,
                dns_head,
                inj,
                flow,
                updater,
                baseline,
            },
            cfg,
            store,
            heads,
        })
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn to_checkpoint(&self, stats_hash: &str, thresholds: Option<crate::train::Thresholds>) -> Checkpoint {
        let header =
            CheckpointHeader { model: self.cfg.clone(), variant: self.cfg.variant, stats_hash: stats_hash.to_string(), thresholds };
        self.store.to_checkpoint(serde_json::to_value(header).expect("header serializes"))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, CheckpointHeader)> {
        let header: CheckpointHeader = serde_json::from_value(ckpt.header.clone()).map_err(|e| ModelError::Header(e.to_string()))?;
        let mut model = Model::new(header.model.clone(), 0)?;
        model.store.load_checkpoint(ckpt)?;
        Ok((model, header))
    }

    pub fn save(&self, path: &std::path::Path, stats_hash: &str, thresholds: Option<crate::train::Thresholds>) -> Result<()> {
        Ok(self.to_checkpoint(stats_hash, thresholds).save(path)?)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, CheckpointHeader)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    fn input_projection(&self, t: &mut Tape, b: &GraphBatch) -> Result<(Var, Var)> {
        let s = &self.store;
        let x = t.constant(b.node_x.clone())?;
        let hx = self.p.node_in.apply(t, s, x)?;
        let hx = t.relu(hx)?;
        let h = self.p.node_in_norm.apply(t, s, hx)?;
        let ex = t.constant(b.edge_x.clone())?;
        let ee = self.p.edge_in.apply(t, s, ex)?;
        let ee = t.relu(ee)?;
        let e = self.p.edge_in_norm.apply(t, s, ee)?;
        Ok((h, e))
    }

    /// Edge embeddings for message passing: real edges then zero rows for self-loops.
    fn mp_edges(&self, t: &mut Tape, b: &GraphBatch, e: Var) -> Result<Var> {
        if b.self_loops.is_empty() {
            return Ok(e);
        }
        let zeros = t.constant(Mat::zeros((b.self_loops.len(), self.cfg.hidden_dim)))?;
        Ok(t.concat_rows(&[e, zeros])?)
    }

    /// `Attn + FFN(m)` for one layer; also returns the attention weights (edges × heads).
    fn layer_update(
        &self,
        layer: &AttnLayer,
        t: &mut Tape,
        b: &GraphBatch,
        h: Var,
        e_mp: Var,
        src: &[usize],
        dst: &[usize],
    ) -> Result<(Var, Var)> {
        let s = &self.store;
        let n = b.n_nodes();
        let dk = (self.cfg.hidden_dim / self.cfg.heads) as f64;
        let q = layer.wq.apply(t, s, h)?;
        let k = layer.wk.apply(t, s, h)?;
        let v = layer.wv.apply(t, s, h)?;
        let ek = layer.we.apply(t, s, e_mp)?;
        let q_e = t.gather_rows(q, dst)?;
        let k_e = t.gather_rows(k, src)?;
        let key = t.add(k_e, ek)?;
        let prod = t.mul(q_e, key)?;
        let heads = t.constant(self.heads.clone())?;
        let scores = t.matmul(prod, heads)?;
        let scores = t.scale(scores, 1.0 / dk.sqrt())?;
        let alpha = t.segment_softmax(scores, dst, n)?;
        let heads_t = t.constant(self.heads.t().to_owned())?;
        let alpha_wide = t.matmul(alpha, heads_t)?;
        let v_e = t.gather_rows(v, src)?;
        let weighted = t.mul(alpha_wide, v_e)?;
        let agg = t.scatter_add_rows(weighted, dst, n)?;
        let attn = layer.wo.apply(t, s, agg)?;

        let a = layer.msg_in.partial(t, s, 0, h)?;
        let bb = layer.msg_in.partial(t, s, 1, h)?;
        let a_e = t.gather_rows(a, src)?;
        let b_e = t.gather_rows(bb, dst)?;
        let c_e = layer.msg_in.partial(t, s, 2, e_mp)?;
        let pre = t.add(a_e, b_e)?;
        let pre = t.add(pre, c_e)?;
        let pre = layer.msg_in.add_bias(t, s, pre)?;
        let act = t.gelu(pre)?;
        let sum = t.scatter_add_rows(act, dst, n)?;
        let inv = t.constant(b.inv_in_degree.clone())?;
        let mean = t.mul(sum, inv)?;
        let m = layer.msg_out.apply(t, s, mean)?;
        let f = layer.ffn.apply(t, s, m)?;
        Ok((t.add(attn, f)?, alpha))
    }

    /// Distance of the one-shot forward pass from its non-differentiable points:
    /// input ReLU pre-activations and, when the jump is active, trip logits
    /// against the gate threshold.
    pub fn kink_margin(&self, b: &GraphBatch) -> Result<f64> {
        let mut t = Tape::new();
        let s = &self.store;
        let x = t.constant(b.node_x.clone())?;
        let pn = self.p.node_in.apply(&mut t, s, x)?;
        let ex = t.constant(b.edge_x.clone())?;
        let pe = self.p.edge_in.apply(&mut t, s, ex)?;
        let mut margin = t.value(pn).iter().chain(t.value(pe).iter()).fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if self.cfg.variant.uses_jump() {
            let out = self.forward_one_shot(&mut t, b, None)?;
            let gate = (self.cfg.trip_threshold / (1.0 - self.cfg.trip_threshold)).ln();
            let probs = t.value(out.trip_probs.expect("jump active"));
            for &p in probs.iter() {
                margin = margin.min(((p / (1.0 - p)).ln() - gate).abs());
            }
        }
        Ok(margin)
    }

    /// Input projections followed by the attention layers. `residual` is added
    /// to the projected node states before the first layer.
    pub fn encode(&self, t: &mut Tape, b: &GraphBatch, mut rng: Rng, residual: Option<Var>) -> Result<Encoded> {
        let (mut h, e) = self.input_projection(t, b)?;
        if let Some(r) = residual {
            h = t.add(h, r)?;
        }
        let mut attention = Vec::new();
        if let Some(base) = &self.p.baseline {
            for (ffn, norm) in &base.node {
                let u = ffn.apply(t, &self.store, h)?;
                let u = self.dropout(t, u, rng.as_deref_mut())?;
                let sum = t.add(h, u)?;
                h = norm.apply(t, &self.store, sum)?;
            }
            let mut e = e;
            for (ffn, norm) in &base.edge {
                let u = ffn.apply(t, &self.store, e)?;
                let u = self.dropout(t, u, rng.as_deref_mut())?;
                let sum = t.add(e, u)?;
                e = norm.apply(t, &self.store, sum)?;
            }
            return Ok(Encoded { h, e, attention });
        }
        let e_mp = self.mp_edges(t, b, e)?;
        let (src, dst) = (b.mp_src(), b.mp_dst());
        for layer in &self.p.layers {
            let (u, alpha) = self.layer_update(layer, t, b, h, e_mp, &src, &dst)?;
            attention.push(alpha);
            let u = self.dropout(t, u, rng.as_deref_mut())?;
            let sum = t.add(h, u)?;
            h = layer.norm.as_ref().expect("encoder layers are normalized").apply(t, &self.store, sum)?;
        }
        Ok(Encoded { h, e, attention })
    }

    fn dropout(&self, t: &mut Tape, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        match rng {
            Some(r) if self.cfg.dropout > 0.0 => Ok(t.dropout(x, self.cfg.dropout, r)?),
            _ => Ok(x),
        }
    }

    /// One Euler step of `dH/dt = tanh(W_f · conv(H) + b_f)` over the horizon.
    pub fn ode_step(&self, t: &mut Tape, b: &GraphBatch, h0: Var, e: Var) -> Result<Var> {
        let e_mp = self.mp_edges(t, b, e)?;
        let (u, _) = self.layer_update(&self.p.ode_conv, t, b, h0, e_mp, &b.mp_src(), &b.mp_dst())?;
        let f = self.p.ode_out.apply(t, &self.store, u)?;
        let f = t.tanh(f)?;
        let step = t.scale(f, self.cfg.ode_time)?;
        Ok(t.add(h0, step)?)
    }

    /// Per-edge trip probabilities and the gated state jump.
    pub fn jump(&self, t: &mut Tape, b: &GraphBatch, hc: Var, e: Var) -> Result<JumpOut> {
        let s = &self.store;
        let n = b.n_nodes();
        let first = &self.p.trip.layers[0];
        let a = first.partial(t, s, 0, hc)?;
        let bb = first.partial(t, s, 1, hc)?;
        let a_e = t.gather_rows(a, &b.src)?;
        let b_e = t.gather_rows(bb, &b.dst)?;
        let c_e = first.partial(t, s, 2, e)?;
        let pre = t.add(a_e, b_e)?;
        let pre = t.add(pre, c_e)?;
        let pre = first.add_bias(t, s, pre)?;
        let logits = self.p.trip.finish(t, s, pre)?;
        let probs = t.sigmoid(logits)?;

        let tripped: Vec<usize> =
            t.value(probs).column(0).iter().enumerate().filter(|(_, &p)| p > self.cfg.trip_threshold).map(|(k, _)| k).collect();
        if tripped.is_empty() {
            return Ok(JumpOut { h: hc, trip_probs: probs, delta: None });
        }
        let jf = &self.p.jump.layers[0];
        let hj = jf.partial(t, s, 0, hc)?;
        let e_t = t.gather_rows(e, &tripped)?;
        let ej = jf.partial(t, s, 1, e_t)?;
        let ej = jf.add_bias(t, s, ej)?;
        let src: Vec<usize> = tripped.iter().map(|&k| b.src[k]).collect();
        let dst: Vec<usize> = tripped.iter().map(|&k| b.dst[k]).collect();
        let mut delta = None;
        for ends in [&src, &dst] {
            let hs = t.gather_rows(hj, ends)?;
            let pre = t.add(hs, ej)?;
            let d = self.p.jump.finish(t, s, pre)?;
            let scattered = t.scatter_add_rows(d, ends, n)?;
            delta = Some(match delta {
                None => scattered,
                Some(acc) => t.add(acc, scattered)?,
            });
        }
        let delta = delta.expect("two endpoints");
        let w = t.segment_max(probs, &b.src, n)?;
        let gamma = t.param(s, self.p.gamma);
        let weighted = t.mul(delta, w)?;
        let scaled = t.mul(weighted, gamma)?;
        let h = t.add(hc, scaled)?;
        Ok(JumpOut { h, trip_probs: probs, delta: Some(delta) })
    }

    /// Node, edge and graph-level heads.
    pub fn decode(&self, t: &mut Tape, b: &GraphBatch, h: Var, e: Var) -> Result<Decoded> {
        let s = &self.store;
        let node_logits = self.p.node_head.apply(t, s, h)?;
        let first = &self.p.edge_head.layers[0];
        let a = first.partial(t, s, 0, h)?;
        let bb = first.partial(t, s, 1, h)?;
        let a_e = t.gather_rows(a, &b.src)?;
        let b_e = t.gather_rows(bb, &b.dst)?;
        let c_e = first.partial(t, s, 2, e)?;
        let pre = t.add(a_e, b_e)?;
        let pre = t.add(pre, c_e)?;
        let pre = first.add_bias(t, s, pre)?;
        let edge_logits = self.p.edge_head.finish(t, s, pre)?;
        let score = self.p.pool.apply(t, s, h)?;
        let alpha = t.segment_softmax(score, &b.node_graph, b.n_graphs)?;
        let weighted = t.mul(h, alpha)?;
        let attn_pool = t.scatter_add_rows(weighted, &b.node_graph, b.n_graphs)?;
        let sum_pool = t.scatter_add_rows(h, &b.node_graph, b.n_graphs)?;
        let inv = t.constant(b.inv_graph_size.clone())?;
        let mean_pool = t.mul(sum_pool, inv)?;
        let g = t.concat_cols(&[attn_pool, mean_pool])?;
        let sev_logits = self.p.sev_head.apply(t, s, g)?;
        let dns_logit = self.p.dns_head.apply(t, s, g)?;
        let dns = t.sigmoid(dns_logit)?;
        Ok(Decoded { edge_logits, node_logits, sev_logits, dns, pool_weights: alpha })
    }

    /// Mean squared nodal imbalance of the learned injections and flows.
    pub fn physics_residual(&self, t: &mut Tape, b: &GraphBatch, h: Var) -> Result<Var> {
        let s = &self.store;
        let n = b.n_nodes();
        let inj = self.p.inj.apply(t, s, h)?;
        let first = &self.p.flow.layers[0];
        let a = first.partial(t, s, 0, h)?;
        let bb = first.partial(t, s, 1, h)?;
        let a_e = t.gather_rows(a, &b.src)?;
        let b_e = t.gather_rows(bb, &b.dst)?;
        let pre = t.add(a_e, b_e)?;
        let pre = first.add_bias(t, s, pre)?;
        let flow = self.p.flow.finish(t, s, pre)?;
        physics_loss(t, inj, flow, &b.src, &b.dst, n)
    }

    /// The single-pass stack: encode, ODE, jump, decode and physics.
    pub fn forward_one_shot(&self, t: &mut Tape, b: &GraphBatch, rng: Rng) -> Result<ModelOutput> {
        self.round(t, b, rng, None)
    }

    fn round(&self, t: &mut Tape, b: &GraphBatch, rng: Rng, residual: Option<Var>) -> Result<ModelOutput> {
        let v = self.cfg.variant;
        let enc = self.encode(t, b, rng, residual)?;
        let hc = if v.uses_ode() { self.ode_step(t, b, enc.h, enc.e)? } else { enc.h };
        let (hf, trip_probs, delta) = if v.uses_jump() {
            let j = self.jump(t, b, hc, enc.e)?;
            (j.h, Some(j.trip_probs), j.delta)
        } else {
            (hc, None, None)
        };
        let dec = self.decode(t, b, hf, enc.e)?;
        let physics = if v.uses_physics() { Some(self.physics_residual(t, b, hf)?) } else { None };
        Ok(ModelOutput {
            edge_logits: dec.edge_logits,
            node_logits: dec.node_logits,
            sev_logits: dec.sev_logits,
            dns: dec.dns,
            physics,
            trip_probs,
            per_round: Vec::new(),
            failed: Vec::new(),
            trace: Trace {
                attention: enc.attention,
                pool_weights: Some(dec.pool_weights),
                h0: Some(enc.h),
                hc: Some(hc),
                hf: Some(hf),
                delta,
            },
        })
    }

    /// Autoregressive rollout with shared weights. With a teacher signal every
    /// configured round runs; without one the rollout stops once no edge is
    /// predicted to newly trip.
    pub fn forward_multi_round(
        &self,
        t: &mut Tape,
        batch: &GraphBatch,
        teacher: Option<&TeacherSignal>,
        mut rng: Rng,
    ) -> Result<ModelOutput> {
        let rounds = self.cfg.multi_round.ok_or(ModelError::NotMultiRound)?.rounds;
        if let Some(tch) = teacher {
            let got = tch.node.len().min(tch.edge.len()).min(tch.use_truth.len());
            if got < rounds {
                return Err(ModelError::MissingTeacherLabels { needed: rounds, got });
            }
        }
        let mut b = batch.clone();
        let (n, e) = (b.n_nodes(), b.n_edges());
        let mut failed_nodes = vec![false; n];
        let mut failed_edges = vec![false; e];
        let mut context: Option<(Var, Mat)> = None;
        let mut per_round = Vec::with_capacity(rounds);
        let mut failed = Vec::with_capacity(rounds);
        let mut last = None;
        for r in 0..rounds {
            let residual = match context.take() {
                None => None,
                Some((h_prev, c)) => {
                    let c = t.constant(c)?;
                    let first = &self.p.updater.layers[0];
                    let a = first.partial(t, &self.store, 0, h_prev)?;
                    let bc = first.partial(t, &self.store, 1, c)?;
                    let pre = t.add(a, bc)?;
                    let pre = first.add_bias(t, &self.store, pre)?;
                    Some(self.p.updater.finish(t, &self.store, pre)?)
                }
            };
            let out = self.round(t, &b, rng.as_deref_mut(), residual)?;
            per_round.push((out.edge_logits, out.node_logits));

            let edge_p = t.value(out.edge_logits).column(0).mapv(sigmoid_scalar);
            let node_p = t.value(out.node_logits).column(0).mapv(sigmoid_scalar);
            let thr = self.cfg.trip_threshold;
            let mut new_edges = vec![false; e];
            let mut new_nodes = vec![false; n];
            for k in 0..e {
                let g = b.edge_graph[k];
                let truth = teacher.map(|tc| tc.use_truth[r][g]).unwrap_or(false);
                let pred = edge_p[k].max(edge_p[k ^ 1]) > thr;
                new_edges[k] = !failed_edges[k] && if truth { teacher.expect("checked").edge[r][k] } else { pred };
            }
            for i in 0..n {
                let g = b.node_graph[i];
                let truth = teacher.map(|tc| tc.use_truth[r][g]).unwrap_or(false);
                new_nodes[i] = !failed_nodes[i] && if truth { teacher.expect("checked").node[r][i] } else { node_p[i] > thr };
            }
            let mut tripped_incident = vec![0usize; n];
            for k in 0..e {
                if new_edges[k] {
                    tripped_incident[b.src[k]] += 1;
                    tripped_incident[b.dst[k]] += 1;
                }
            }
            for (f, nw) in failed_edges.iter_mut().zip(&new_edges) {
                *f |= nw;
            }
            for (f, nw) in failed_nodes.iter_mut().zip(&new_nodes) {
                *f |= nw;
            }
            b.apply_failures(&failed_nodes, &failed_edges);
            failed.push((failed_nodes.clone(), failed_edges.clone()));
            let c = Mat::from_shape_fn((n, 2), |(i, col)| match col {
                0 => f64::from(u8::from(failed_nodes[i])),
                _ => tripped_incident[i] as f64 / b.incident[i].max(1) as f64,
            });
            let stop = teacher.is_none() && !new_edges.iter().any(|&x| x);
            context = Some((out.trace.hf.expect("round records h_f"), c));
            last = Some(out);
            if stop {
                break;
            }
        }
        let mut out = last.expect("at least one round");
        out.per_round = per_round;
        out.failed = failed;
        Ok(out)
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `mean_i ‖p̂_i + Σ_in f̂ − Σ_out f̂‖²` for given injections (n×2) and per-edge flows (edges×2).
pub fn physics_loss(t: &mut Tape, inj: Var, flow: Var, src: &[usize], dst: &[usize], n: usize) -> Result<Var> {
    let inflow = t.scatter_add_rows(flow, dst, n)?;
    let outflow = t.scatter_add_rows(flow, src, n)?;
    let r = t.add(inj, inflow)?;
    let r = t.sub(r, outflow)?;
    let sq = t.l2_norm_sq(r)?;
    Ok(t.mean(sq)?)
}

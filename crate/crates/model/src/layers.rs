use gridcascade_autodiff::{Mat, ParamId, ParamStore, Result, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Xavier-uniform matrix for a layer whose full fan-in may span several input blocks.
fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Mat {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Mat::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..=bound))
}

/// Affine map over a concatenation of input blocks, evaluated block by block
/// so per-edge inputs never need to be materialized.
#[derive(Debug, Clone)]
pub struct Linear {
    pub blocks: Vec<ParamId>,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, inputs: &[usize], out: usize) -> Result<Self> {
        Self::build(store, rng, name, inputs, out, true)
    }

    pub fn no_bias(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, inputs: &[usize], out: usize) -> Result<Self> {
        Self::build(store, rng, name, inputs, out, false)
    }

    fn build(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, inputs: &[usize], out: usize, bias: bool) -> Result<Self> {
        let fan_in: usize = inputs.iter().sum();
        let mut blocks = Vec::with_capacity(inputs.len());
        for (k, &rows) in inputs.iter().enumerate() {
            let label = if inputs.len() == 1 { format!("{name}.w") } else { format!("{name}.w{k}") };
            blocks.push(store.register(&label, xavier(rng, rows, out, fan_in, out))?);
        }
        let bias = if bias { Some(store.zeros(&format!("{name}.b"), 1, out)?) } else { None };
        Ok(Linear { blocks, bias })
    }

    /// `x W + b` for a single input block.
    pub fn apply(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = t.param(store, self.blocks[0]);
        let y = t.matmul(x, w)?;
        self.add_bias(t, store, y)
    }

    /// Product of input block `k` with its weight slice, without bias.
    pub fn partial(&self, t: &mut Tape, store: &ParamStore, k: usize, x: Var) -> Result<Var> {
        let w = t.param(store, self.blocks[k]);
        t.matmul(x, w)
    }

    pub fn add_bias(&self, t: &mut Tape, store: &ParamStore, y: Var) -> Result<Var> {
        match self.bias {
            Some(b) => {
                let b = t.param(store, b);
                t.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Stack of linear layers with GELU between them and no activation after the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `first_inputs` are the block widths of the input; `widths` the layer outputs.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, first_inputs: &[usize], widths: &[usize]) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut inputs = first_inputs.to_vec();
        for (k, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(store, rng, &format!("{name}.{k}"), &inputs, w)?);
            inputs = vec![w];
        }
        Ok(Mlp { layers })
    }

    pub fn apply(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.layers[0].apply(t, store, x)?;
        self.finish(t, store, h)
    }

    /// Continues from the pre-activation of the first layer.
    pub fn finish(&self, t: &mut Tape, store: &ParamStore, first: Var) -> Result<Var> {
        let mut h = first;
        for layer in &self.layers[1..] {
            let a = t.gelu(h)?;
            h = layer.apply(t, store, a)?;
        }
        Ok(h)
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm { gain: store.filled(&format!("{name}.gain"), 1, dim, 1.0)?, bias: store.zeros(&format!("{name}.bias"), 1, dim)? })
    }

    pub fn apply(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = t.layer_norm(x)?;
        let g = t.param(store, self.gain);
        let b = t.param(store, self.bias);
        let s = t.mul(n, g)?;
        t.add(s, b)
    }
}

/// Block indicator mapping `d` feature columns to `heads` columns.
pub fn head_indicator(d: usize, heads: usize) -> Mat {
    let dk = d / heads;
    Mat::from_shape_fn((d, heads), |(c, h)| if c / dk == h { 1.0 } else { 0.0 })
}

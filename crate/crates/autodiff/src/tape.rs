use std::collections::HashMap;

use ndarray::{Array2, Axis, Zip};
use rand::Rng;

use crate::params::{ParamId, ParamStore};
use crate::{AdError, Mat, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Relu(Var),
    Gelu(Var, Mat),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    SegmentSoftmax(Var, Vec<usize>, usize),
    LayerNorm(Var, Vec<f64>),
    Dropout(Var, Mat),
    Gather(Var, Vec<usize>),
    ScatterAdd(Var, Vec<usize>),
    SegmentMax(Var, Vec<usize>),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    L2NormSq(Var),
    Mse(Var, Mat),
    Bce(Var, Mat, f64),
    CrossEntropy(Var, Vec<usize>, Vec<f64>, Mat),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    per_node: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
    params: HashMap<ParamId, Var>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Mat {
        match &self.per_node[v.0] {
            Some(g) => g.clone(),
            None => Mat::zeros(self.shapes[v.0]),
        }
    }

    /// One gradient per registered parameter, in store order.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Mat> {
        (0..store.len())
            .map(|i| {
                let id = ParamId(i);
                match self.params.get(&id) {
                    Some(&v) => self.get(v),
                    None => Mat::zeros(store.value(id).dim()),
                }
            })
            .collect()
    }
}

fn shape(m: &Mat) -> (usize, usize) {
    m.dim()
}

fn broadcastable(a: (usize, usize), b: (usize, usize)) -> bool {
    (b.0 == a.0 || b.0 == 1) && (b.1 == a.1 || b.1 == 1)
}

/// Sums `g` down to `target` along broadcast axes.
fn reduce_to(g: &Mat, target: (usize, usize)) -> Mat {
    let mut out = g.clone();
    if target.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if target.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

fn gelu_grad(x: f64, cdf: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const LN_EPS: f64 = 1e-5;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: HashMap::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, op: &'static str, value: Mat, record: Op, needs_grad: bool) -> Result<Var> {
        // x * 0 is NaN exactly when x is infinite or NaN
        if value.iter().fold(0.0, |acc, &x| acc + x * 0.0) != 0.0 {
            return Err(AdError::NonFinite { op });
        }
        self.nodes.push(Node { value, op: record, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Input that receives a gradient.
    pub fn var(&mut self, value: Mat) -> Result<Var> {
        self.push("var", value, Op::Leaf, true)
    }

    /// Input treated as a constant.
    pub fn constant(&mut self, value: Mat) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// Places a stored parameter on the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: store.value(id).clone(), op: Op::Leaf, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(AdError::Shape { op: "matmul", left: sa, right: sb });
        }
        let value = self.value(a).dot(self.value(b));
        let g = self.grad_of(&[a, b]);
        self.push("matmul", value, Op::MatMul(a, b), g)
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if broadcastable(sa, sb) {
            Ok(())
        } else {
            Err(AdError::Shape { op, left: sa, right: sb })
        }
    }

    /// `a + b`, where `b` may be a row, a column or a scalar broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let value = self.value(a) + self.value(b);
        let g = self.grad_of(&[a, b]);
        self.push("add", value, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("sub", a, b)?;
        let value = self.value(a) - self.value(b);
        let g = self.grad_of(&[a, b]);
        self.push("sub", value, Op::Sub(a, b), g)
    }

    /// Element-wise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        let value = self.value(a) * self.value(b);
        let g = self.grad_of(&[a, b]);
        self.push("mul", value, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a) * c;
        let g = self.grad_of(&[a]);
        self.push("scale", value, Op::Scale(a, c), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(AdError::Shape { op: "concat_cols", left: self.shape(parts[0]), right: self.shape(p) });
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        let g = self.grad_of(parts);
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(AdError::Shape { op: "concat_rows", left: self.shape(parts[0]), right: self.shape(p) });
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts checked");
        let g = self.grad_of(parts);
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), g)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a);
        if start >= end || end > s.1 {
            return Err(AdError::Shape { op: "slice_cols", left: s, right: (start, end) });
        }
        let value = self.value(a).slice(ndarray::s![.., start..end]).to_owned();
        let g = self.grad_of(&[a]);
        self.push("slice_cols", value, Op::SliceCols(a, start), g)
    }

    fn unary(&mut self, op: &'static str, a: Var, f: impl Fn(f64) -> f64, record: Op) -> Result<Var> {
        let value = self.value(a).mapv(f);
        let g = self.grad_of(&[a]);
        self.push(op, value, record, g)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Exact GELU, `x Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let cdf = self.value(a).mapv(|x| 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2)));
        let value = self.value(a) * &cdf;
        let g = self.grad_of(&[a]);
        self.push("gelu", value, Op::Gelu(a, cdf), g)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row /= s;
        }
        let g = self.grad_of(&[a]);
        self.push("softmax_rows", value, Op::SoftmaxRows(a), g)
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    pub fn segment_softmax(&mut self, a: Var, segments: &[usize], n_segments: usize) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        if segments.len() != rows {
            return Err(AdError::Shape { op: "segment_softmax", left: (rows, cols), right: (segments.len(), 1) });
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= n_segments) {
            return Err(AdError::Index { op: "segment_softmax", index: bad, len: n_segments });
        }
        let mut max = Array2::from_elem((n_segments, cols), f64::NEG_INFINITY);
        for (r, &s) in segments.iter().enumerate() {
            Zip::from(max.row_mut(s)).and(x.row(r)).for_each(|m, &v| *m = m.max(v));
        }
        let mut value = x.clone();
        let mut sum = Array2::<f64>::zeros((n_segments, cols));
        for (r, &s) in segments.iter().enumerate() {
            Zip::from(value.row_mut(r)).and(max.row(s)).and(sum.row_mut(s)).for_each(|v, &m, acc| {
                *v = (*v - m).exp();
                *acc += *v;
            });
        }
        for (r, &s) in segments.iter().enumerate() {
            Zip::from(value.row_mut(r)).and(sum.row(s)).for_each(|v, &t| *v /= t);
        }
        let g = self.grad_of(&[a]);
        self.push("segment_softmax", value, Op::SegmentSoftmax(a, segments.to_vec(), n_segments), g)
    }

    /// Row-wise standardisation without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        let n = value.ncols() as f64;
        let mut rstd = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / n;
            let var = row.fold(0.0, |acc, &x| acc + (x - mean) * (x - mean)) / n;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|x| (x - mean) * r);
            rstd.push(r);
        }
        let g = self.grad_of(&[a]);
        self.push("layer_norm", value, Op::LayerNorm(a, rstd), g)
    }

    /// Inverted dropout; `p == 0` returns `a` unchanged without recording a node.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let mask = Mat::from_shape_simple_fn(self.shape(a), || if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let value = self.value(a) * &mask;
        let g = self.grad_of(&[a]);
        self.push("dropout", value, Op::Dropout(a, mask), g)
    }

    /// `out[r] = a[index[r]]`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= x.nrows()) {
            return Err(AdError::Index { op: "gather_rows", index: bad, len: x.nrows() });
        }
        let value = x.select(Axis(0), index);
        let g = self.grad_of(&[a]);
        self.push("gather_rows", value, Op::Gather(a, index.to_vec()), g)
    }

    /// `out[index[r]] += a[r]` into `n_rows` rows.
    pub fn scatter_add_rows(&mut self, a: Var, index: &[usize], n_rows: usize) -> Result<Var> {
        let x = self.value(a);
        if index.len() != x.nrows() {
            return Err(AdError::Shape { op: "scatter_add_rows", left: x.dim(), right: (index.len(), 1) });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n_rows) {
            return Err(AdError::Index { op: "scatter_add_rows", index: bad, len: n_rows });
        }
        let mut value = Mat::zeros((n_rows, x.ncols()));
        for (r, &i) in index.iter().enumerate() {
            let mut dst = value.row_mut(i);
            dst += &x.row(r);
        }
        let g = self.grad_of(&[a]);
        self.push("scatter_add_rows", value, Op::ScatterAdd(a, index.to_vec()), g)
    }

    /// Column-wise maximum over rows sharing a segment id; empty segments give 0.
    pub fn segment_max(&mut self, a: Var, segments: &[usize], n_segments: usize) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        if segments.len() != rows {
            return Err(AdError::Shape { op: "segment_max", left: (rows, cols), right: (segments.len(), 1) });
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= n_segments) {
            return Err(AdError::Index { op: "segment_max", index: bad, len: n_segments });
        }
        let mut arg = vec![usize::MAX; n_segments * cols];
        for (r, &s) in segments.iter().enumerate() {
            for c in 0..cols {
                let slot = &mut arg[s * cols + c];
                if *slot == usize::MAX || x[[r, c]] > x[[*slot, c]] {
                    *slot = r;
                }
            }
        }
        let value = Mat::from_shape_fn((n_segments, cols), |(s, c)| match arg[s * cols + c] {
            usize::MAX => 0.0,
            r => x[[r, c]],
        });
        let g = self.grad_of(&[a]);
        self.push("segment_max", value, Op::SegmentMax(a, arg), g)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).t().as_standard_layout().into_owned();
        let g = self.grad_of(&[a]);
        self.push("transpose", value, Op::Transpose(a), g)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let g = self.grad_of(&[a]);
        self.push("sum", value, Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = Mat::from_elem((1, 1), x.sum() / x.len() as f64);
        let g = self.grad_of(&[a]);
        self.push("mean", value, Op::Mean(a), g)
    }

    /// Per-row sum as an `n×1` column.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let g = self.grad_of(&[a]);
        self.push("row_sum", value, Op::RowSum(a), g)
    }

    /// Per-row squared Euclidean norm as an `n×1` column.
    pub fn l2_norm_sq(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).mapv(|x| x * x).sum_axis(Axis(1)).insert_axis(Axis(1));
        let g = self.grad_of(&[a]);
        self.push("l2_norm_sq", value, Op::L2NormSq(a), g)
    }

    /// Mean squared error against a fixed target.
    pub fn mse(&mut self, a: Var, target: &Mat) -> Result<Var> {
        let x = self.value(a);
        if x.dim() != target.dim() {
            return Err(AdError::Shape { op: "mse", left: x.dim(), right: target.dim() });
        }
        let value = Mat::from_elem((1, 1), Zip::from(x).and(target).fold(0.0, |acc, &p, &t| acc + (p - t) * (p - t)) / x.len() as f64);
        let g = self.grad_of(&[a]);
        self.push("mse", value, Op::Mse(a, target.clone()), g)
    }

    /// Mean binary cross-entropy on logits, positives weighted by `pos_weight`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Mat, pos_weight: f64) -> Result<Var> {
        let x = self.value(logits);
        if x.dim() != target.dim() {
            return Err(AdError::Shape { op: "bce_with_logits", left: x.dim(), right: target.dim() });
        }
        let total = Zip::from(x).and(target).fold(0.0, |acc, &z, &y| acc + pos_weight * y * softplus(-z) + (1.0 - y) * softplus(z));
        let value = Mat::from_elem((1, 1), total / x.len() as f64);
        let g = self.grad_of(&[logits]);
        self.push("bce_with_logits", value, Op::Bce(logits, target.clone(), pos_weight), g)
    }

    /// Mean over rows of `w[y] · (−log softmax(x)[y])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], class_weights: &[f64]) -> Result<Var> {
        let x = self.value(logits);
        let (rows, classes) = x.dim();
        if targets.len() != rows || class_weights.len() != classes {
            return Err(AdError::Shape { op: "cross_entropy", left: (rows, classes), right: (targets.len(), class_weights.len()) });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(AdError::Index { op: "cross_entropy", index: bad, len: classes });
        }
        let mut probs = x.clone();
        let mut total = 0.0;
        for (r, mut row) in probs.rows_mut().into_iter().enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            let lse = m + row.fold(0.0, |acc, &v| acc + (v - m).exp()).ln();
            total += class_weights[targets[r]] * (lse - row[targets[r]]);
            row.mapv_inplace(|v| (v - lse).exp());
        }
        let value = Mat::from_elem((1, 1), total / rows as f64);
        let g = self.grad_of(&[logits]);
        self.push("cross_entropy", value, Op::CrossEntropy(logits, targets.to_vec(), class_weights.to_vec(), probs), g)
    }

    /// Reverse pass from a scalar loss. A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        if self.consumed {
            return Err(AdError::Consumed);
        }
        let s = self.shape(loss);
        if s != (1, 1) {
            return Err(AdError::NotScalar(s));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { per_node: grads, shapes: self.nodes.iter().map(|n| n.value.dim()).collect(), params: self.params.clone() })
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Mat| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&val(*b).t()));
                acc(*b, val(*a).t().dot(g));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, reduce_to(g, shape(val(*b))));
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -reduce_to(g, shape(val(*b))));
            }
            Op::Mul(a, b) => {
                acc(*a, g * val(*b));
                acc(*b, reduce_to(&(g * val(*a)), shape(val(*b))));
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    acc(p, g.slice(ndarray::s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = val(p).nrows();
                    acc(p, g.slice(ndarray::s![start..start + h, ..]).to_owned());
                    start += h;
                }
            }
            Op::SliceCols(a, start) => {
                let mut d = Mat::zeros(shape(val(*a)));
                d.slice_mut(ndarray::s![.., *start..*start + g.ncols()]).assign(g);
                acc(*a, d);
            }
            Op::Relu(a) => {
                let d = Zip::from(g).and(val(*a)).map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                acc(*a, d);
            }
            Op::Gelu(a, cdf) => acc(*a, Zip::from(g).and(val(*a)).and(cdf).map_collect(|&g, &x, &c| g * gelu_grad(x, c))),
            Op::Tanh(a) => acc(*a, Zip::from(g).and(y).map_collect(|&g, &t| g * (1.0 - t * t))),
            Op::Sigmoid(a) => acc(*a, Zip::from(g).and(y).map_collect(|&g, &s| g * s * (1.0 - s))),
            Op::SoftmaxRows(a) => {
                let mut d = g * y;
                for (mut row, yr) in d.rows_mut().into_iter().zip(y.rows()) {
                    let s = row.sum();
                    Zip::from(&mut row).and(yr).for_each(|v, &p| *v -= p * s);
                }
                acc(*a, d);
            }
            Op::SegmentSoftmax(a, segments, n) => {
                let gy = g * y;
                let mut sums = Mat::zeros((*n, y.ncols()));
                for (r, &s) in segments.iter().enumerate() {
                    let mut dst = sums.row_mut(s);
                    dst += &gy.row(r);
                }
                let mut d = gy;
                for (r, &s) in segments.iter().enumerate() {
                    Zip::from(d.row_mut(r)).and(y.row(r)).and(sums.row(s)).for_each(|v, &p, &t| *v -= p * t);
                }
                acc(*a, d);
            }
            Op::LayerNorm(a, rstd) => {
                let n = y.ncols() as f64;
                let mut d = g.clone();
                for (r, (mut row, yr)) in d.rows_mut().into_iter().zip(y.rows()).enumerate() {
                    let mean_g = row.sum() / n;
                    let mean_gy = Zip::from(&row).and(yr).fold(0.0, |acc, &a, &b| acc + a * b) / n;
                    Zip::from(&mut row).and(yr).for_each(|v, &yh| *v = rstd[r] * (*v - mean_g - yh * mean_gy));
                }
                acc(*a, d);
            }
            Op::Dropout(a, mask) => acc(*a, g * mask),
            Op::Gather(a, index) => {
                let mut d = Mat::zeros(shape(val(*a)));
                for (r, &src) in index.iter().enumerate() {
                    let mut dst = d.row_mut(src);
                    dst += &g.row(r);
                }
                acc(*a, d);
            }
            Op::ScatterAdd(a, index) => acc(*a, g.select(Axis(0), index)),
            Op::SegmentMax(a, arg) => {
                let mut d = Mat::zeros(shape(val(*a)));
                let cols = g.ncols();
                for (k, &r) in arg.iter().enumerate() {
                    if r != usize::MAX {
                        d[[r, k % cols]] += g[[k / cols, k % cols]];
                    }
                }
                acc(*a, d);
            }
            Op::Transpose(a) => acc(*a, g.t().as_standard_layout().into_owned()),
            Op::Sum(a) => acc(*a, Mat::from_elem(shape(val(*a)), g[[0, 0]])),
            Op::Mean(a) => {
                let x = val(*a);
                acc(*a, Mat::from_elem(x.dim(), g[[0, 0]] / x.len() as f64));
            }
            Op::RowSum(a) => {
                let x = val(*a);
                acc(*a, Mat::from_shape_fn(x.dim(), |(r, _)| g[[r, 0]]));
            }
            Op::L2NormSq(a) => {
                let x = val(*a);
                acc(*a, Mat::from_shape_fn(x.dim(), |(r, c)| 2.0 * x[[r, c]] * g[[r, 0]]));
            }
            Op::Mse(a, target) => {
                let x = val(*a);
                let k = 2.0 * g[[0, 0]] / x.len() as f64;
                acc(*a, Zip::from(x).and(target).map_collect(|&p, &t| k * (p - t)));
            }
            Op::Bce(a, target, pw) => {
                let x = val(*a);
                let k = g[[0, 0]] / x.len() as f64;
                acc(*a, Zip::from(x).and(target).map_collect(|&z, &t| k * (sigmoid(z) * (pw * t + 1.0 - t) - pw * t)));
            }
            Op::CrossEntropy(a, targets, weights, probs) => {
                let k = g[[0, 0]] / probs.nrows() as f64;
                let mut d = probs.clone();
                for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                    row[targets[r]] -= 1.0;
                    row *= k * weights[targets[r]];
                }
                acc(*a, d);
            }
        }
    }
}

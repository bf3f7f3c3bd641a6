use gridcascade_autodiff::{Mat, Result, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_shape_simple_fn((r, c), || rng.gen_range(-1.5..1.5))
}

/// Reduces an arbitrary output to a scalar with fixed random weights so every
/// output entry contributes a distinct coefficient.
fn probe(t: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = t.shape(out);
    let w = t.constant(random(&mut rng, r, c))?;
    let p = t.mul(out, w)?;
    t.sum(p)
}

/// Compares analytic gradients with central differences for every input entry.
fn check(name: &str, inputs: &[Mat], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let eval = |xs: &[Mat]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.var(x.clone()).unwrap()).collect();
        let out = f(&mut t, &vars).unwrap();
        let loss = if t.shape(out) == (1, 1) { out } else { probe(&mut t, out, 99).unwrap() };
        t.scalar(loss)
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.var(x.clone()).unwrap()).collect();
    let out = f(&mut t, &vars).unwrap();
    let loss = if t.shape(out) == (1, 1) { out } else { probe(&mut t, out, 99).unwrap() };
    let grads = t.backward(loss).unwrap();
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]);
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut plus = inputs.to_vec();
            plus[k][[r, c]] += H;
            let mut minus = inputs.to_vec();
            minus[k][[r, c]] -= H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let err = (analytic[[r, c]] - fd).abs() / fd.abs().max(1.0);
            assert!(err < 1e-4, "{name}: input {k} entry ({r},{c}): analytic {} vs fd {fd}", analytic[[r, c]]);
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn matmul_and_broadcast_arithmetic() {
    let mut g = rng(1);
    let (a, b) = (random(&mut g, 3, 4), random(&mut g, 4, 2));
    check("matmul", &[a.clone(), b], |t, v| t.matmul(v[0], v[1]));
    for rhs in [random(&mut g, 3, 4), random(&mut g, 1, 4), random(&mut g, 3, 1), random(&mut g, 1, 1)] {
        check("add", &[a.clone(), rhs.clone()], |t, v| t.add(v[0], v[1]));
        check("sub", &[a.clone(), rhs.clone()], |t, v| t.sub(v[0], v[1]));
        check("mul", &[a.clone(), rhs.clone()], |t, v| t.mul(v[0], v[1]));
    }
    check("scale", std::slice::from_ref(&a), |t, v| t.scale(v[0], -2.5));
    check("square via mul", &[a], |t, v| t.mul(v[0], v[0]));
}

#[test]
fn structural_ops() {
    let mut g = rng(2);
    let (a, b) = (random(&mut g, 3, 2), random(&mut g, 3, 3));
    check("concat_cols", &[a.clone(), b.clone()], |t, v| t.concat_cols(&[v[0], v[1], v[0]]));
    let c = random(&mut g, 2, 2);
    check("concat_rows", &[a.clone(), c], |t, v| t.concat_rows(&[v[0], v[1]]));
    check("slice_cols", std::slice::from_ref(&b), |t, v| t.slice_cols(v[0], 1, 3));
    check("transpose", std::slice::from_ref(&b), |t, v| t.transpose(v[0]));
    check("gather_rows", std::slice::from_ref(&b), |t, v| t.gather_rows(v[0], &[2, 0, 2, 1, 2]));
    check("scatter_add_rows", std::slice::from_ref(&b), |t, v| t.scatter_add_rows(v[0], &[1, 3, 1], 4));
    check("segment_max", &[random(&mut g, 6, 3)], |t, v| t.segment_max(v[0], &[0, 2, 0, 2, 2, 0], 4));
    check("sum", std::slice::from_ref(&b), |t, v| t.sum(v[0]));
    check("mean", std::slice::from_ref(&b), |t, v| t.mean(v[0]));
    check("row_sum", std::slice::from_ref(&b), |t, v| t.row_sum(v[0]));
    check("l2_norm_sq", &[b], |t, v| t.l2_norm_sq(v[0]));
}

#[test]
fn activations_and_normalisers() {
    let mut g = rng(3);
    let a = random(&mut g, 4, 5);
    check("relu", std::slice::from_ref(&a), |t, v| t.relu(v[0]));
    check("gelu", std::slice::from_ref(&a), |t, v| t.gelu(v[0]));
    check("tanh", std::slice::from_ref(&a), |t, v| t.tanh(v[0]));
    check("sigmoid", std::slice::from_ref(&a), |t, v| t.sigmoid(v[0]));
    check("softmax_rows", std::slice::from_ref(&a), |t, v| t.softmax_rows(v[0]));
    check("segment_softmax", &[random(&mut g, 7, 3)], |t, v| t.segment_softmax(v[0], &[1, 0, 1, 1, 2, 0, 1], 3));
    check("layer_norm", std::slice::from_ref(&a), |t, v| t.layer_norm(v[0]));
    check("dropout", &[a], |t, v| t.dropout(v[0], 0.3, &mut rng(17)));
}

#[test]
fn losses() {
    let mut g = rng(4);
    let x = random(&mut g, 5, 3);
    let target = Mat::from_shape_fn((5, 3), |(r, c)| ((r + c) % 2) as f64);
    check("mse", std::slice::from_ref(&x), |t, v| t.mse(v[0], &target.mapv(|y| y * 0.7)));
    check("bce", std::slice::from_ref(&x), |t, v| t.bce_with_logits(v[0], &target, 4.0));
    check("bce unit weight", std::slice::from_ref(&x), |t, v| t.bce_with_logits(v[0], &target, 1.0));
    check("cross_entropy", &[x], |t, v| t.cross_entropy(v[0], &[0, 2, 1, 1, 0], &[0.5, 2.0, 1.25]));
}

#[test]
fn composite_attention_block() {
    // edge-modulated attention with scatter aggregation, as used by the encoder
    let mut g = rng(5);
    let (src, dst) = (vec![0, 1, 2, 3, 1, 4, 0, 2], vec![1, 0, 3, 2, 4, 1, 2, 0]);
    let inputs = [random(&mut g, 5, 4), random(&mut g, 8, 4), random(&mut g, 4, 4), random(&mut g, 4, 4), random(&mut g, 1, 4)];
    check("attention", &inputs, |t, v| {
        let q = t.matmul(v[0], v[2])?;
        let k = t.matmul(v[0], v[3])?;
        let qe = t.gather_rows(q, &dst)?;
        let ke = t.gather_rows(k, &src)?;
        let key = t.add(ke, v[1])?;
        let prod = t.mul(qe, key)?;
        let s = t.row_sum(prod)?;
        let a = t.segment_softmax(s, &dst, 5)?;
        let vals = t.gather_rows(v[0], &src)?;
        let weighted = t.mul(vals, a)?;
        let agg = t.scatter_add_rows(weighted, &dst, 5)?;
        let biased = t.add(agg, v[4])?;
        let h = t.gelu(biased)?;
        let n = t.layer_norm(h)?;
        let sq = t.l2_norm_sq(n)?;
        t.mean(sq)
    });
}

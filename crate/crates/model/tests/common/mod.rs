#![allow(dead_code)]

use gridcascade::cascade::Termination;
use gridcascade::dataset::{GraphSample, RoundLabels, EDGE_BINARY_COLS, EDGE_DIM, EDGE_STATUS_COL, NODE_BINARY_COLS, NODE_DIM};
use gridcascade_model::{ModelConfig, MultiRoundConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Branches as undirected pairs: a ring plus chords.
pub fn branches(n: usize, chords: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    for c in 0..chords {
        out.push((c % n, (c + n / 2) % n));
    }
    out
}

/// Random normalized-looking sample over the given branches with two rounds of labels.
pub fn sample(n: usize, branches: &[(usize, usize)], seed: u64) -> GraphSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let node_features: Vec<[f64; NODE_DIM]> = (0..n)
        .map(|_| {
            let mut row = [0.0; NODE_DIM];
            for (c, v) in row.iter_mut().enumerate() {
                *v = if NODE_BINARY_COLS.contains(&c) { f64::from(u8::from(rng.gen_bool(0.3))) } else { rng.gen_range(-1.5..1.5) };
            }
            row[NODE_BINARY_COLS[2]] = 0.0;
            row
        })
        .collect();
    let mut edge_features = Vec::new();
    let mut edge_index = Vec::new();
    for &(a, b) in branches {
        let mut row = [0.0; EDGE_DIM];
        for (c, v) in row.iter_mut().enumerate() {
            *v = if EDGE_BINARY_COLS.contains(&c) { 0.0 } else { rng.gen_range(-1.5..1.5) };
        }
        row[EDGE_STATUS_COL] = 1.0;
        edge_features.push(row);
        edge_features.push(row);
        edge_index.push([a, b]);
        edge_index.push([b, a]);
    }
    let m = branches.len();
    let mut rounds = Vec::new();
    let mut y_edge = vec![0u8; 2 * m];
    let mut y_node = vec![0u8; n];
    for _ in 0..2 {
        let mut re = vec![0u8; 2 * m];
        let mut rn = vec![0u8; n];
        for k in 0..m {
            if y_edge[2 * k] == 0 && rng.gen_bool(0.2) {
                re[2 * k] = 1;
                re[2 * k + 1] = 1;
                y_edge[2 * k] = 1;
                y_edge[2 * k + 1] = 1;
            }
        }
        for i in 0..n {
            if y_node[i] == 0 && rng.gen_bool(0.15) {
                rn[i] = 1;
                y_node[i] = 1;
            }
        }
        rounds.push(RoundLabels { y_edge: re, y_node: rn });
    }
    let y_dns = rng.gen_range(0.0..0.3);
    GraphSample {
        node_features,
        edge_features,
        edge_index,
        y_edge,
        y_node,
        y_sev: u8::from(y_dns >= 0.05),
        y_dns,
        rounds,
        operating_point_id: seed,
        load_factor: 1.0,
        initial_outage: vec![0],
        terminated_by: Termination::Quiescent,
    }
}

pub fn small(n: usize, seed: u64) -> GraphSample {
    sample(n, &branches(n, 2), seed)
}

/// Small configuration with dropout disabled.
pub fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig { hidden_dim: 8, layers: 2, heads: 2, dropout: 0.0, variant, ..ModelConfig::default() }
}

pub fn tiny_multi(variant: Variant, rounds: usize) -> ModelConfig {
    ModelConfig { multi_round: Some(MultiRoundConfig { rounds, beta: 0.95 }), ..tiny(variant) }
}

pub fn assert_close(a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>, tol: f64, what: &str) {
    assert_eq!(a.dim(), b.dim(), "{what}: shape");
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{what}: {x} vs {y}");
    }
}

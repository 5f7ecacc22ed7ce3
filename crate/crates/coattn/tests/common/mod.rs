//! Naive reference implementations shared by the oracle and acceptance
//! suites. Plain nested `Vec<Vec<f64>>` loops written from the defining
//! formulas, independent of the crate's kernels.
#![allow(clippy::needless_range_loop, dead_code)]

use coattn::attention::AttentionBlock;
use coattn::numerics::matrix::Matrix;
use coattn::numerics::param::{ParamId, ParamStore};
use coattn::numerics::LAYER_NORM_EPSILON;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Grid = Vec<Vec<f64>>;

pub fn random_grid(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Grid {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn to_matrix(g: &Grid) -> Matrix {
    Matrix::from_rows(g).unwrap()
}

pub fn from_matrix(m: &Matrix) -> Grid {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn naive_matmul(a: &Grid, b: &Grid) -> Grid {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i][l] * b[l][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn naive_transpose(a: &Grid) -> Grid {
    let (n, m) = (a.len(), a[0].len());
    (0..m).map(|j| (0..n).map(|i| a[i][j]).collect()).collect()
}

pub fn naive_softmax_rows(a: &Grid) -> Grid {
    a.iter()
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.iter().map(|e| e / z).collect()
        })
        .collect()
}

pub fn naive_layer_norm(a: &Grid, gamma: &[f64], beta: &[f64]) -> Grid {
    a.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LAYER_NORM_EPSILON).sqrt();
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) * inv * gamma[c] + beta[c])
                .collect()
        })
        .collect()
}

pub fn naive_attention(q: &Grid, k: &Grid, v: &Grid) -> Grid {
    let d_k = q[0].len() as f64;
    let mut logits = naive_matmul(q, &naive_transpose(k));
    for row in &mut logits {
        for x in row.iter_mut() {
            *x /= d_k.sqrt();
        }
    }
    naive_matmul(&naive_softmax_rows(&logits), v)
}

pub fn naive_add(a: &Grid, b: &Grid) -> Grid {
    a.iter()
        .zip(b)
        .map(|(r1, r2)| r1.iter().zip(r2).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn assert_close(actual: &Matrix, expected: &Grid, tol: f64) {
    let actual = from_matrix(actual);
    assert_eq!(actual.len(), expected.len());
    for (ra, re) in actual.iter().zip(expected) {
        for (a, e) in ra.iter().zip(re) {
            assert!((a - e).abs() < tol, "got {a}, expected {e}");
        }
    }
}

pub fn value(store: &ParamStore, id: ParamId) -> Grid {
    from_matrix(store.value(id))
}

pub fn row(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.value(id).row(0).to_vec()
}

/// Reference forward of one attention block: LN, q/k/v projections,
/// per-head attention, concat + output projection, residual, closing LN.
pub fn naive_block_forward(
    store: &ParamStore,
    block: &AttentionBlock,
    target: &Grid,
    guide: &Grid,
) -> Grid {
    let gamma = row(store, block.proj.ln_scale);
    let beta = row(store, block.proj.ln_shift);
    let nt = naive_layer_norm(target, &gamma, &beta);
    let ng = naive_layer_norm(guide, &gamma, &beta);
    let q = naive_matmul(&ng, &value(store, block.proj.w_q));
    let k = naive_matmul(&nt, &value(store, block.proj.w_k));
    let v = naive_matmul(&nt, &value(store, block.proj.w_v));

    let mut heads = Vec::new();
    for head in &block.mh.heads {
        let qi = naive_matmul(&q, &value(store, head.w_q));
        let ki = naive_matmul(&k, &value(store, head.w_k));
        let vi = naive_matmul(&v, &value(store, head.w_v));
        heads.push(naive_attention(&qi, &ki, &vi));
    }
    let concat: Grid = (0..q.len())
        .map(|r| heads.iter().flat_map(|h| h[r].clone()).collect())
        .collect();
    let fused = naive_matmul(&concat, &value(store, block.mh.w_o));
    let with_residual = naive_add(&fused, guide);
    naive_layer_norm(
        &with_residual,
        &row(store, block.post_scale),
        &row(store, block.post_shift),
    )
}

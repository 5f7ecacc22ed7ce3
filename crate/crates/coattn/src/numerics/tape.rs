//! Reverse-mode differentiation over matrix operations.
//!
//! Forward calls record one node per primitive onto a linear tape; the
//! backward pass walks the tape in exact reverse order and accumulates
//! gradients additively, so a value consumed twice receives the sum of both
//! contributions. Nodes can only reference earlier nodes, which makes the
//! reverse index walk a valid reverse topological order.

use crate::error::{Error, Result};
use crate::numerics::matrix::{self, Matrix};
use crate::numerics::param::{ParamId, ParamStore};
use std::collections::HashMap;

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Constant input; receives a gradient but forwards it nowhere.
    Input,
    /// Leaf bound to a store parameter; backward accumulates into the store.
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        epsilon: f64,
    },
    MeanRows(Var),
    BroadcastRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    NormalizeRows(Var),
    SumAll(Var),
    /// Temperature-scaled contrastive loss over a square similarity matrix,
    /// positives on the diagonal, reduced to the batch mean.
    NtXent {
        sim: Var,
        temperature: f64,
        include_positive: bool,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Wengert list holding forward values and enough structure to differentiate.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
    param_leaves: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_leaves: HashMap::new(),
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Gradient of the most recent `backward` target with respect to `v`.
    /// `None` when `v` did not influence the loss.
    pub fn gradient(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input)
    }

    /// Bind a store parameter as a leaf. Repeated binds of the same id share
    /// one node so the forward value is only copied once.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_leaves.get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.param_leaves.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matrix::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matrix::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMulNT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matrix::add(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = matrix::scale(self.value(a), c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = matrix::softmax_rows(self.value(x));
        self.push(value, Op::SoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, epsilon: f64) -> Result<Var> {
        let value =
            matrix::layer_norm_rows(self.value(x), self.value(gamma), self.value(beta), epsilon)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                epsilon,
            },
        ))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let value = matrix::mean_rows(self.value(x))?;
        Ok(self.push(value, Op::MeanRows(x)))
    }

    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let value = matrix::broadcast_rows(self.value(x), n)?;
        Ok(self.push(value, Op::BroadcastRows(x)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let value = matrix::concat_cols(&values)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let value = matrix::concat_rows(&values)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = matrix::transpose(self.value(x));
        self.push(value, Op::Transpose(x))
    }

    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let value = matrix::normalize_rows(self.value(x))?;
        Ok(self.push(value, Op::NormalizeRows(x)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = matrix::sum_all(self.value(x));
        self.push(value, Op::SumAll(x))
    }

    pub fn nt_xent(&mut self, sim: Var, temperature: f64, include_positive: bool) -> Result<Var> {
        let value = nt_xent_forward(self.value(sim), temperature, include_positive)?;
        Ok(self.push(
            Matrix::from_vec(1, 1, vec![value])?,
            Op::NtXent {
                sim,
                temperature,
                include_positive,
            },
        ))
    }

    /// Propagate gradients from a scalar loss back to every leaf, writing
    /// parameter gradients into `store`. Input-leaf gradients stay queryable
    /// through [`Tape::gradient`].
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward target must be a 1x1 scalar, got {}",
                self.value(loss).shape_string()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].clone() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Input => {}
                Op::Param(id) => {
                    store.accumulate_gradient(id, &g)?;
                }
                Op::MatMul(a, b) => {
                    let ga = matrix::matmul_nt(&g, self.value(b))?;
                    let gb = matrix::matmul(&matrix::transpose(self.value(a)), &g)?;
                    self.accumulate(a, ga)?;
                    self.accumulate(b, gb)?;
                }
                Op::MatMulNT(a, b) => {
                    let ga = matrix::matmul(&g, self.value(b))?;
                    let gb = matrix::matmul(&matrix::transpose(&g), self.value(a))?;
                    self.accumulate(a, ga)?;
                    self.accumulate(b, gb)?;
                }
                Op::Add(a, b) => {
                    self.accumulate(a, g.clone())?;
                    self.accumulate(b, g)?;
                }
                Op::Scale(a, c) => {
                    self.accumulate(a, matrix::scale(&g, c))?;
                }
                Op::SoftmaxRows(x) => {
                    let y = &self.nodes[idx].value;
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols() {
                            gx.set(r, c, yr[c] * (gr[c] - dot));
                        }
                    }
                    self.accumulate(x, gx)?;
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    epsilon,
                } => {
                    let (gx, ggamma, gbeta) =
                        layer_norm_backward(self.value(x), self.value(gamma), epsilon, &g)?;
                    self.accumulate(x, gx)?;
                    self.accumulate(gamma, ggamma)?;
                    self.accumulate(beta, gbeta)?;
                }
                Op::MeanRows(x) => {
                    let n = self.value(x).rows();
                    let gx = matrix::broadcast_rows(&matrix::scale(&g, 1.0 / n as f64), n)?;
                    self.accumulate(x, gx)?;
                }
                Op::BroadcastRows(x) => {
                    let mut gx = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            gx.set(0, c, gx.at(0, c) + g.at(r, c));
                        }
                    }
                    self.accumulate(x, gx)?;
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(p).cols();
                        let mut gp = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            for c in 0..w {
                                gp.set(r, c, g.at(r, offset + c));
                            }
                        }
                        offset += w;
                        self.accumulate(p, gp)?;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let h = self.value(p).rows();
                        let mut gp = Matrix::zeros(h, g.cols());
                        for r in 0..h {
                            for c in 0..g.cols() {
                                gp.set(r, c, g.at(offset + r, c));
                            }
                        }
                        offset += h;
                        self.accumulate(p, gp)?;
                    }
                }
                Op::Transpose(x) => {
                    self.accumulate(x, matrix::transpose(&g))?;
                }
                Op::NormalizeRows(x) => {
                    let xv = self.value(x);
                    let y = &self.nodes[idx].value;
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let norm = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..xv.cols() {
                            gx.set(r, c, (gr[c] - yr[c] * dot) / norm);
                        }
                    }
                    self.accumulate(x, gx)?;
                }
                Op::SumAll(x) => {
                    let s = g.at(0, 0);
                    let shape = self.value(x).shape();
                    let gx = Matrix::from_vec(shape.0, shape.1, vec![s; shape.0 * shape.1])?;
                    self.accumulate(x, gx)?;
                }
                Op::NtXent {
                    sim,
                    temperature,
                    include_positive,
                } => {
                    let gsim = nt_xent_backward(
                        self.value(sim),
                        temperature,
                        include_positive,
                        g.at(0, 0),
                    )?;
                    self.accumulate(sim, gsim)?;
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Matrix) -> Result<()> {
        match &mut self.grads[v.0] {
            Some(existing) => {
                if !existing.same_shape(&g) {
                    return Err(Error::dimension(
                        "gradient accumulation",
                        existing.shape_string(),
                        g.shape_string(),
                    ));
                }
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
        Ok(())
    }
}

/// Batch-mean contrastive loss over a square similarity matrix. For each row
/// `i`, the positive is the diagonal entry and the denominator ranges over
/// `j != i` (or all `j` when `include_positive` is set).
pub fn nt_xent_forward(sim: &Matrix, temperature: f64, include_positive: bool) -> Result<f64> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let b = sim.rows();
    if sim.cols() != b {
        return Err(Error::Contract(format!(
            "similarity matrix must be square, got {}",
            sim.shape_string()
        )));
    }
    if b == 0 || (!include_positive && b < 2) {
        return Err(Error::Contract(format!(
            "batch of {b} is too small for the requested denominator mode"
        )));
    }
    let mut total = 0.0;
    for i in 0..b {
        let mut max = f64::NEG_INFINITY;
        for j in 0..b {
            if !include_positive && j == i {
                continue;
            }
            max = max.max(sim.at(i, j) / temperature);
        }
        let mut sum = 0.0;
        for j in 0..b {
            if !include_positive && j == i {
                continue;
            }
            sum += (sim.at(i, j) / temperature - max).exp();
        }
        let lse = max + sum.ln();
        total += -sim.at(i, i) / temperature + lse;
    }
    Ok(total / b as f64)
}

fn nt_xent_backward(
    sim: &Matrix,
    temperature: f64,
    include_positive: bool,
    upstream: f64,
) -> Result<Matrix> {
    let b = sim.rows();
    let mut g = Matrix::zeros(b, b);
    let coeff = upstream / (b as f64 * temperature);
    for i in 0..b {
        let mut max = f64::NEG_INFINITY;
        for j in 0..b {
            if !include_positive && j == i {
                continue;
            }
            max = max.max(sim.at(i, j) / temperature);
        }
        let mut sum = 0.0;
        for j in 0..b {
            if !include_positive && j == i {
                continue;
            }
            sum += (sim.at(i, j) / temperature - max).exp();
        }
        for j in 0..b {
            let p = if !include_positive && j == i {
                0.0
            } else {
                (sim.at(i, j) / temperature - max).exp() / sum
            };
            let delta = if j == i { 1.0 } else { 0.0 };
            g.set(i, j, coeff * (p - delta));
        }
    }
    Ok(g)
}

fn layer_norm_backward(
    x: &Matrix,
    gamma: &Matrix,
    epsilon: f64,
    g: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    let d = x.cols();
    let df = d as f64;
    let mut gx = Matrix::zeros(x.rows(), d);
    let mut ggamma = Matrix::zeros(gamma.rows(), gamma.cols());
    let mut gbeta = Matrix::zeros(gamma.rows(), gamma.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / df;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
        let inv = 1.0 / (var + epsilon).sqrt();
        // normalized activations and the gamma-scaled upstream gradient
        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
        let gh: Vec<f64> = (0..d).map(|c| g.at(r, c) * gamma.data()[c]).collect();
        let gh_mean = gh.iter().sum::<f64>() / df;
        let ghx_mean = gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / df;
        for c in 0..d {
            gx.set(r, c, inv * (gh[c] - gh_mean - xhat[c] * ghx_mean));
            ggamma.data_mut()[c] += g.at(r, c) * xhat[c];
            gbeta.data_mut()[c] += g.at(r, c);
        }
    }
    Ok((gx, ggamma, gbeta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn sum_of_parameter_has_all_ones_gradient() {
        let mut store = ParamStore::new();
        let id = store.register("p", Matrix::from_rows(&[vec![2.0, -3.0], vec![0.5, 1.0]]).unwrap());
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let loss = tape.sum_all(p);
        tape.backward(loss, &mut store).unwrap();
        assert!(store.gradient(id).data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn dead_branch_gradient_is_zero() {
        let mut store = ParamStore::new();
        let id = store.register("p", Matrix::identity(2));
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let s = tape.sum_all(p);
        let loss = tape.scale(s, 0.0);
        tape.backward(loss, &mut store).unwrap();
        assert!(store.gradient(id).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unreachable_parameter_keeps_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.register("used", Matrix::identity(2));
        let unused = store.register("unused", Matrix::identity(2));
        let mut tape = Tape::new();
        let p = tape.param(&store, used);
        let loss = tape.sum_all(p);
        tape.backward(loss, &mut store).unwrap();
        assert!(store.gradient(used).data().iter().any(|v| *v != 0.0));
        assert!(store.gradient(unused).data().iter().all(|v| *v == 0.0));
        let _ = unused;
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut store = ParamStore::new();
        let id = store.register("p", Matrix::identity(2));
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let err = tape.backward(p, &mut store).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn double_use_gradient_is_sum_of_single_uses() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_matrix(&mut rng, 2, 3);
        let y = random_matrix(&mut rng, 2, 3);
        let pval = random_matrix(&mut rng, 3, 3);

        let single_use = |other: &Matrix| -> Matrix {
            let mut store = ParamStore::new();
            let id = store.register("p", pval.clone());
            let mut tape = Tape::new();
            let p = tape.param(&store, id);
            let a = tape.input(other.clone());
            let prod = tape.matmul(a, p).unwrap();
            let loss = tape.sum_all(prod);
            tape.backward(loss, &mut store).unwrap();
            store.gradient(id).clone()
        };

        let gx = single_use(&x);
        let gy = single_use(&y);

        let mut store = ParamStore::new();
        let id = store.register("p", pval.clone());
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let a = tape.input(x.clone());
        let b = tape.input(y.clone());
        let pa = tape.matmul(a, p).unwrap();
        let pb = tape.matmul(b, p).unwrap();
        let both = tape.add(pa, pb).unwrap();
        let loss = tape.sum_all(both);
        tape.backward(loss, &mut store).unwrap();

        for (combined, (a, b)) in store
            .gradient(id)
            .data()
            .iter()
            .zip(gx.data().iter().zip(gy.data()))
        {
            assert_eq!(*combined, a + b);
        }
    }

    /// Central finite differences on a scalar function of one input leaf.
    fn finite_difference_check<F>(input: Matrix, build: F)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let h = 1e-5;
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input(input.clone());
        let loss = build(&mut tape, x);
        tape.backward(loss, &mut store).unwrap();
        let analytic = tape.gradient(x).unwrap().clone();

        for i in 0..input.data().len() {
            let mut plus = input.clone();
            plus.data_mut()[i] += h;
            let mut minus = input.clone();
            minus.data_mut()[i] -= h;
            let eval = |m: Matrix| {
                let mut t = Tape::new();
                let v = t.input(m);
                let l = build(&mut t, v);
                t.value(l).scalar().unwrap()
            };
            let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            assert!(
                rel < 1e-6,
                "entry {i}: analytic {a} vs numeric {numeric} (rel {rel})"
            );
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 3, 4);
        let w = random_matrix(&mut rng, 3, 4);
        finite_difference_check(x, |tape, v| {
            let y = tape.softmax_rows(v);
            let weights = tape.input(w.clone());
            let prod = tape.matmul_nt(y, weights).unwrap();
            tape.sum_all(prod)
        });
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_matrix(&mut rng, 3, 5);
        let gamma = random_matrix(&mut rng, 1, 5);
        let beta = random_matrix(&mut rng, 1, 5);
        let w = random_matrix(&mut rng, 3, 5);
        finite_difference_check(x, |tape, v| {
            let g = tape.input(gamma.clone());
            let b = tape.input(beta.clone());
            let y = tape.layer_norm(v, g, b, 1e-5).unwrap();
            let weights = tape.input(w.clone());
            let prod = tape.matmul_nt(y, weights).unwrap();
            tape.sum_all(prod)
        });
    }

    #[test]
    fn normalize_rows_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_matrix(&mut rng, 2, 4);
        let w = random_matrix(&mut rng, 2, 4);
        finite_difference_check(x, |tape, v| {
            let y = tape.normalize_rows(v).unwrap();
            let weights = tape.input(w.clone());
            let prod = tape.matmul_nt(y, weights).unwrap();
            tape.sum_all(prod)
        });
    }

    #[test]
    fn nt_xent_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for include_positive in [false, true] {
            let sim = random_matrix(&mut rng, 4, 4);
            finite_difference_check(sim, |tape, v| {
                tape.nt_xent(v, 0.2, include_positive).unwrap()
            });
        }
    }

    #[test]
    fn composite_graph_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_matrix(&mut rng, 3, 4);
        let w = random_matrix(&mut rng, 4, 4);
        finite_difference_check(x, |tape, v| {
            let wv = tape.input(w.clone());
            let proj = tape.matmul(v, wv).unwrap();
            let scaled = tape.scale(proj, 0.5);
            let soft = tape.softmax_rows(scaled);
            let pooled = tape.mean_rows(soft).unwrap();
            let spread = tape.broadcast_rows(pooled, 3).unwrap();
            let merged = tape.add(spread, v).unwrap();
            let normed = tape.normalize_rows(merged).unwrap();
            let sim = tape.matmul_nt(normed, normed).unwrap();
            tape.nt_xent(sim, 0.5, false).unwrap()
        });
    }

    #[test]
    fn nt_xent_literal_requires_two_samples() {
        let sim = Matrix::from_vec(1, 1, vec![0.5]).unwrap();
        assert!(matches!(
            nt_xent_forward(&sim, 1.0, false),
            Err(Error::Contract(_))
        ));
        assert!(nt_xent_forward(&sim, 1.0, true).is_ok());
    }

    #[test]
    fn nt_xent_rejects_nonpositive_temperature() {
        let sim = Matrix::identity(2);
        assert!(matches!(
            nt_xent_forward(&sim, 0.0, false),
            Err(Error::Config(_))
        ));
    }
}

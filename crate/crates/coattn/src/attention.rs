//! Scaled dot-product attention, self-attention and guided-attention blocks,
//! and multi-head fusion.
//!
//! Every block follows the same shape: the input(s) are layer-normalized and
//! projected to queries/keys/values, fused through multi-head attention, and
//! the query-side input is added back as a residual before a final layer
//! normalization. A guided block draws its queries from one modality and its
//! keys/values from the other; a self-attention block is the special case
//! where both sides are the same matrix.

use crate::error::{Error, Result};
use crate::numerics::matrix::{self, Matrix};
use crate::numerics::param::{uniform_weight, ParamId, ParamStore};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::LAYER_NORM_EPSILON;
use rand::Rng;

/// Layer-norm affine plus the query/key/value projections of one block.
/// The same normalization parameters are applied to both the query-side and
/// key/value-side inputs of a guided block.
#[derive(Debug, Clone)]
pub struct ProjectionSet {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub ln_scale: ParamId,
    pub ln_shift: ParamId,
}

impl ProjectionSet {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut R) -> Self {
        ProjectionSet {
            w_q: store.register(format!("{prefix}.w_q"), uniform_weight(rng, dim, dim)),
            w_k: store.register(format!("{prefix}.w_k"), uniform_weight(rng, dim, dim)),
            w_v: store.register(format!("{prefix}.w_v"), uniform_weight(rng, dim, dim)),
            ln_scale: store.register(
                format!("{prefix}.ln_scale"),
                Matrix::from_vec(1, dim, vec![1.0; dim]).expect("shape"),
            ),
            ln_shift: store.register(format!("{prefix}.ln_shift"), Matrix::zeros(1, dim)),
        }
    }
}

/// Per-head projections (`d x d_m` each) plus the output projection
/// (`h*d_m x d`) that folds concatenated heads back to the model dimension.
#[derive(Debug, Clone)]
pub struct MultiHeadParams {
    pub heads: Vec<HeadParams>,
    pub w_o: ParamId,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

impl MultiHeadParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let head_dim = head_dim(dim, heads)?;
        let mut head_params = Vec::with_capacity(heads);
        for i in 0..heads {
            head_params.push(HeadParams {
                w_q: store.register(
                    format!("{prefix}.head{i}.w_q"),
                    uniform_weight(rng, dim, head_dim),
                ),
                w_k: store.register(
                    format!("{prefix}.head{i}.w_k"),
                    uniform_weight(rng, dim, head_dim),
                ),
                w_v: store.register(
                    format!("{prefix}.head{i}.w_v"),
                    uniform_weight(rng, dim, head_dim),
                ),
            });
        }
        let w_o = store.register(
            format!("{prefix}.w_o"),
            uniform_weight(rng, heads * head_dim, dim),
        );
        Ok(MultiHeadParams {
            heads: head_params,
            w_o,
        })
    }
}

/// Per-head feature width; the head count must divide the model dimension.
pub fn head_dim(dim: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "head count {heads} must divide feature dimension {dim}"
        )));
    }
    Ok(dim / heads)
}

/// Cascade outputs for one audio/text pair: `n x d` attended audio frames
/// and a `1 x d` attended text vector sharing the feature dimension.
#[derive(Debug, Clone)]
pub struct AttendedFeatures {
    pub audio: Matrix,
    pub text: Matrix,
}

impl AttendedFeatures {
    pub fn new(audio: Matrix, text: Matrix) -> Result<Self> {
        if audio.cols() != text.cols() {
            return Err(Error::dimension(
                "attended features",
                audio.shape_string(),
                text.shape_string(),
            ));
        }
        Ok(AttendedFeatures { audio, text })
    }

    pub fn dim(&self) -> usize {
        self.audio.cols()
    }
}

/// `softmax(q·kᵀ / sqrt(d_k)) · v` with `d_k` the shared query/key width.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    check_attention_shapes(q, k, v)?;
    let logits = matrix::scale(&matrix::matmul_nt(q, k)?, 1.0 / (q.cols() as f64).sqrt());
    matrix::matmul(&matrix::softmax_rows(&logits), v)
}

/// Taped twin of [`scaled_dot_attention`]; identical arithmetic.
pub fn scaled_dot_attention_t(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    check_attention_shapes(tape.value(q), tape.value(k), tape.value(v))?;
    let d_k = tape.value(q).cols() as f64;
    let raw = tape.matmul_nt(q, k)?;
    let logits = tape.scale(raw, 1.0 / d_k.sqrt());
    let weights = tape.softmax_rows(logits);
    tape.matmul(weights, v)
}

fn check_attention_shapes(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::dimension(
            "scaled_dot_attention q/k",
            q.shape_string(),
            k.shape_string(),
        ));
    }
    if k.rows() != v.rows() {
        return Err(Error::dimension(
            "scaled_dot_attention k/v",
            k.shape_string(),
            v.shape_string(),
        ));
    }
    Ok(())
}

/// Layer-normalize `x` and project it to (q, k, v); shapes are preserved as
/// `rows x d`.
pub fn project_qkv(
    store: &ParamStore,
    proj: &ProjectionSet,
    x: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    let normed = matrix::layer_norm_rows(
        x,
        store.value(proj.ln_scale),
        store.value(proj.ln_shift),
        LAYER_NORM_EPSILON,
    )?;
    Ok((
        matrix::matmul(&normed, store.value(proj.w_q))?,
        matrix::matmul(&normed, store.value(proj.w_k))?,
        matrix::matmul(&normed, store.value(proj.w_v))?,
    ))
}

pub fn project_qkv_t(
    tape: &mut Tape,
    store: &ParamStore,
    proj: &ProjectionSet,
    x: Var,
) -> Result<(Var, Var, Var)> {
    let gamma = tape.param(store, proj.ln_scale);
    let beta = tape.param(store, proj.ln_shift);
    let normed = tape.layer_norm(x, gamma, beta, LAYER_NORM_EPSILON)?;
    let w_q = tape.param(store, proj.w_q);
    let w_k = tape.param(store, proj.w_k);
    let w_v = tape.param(store, proj.w_v);
    Ok((
        tape.matmul(normed, w_q)?,
        tape.matmul(normed, w_k)?,
        tape.matmul(normed, w_v)?,
    ))
}

/// Multi-head attention: each head projects the sources to its own `d_m`
/// subspace, attends with scale `sqrt(d_m)`, and the concatenated head
/// outputs are projected back to `d` by `w_o`.
pub fn multi_head(
    store: &ParamStore,
    mh: &MultiHeadParams,
    q_src: &Matrix,
    k_src: &Matrix,
    v_src: &Matrix,
) -> Result<Matrix> {
    let mut outputs = Vec::with_capacity(mh.heads.len());
    for head in &mh.heads {
        let q = matrix::matmul(q_src, store.value(head.w_q))?;
        let k = matrix::matmul(k_src, store.value(head.w_k))?;
        let v = matrix::matmul(v_src, store.value(head.w_v))?;
        outputs.push(scaled_dot_attention(&q, &k, &v)?);
    }
    let refs: Vec<&Matrix> = outputs.iter().collect();
    matrix::matmul(&matrix::concat_cols(&refs)?, store.value(mh.w_o))
}

pub fn multi_head_t(
    tape: &mut Tape,
    store: &ParamStore,
    mh: &MultiHeadParams,
    q_src: Var,
    k_src: Var,
    v_src: Var,
) -> Result<Var> {
    let mut outputs = Vec::with_capacity(mh.heads.len());
    for head in &mh.heads {
        let w_q = tape.param(store, head.w_q);
        let w_k = tape.param(store, head.w_k);
        let w_v = tape.param(store, head.w_v);
        let q = tape.matmul(q_src, w_q)?;
        let k = tape.matmul(k_src, w_k)?;
        let v = tape.matmul(v_src, w_v)?;
        outputs.push(scaled_dot_attention_t(tape, q, k, v)?);
    }
    let concat = tape.concat_cols(&outputs)?;
    let w_o = tape.param(store, mh.w_o);
    tape.matmul(concat, w_o)
}

/// One attention block: projection set, multi-head fusion, residual from the
/// query-side input, and a closing layer normalization. `residual: false`
/// drops the residual add while keeping the final normalization.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub proj: ProjectionSet,
    pub mh: MultiHeadParams,
    pub post_scale: ParamId,
    pub post_shift: ParamId,
    pub residual: bool,
}

impl AttentionBlock {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        residual: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let proj = ProjectionSet::init(store, prefix, dim, rng);
        let mh = MultiHeadParams::init(store, prefix, dim, heads, rng)?;
        let post_scale = store.register(
            format!("{prefix}.post_scale"),
            Matrix::from_vec(1, dim, vec![1.0; dim]).expect("shape"),
        );
        let post_shift = store.register(format!("{prefix}.post_shift"), Matrix::zeros(1, dim));
        Ok(AttentionBlock {
            proj,
            mh,
            post_scale,
            post_shift,
            residual,
        })
    }

    /// Guided attention: queries from `guide`, keys/values from `target`,
    /// residual from `guide`. Output has `guide.rows` rows. Passing the same
    /// variable for both sides yields self-attention bit for bit.
    pub fn guided_forward_t(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        target: Var,
        guide: Var,
    ) -> Result<Var> {
        let gamma = tape.param(store, self.proj.ln_scale);
        let beta = tape.param(store, self.proj.ln_shift);
        let normed_target = tape.layer_norm(target, gamma, beta, LAYER_NORM_EPSILON)?;
        let normed_guide = if guide == target {
            normed_target
        } else {
            tape.layer_norm(guide, gamma, beta, LAYER_NORM_EPSILON)?
        };
        let w_q = tape.param(store, self.proj.w_q);
        let w_k = tape.param(store, self.proj.w_k);
        let w_v = tape.param(store, self.proj.w_v);
        let q = tape.matmul(normed_guide, w_q)?;
        let k = tape.matmul(normed_target, w_k)?;
        let v = tape.matmul(normed_target, w_v)?;
        let fused = multi_head_t(tape, store, &self.mh, q, k, v)?;
        let pre_norm = if self.residual {
            tape.add(fused, guide)?
        } else {
            fused
        };
        let post_scale = tape.param(store, self.post_scale);
        let post_shift = tape.param(store, self.post_shift);
        tape.layer_norm(pre_norm, post_scale, post_shift, LAYER_NORM_EPSILON)
    }

    pub fn self_forward_t(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.guided_forward_t(tape, store, x, x)
    }

    /// Value-level wrapper around [`AttentionBlock::guided_forward_t`].
    pub fn guided_forward(
        &self,
        store: &ParamStore,
        target: &Matrix,
        guide: &Matrix,
    ) -> Result<Matrix> {
        let mut tape = Tape::new();
        let t = tape.input(target.clone());
        let g = if guide == target { t } else { tape.input(guide.clone()) };
        let out = self.guided_forward_t(&mut tape, store, t, g)?;
        Ok(tape.value(out).clone())
    }

    pub fn self_forward(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        self.guided_forward(store, x, x)
    }
}

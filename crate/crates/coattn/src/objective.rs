//! Joint-space projection, cosine similarity, and the bidirectional
//! temperature-scaled contrastive loss.

use crate::attention::AttendedFeatures;
use crate::error::{Error, Result};
use crate::numerics::matrix::{self, Matrix};
use crate::numerics::param::{uniform_weight, ParamId, ParamStore};
use crate::numerics::tape::{nt_xent_forward, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Linear maps from the attended feature space into the shared joint space.
#[derive(Debug, Clone)]
pub struct JointProjection {
    pub l_a: ParamId,
    pub l_t: ParamId,
    pub joint_dim: usize,
}

impl JointProjection {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        dim: usize,
        joint_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if joint_dim == 0 {
            return Err(Error::Config("joint dimension must be positive".into()));
        }
        Ok(JointProjection {
            l_a: store.register("joint.l_a", uniform_weight(rng, dim, joint_dim)),
            l_t: store.register("joint.l_t", uniform_weight(rng, dim, joint_dim)),
            joint_dim,
        })
    }
}

/// How the contrastive denominator treats the positive pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorMode {
    /// Sum over `j != i` only; the positive is excluded, so the loss can go
    /// negative once the diagonal dominates.
    LiteralExcludePositive,
    /// Sum over all `j`; the conventional nonnegative form.
    IncludePositive,
}

impl DenominatorMode {
    pub fn include_positive(&self) -> bool {
        matches!(self, DenominatorMode::IncludePositive)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DenominatorMode::LiteralExcludePositive => "literal_exclude_positive",
            DenominatorMode::IncludePositive => "include_positive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "literal_exclude_positive" => Ok(DenominatorMode::LiteralExcludePositive),
            "include_positive" => Ok(DenominatorMode::IncludePositive),
            other => Err(Error::Config(format!(
                "unknown denominator mode `{other}` (expected literal_exclude_positive|include_positive)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub lambda: f64,
    pub denominator_mode: DenominatorMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.07,
            lambda: 0.5,
            denominator_mode: DenominatorMode::LiteralExcludePositive,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Square matrix of batch cosine similarities; diagonal entries are the
/// aligned pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(Matrix);

impl SimilarityMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() != values.cols() {
            return Err(Error::Contract(format!(
                "similarity matrix must be square, got {}",
                values.shape_string()
            )));
        }
        const BOUND: f64 = 1.0 + 1e-9;
        for v in values.data() {
            if !(-BOUND..=BOUND).contains(v) {
                return Err(Error::Contract(format!(
                    "similarity {v} outside [-1, 1]"
                )));
            }
        }
        Ok(SimilarityMatrix(values))
    }

    pub fn batch_size(&self) -> usize {
        self.0.rows()
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn transposed(&self) -> SimilarityMatrix {
        SimilarityMatrix(matrix::transpose(&self.0))
    }
}

/// Mean-pool the audio frames, then map both modalities into the joint
/// space. Returns a `1 x joint_dim` vector per modality.
pub fn project_joint(
    store: &ParamStore,
    proj: &JointProjection,
    features: &AttendedFeatures,
) -> Result<(Matrix, Matrix)> {
    let pooled = matrix::mean_rows(&features.audio)?;
    Ok((
        matrix::matmul(&pooled, store.value(proj.l_a))?,
        matrix::matmul(&features.text, store.value(proj.l_t))?,
    ))
}

pub fn project_joint_t(
    tape: &mut Tape,
    store: &ParamStore,
    proj: &JointProjection,
    audio: Var,
    text: Var,
) -> Result<(Var, Var)> {
    let pooled = tape.mean_rows(audio)?;
    let l_a = tape.param(store, proj.l_a);
    let l_t = tape.param(store, proj.l_t);
    Ok((tape.matmul(pooled, l_a)?, tape.matmul(text, l_t)?))
}

/// `x·y / (|x||y|)` over flattened entries; zero norms are rejected rather
/// than silently mapped to 0.
pub fn cosine_similarity(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.data().len() != y.data().len() {
        return Err(Error::dimension(
            "cosine_similarity",
            x.shape_string(),
            y.shape_string(),
        ));
    }
    let nx = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::DegenerateInput(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    let dot: f64 = x.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    Ok(dot / (nx * ny))
}

/// Pairwise cosine similarities for aligned batches: entry `(i, j)` compares
/// `audio[i]` against `text[j]`.
pub fn batch_similarity(audio: &[Matrix], text: &[Matrix]) -> Result<SimilarityMatrix> {
    if audio.len() != text.len() {
        return Err(Error::Contract(format!(
            "batch similarity needs aligned batches, got {} audio vs {} text",
            audio.len(),
            text.len()
        )));
    }
    if audio.is_empty() {
        return Err(Error::Contract("batch similarity over an empty batch".into()));
    }
    let b = audio.len();
    let mut values = Matrix::zeros(b, b);
    for (i, a) in audio.iter().enumerate() {
        for (j, t) in text.iter().enumerate() {
            values.set(i, j, cosine_similarity(a, t)?);
        }
    }
    SimilarityMatrix::new(values)
}

/// Audio-to-text contrastive loss: for each row, contrast the diagonal
/// against that row's other entries, averaged over the batch.
pub fn nt_xent_a2t(sim: &SimilarityMatrix, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    nt_xent_forward(
        sim.values(),
        cfg.temperature,
        cfg.denominator_mode.include_positive(),
    )
}

/// Text-to-audio direction: the same loss over the transposed matrix.
pub fn nt_xent_t2a(sim: &SimilarityMatrix, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    nt_xent_forward(
        &matrix::transpose(sim.values()),
        cfg.temperature,
        cfg.denominator_mode.include_positive(),
    )
}

/// `lambda * L_a2t + (1 - lambda) * L_t2a`.
pub fn combined_loss(sim: &SimilarityMatrix, cfg: &LossConfig) -> Result<f64> {
    Ok(cfg.lambda * nt_xent_a2t(sim, cfg)? + (1.0 - cfg.lambda) * nt_xent_t2a(sim, cfg)?)
}

/// Taped combined loss over a raw (already validated) similarity variable.
pub fn combined_loss_t(tape: &mut Tape, sim: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let include = cfg.denominator_mode.include_positive();
    let a2t = tape.nt_xent(sim, cfg.temperature, include)?;
    let sim_t = tape.transpose(sim);
    let t2a = tape.nt_xent(sim_t, cfg.temperature, include)?;
    let left = tape.scale(a2t, cfg.lambda);
    let right = tape.scale(t2a, 1.0 - cfg.lambda);
    tape.add(left, right)
}

//! Full retrieval model: cascade plus joint projection, with batch loss
//! assembly and pairwise retrieval evaluation.

use crate::cascade::{Cascade, CascadeConfig};
use crate::data::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::eval::{evaluate_rankings, EvalReport, RankingResult, RelevanceSet};
use crate::numerics::matrix::Matrix;
use crate::numerics::param::ParamStore;
use crate::numerics::tape::{Tape, Var};
use crate::objective::{combined_loss_t, cosine_similarity, project_joint_t, JointProjection, LossConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Retrieval direction for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Text queries retrieve audio candidates.
    T2a,
    /// Audio queries retrieve text candidates.
    A2t,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::T2a => "t2a",
            Direction::A2t => "a2t",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "t2a" => Ok(Direction::T2a),
            "a2t" => Ok(Direction::A2t),
            other => Err(Error::Config(format!(
                "unknown direction `{other}` (expected t2a|a2t)"
            ))),
        }
    }
}

/// Cascade, joint projection, and the parameter store they live in.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub cascade: Cascade,
    pub joint: JointProjection,
}

impl Model {
    /// Seeded initialization; identical seeds give bit-identical models.
    pub fn init(cascade_cfg: CascadeConfig, joint_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dim = cascade_cfg.dim;
        let cascade = Cascade::init(&mut store, cascade_cfg, &mut rng)?;
        let joint = JointProjection::init(&mut store, dim, joint_dim, &mut rng)?;
        Ok(Model {
            store,
            cascade,
            joint,
        })
    }

    pub fn dim(&self) -> usize {
        self.cascade.config().dim
    }

    /// Taped joint embeddings for one pair; used by the batch loss.
    pub fn embed_pair_t(
        &self,
        tape: &mut Tape,
        audio: &Matrix,
        text: &Matrix,
    ) -> Result<(Var, Var)> {
        let a = tape.input(audio.clone());
        let t = tape.input(text.clone());
        let (fa, ft) = self.cascade.forward_t(tape, &self.store, a, t)?;
        project_joint_t(tape, &self.store, &self.joint, fa, ft)
    }

    /// Joint embeddings for one pair as plain values.
    pub fn embed_pair(&self, audio: &Matrix, text: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut tape = Tape::new();
        let (ea, et) = self.embed_pair_t(&mut tape, audio, text)?;
        Ok((tape.value(ea).clone(), tape.value(et).clone()))
    }

    /// Retrieval score of a candidate pairing: the co-attention forward is
    /// run on the pair and the joint embeddings are compared by cosine.
    pub fn score_pair(&self, audio: &Matrix, text: &Matrix) -> Result<f64> {
        let (ea, et) = self.embed_pair(audio, text)?;
        cosine_similarity(&ea, &et)
    }

    /// Contrastive batch loss on a tape: every pair is embedded by its own
    /// forward pass, embeddings are stacked and row-normalized, and the
    /// cosine matrix feeds the bidirectional loss.
    pub fn batch_loss_t(
        &self,
        tape: &mut Tape,
        batch: &[(&Matrix, &Matrix)],
        loss_cfg: &LossConfig,
    ) -> Result<Var> {
        if batch.len() < 2 {
            return Err(Error::Contract(format!(
                "contrastive batches need at least 2 pairs, got {}",
                batch.len()
            )));
        }
        let mut audio_vecs = Vec::with_capacity(batch.len());
        let mut text_vecs = Vec::with_capacity(batch.len());
        for (audio, text) in batch {
            let (ea, et) = self.embed_pair_t(tape, audio, text)?;
            audio_vecs.push(ea);
            text_vecs.push(et);
        }
        let a_stack = tape.concat_rows(&audio_vecs)?;
        let t_stack = tape.concat_rows(&text_vecs)?;
        let a_norm = tape.normalize_rows(a_stack)?;
        let t_norm = tape.normalize_rows(t_stack)?;
        let sim = tape.matmul_nt(a_norm, t_norm)?;
        combined_loss_t(tape, sim, loss_cfg)
    }

    /// Plain batch loss value (same arithmetic as the taped path).
    pub fn batch_loss(&self, batch: &[(&Matrix, &Matrix)], loss_cfg: &LossConfig) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.batch_loss_t(&mut tape, batch, loss_cfg)?;
        tape.value(loss).scalar()
    }
}

/// Score every query against every candidate with a full pairwise forward
/// and aggregate mAP@10 / R@k. The co-attention forward needs both
/// modalities, so candidates are scored per query rather than embedded once.
pub fn evaluate_retrieval(
    model: &Model,
    bundle: &EmbeddingBundle,
    direction: Direction,
    binary_recall: bool,
) -> Result<EvalReport> {
    if bundle.dim != model.dim() {
        return Err(Error::Validation(format!(
            "bundle dimension {} does not match model dimension {}",
            bundle.dim,
            model.dim()
        )));
    }
    // query id -> relevant candidate ids, in deterministic order
    let mut relevant: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for (text_id, audio_id) in &bundle.pairs {
        let (query, target) = match direction {
            Direction::T2a => (text_id.as_str(), audio_id.clone()),
            Direction::A2t => (audio_id.as_str(), text_id.clone()),
        };
        relevant.entry(query).or_default().push(target);
    }
    if relevant.is_empty() {
        return Err(Error::Contract("bundle has no relevance pairs".into()));
    }

    let mut results = Vec::with_capacity(relevant.len());
    let mut relevance = Vec::with_capacity(relevant.len());
    for (query_id, targets) in &relevant {
        let mut scored = Vec::new();
        match direction {
            Direction::T2a => {
                let text = bundle
                    .text_by_id(query_id)
                    .ok_or_else(|| Error::Validation(format!("unknown text id `{query_id}`")))?;
                for (audio_id, frames) in &bundle.audio {
                    scored.push((audio_id.clone(), model.score_pair(frames, text)?));
                }
            }
            Direction::A2t => {
                let frames = bundle
                    .audio_by_id(query_id)
                    .ok_or_else(|| Error::Validation(format!("unknown audio id `{query_id}`")))?;
                for (text_id, text) in &bundle.text {
                    scored.push((text_id.clone(), model.score_pair(frames, text)?));
                }
            }
        }
        results.push(RankingResult::from_scores(*query_id, scored));
        relevance.push(RelevanceSet::new(*query_id, targets.iter().cloned())?);
    }
    evaluate_rankings(&results, &relevance, binary_recall)
}

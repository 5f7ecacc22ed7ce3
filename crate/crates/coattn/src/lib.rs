//! Co-attention cross-modal retrieval over precomputed embeddings.
//!
//! The crate trains a co-attention model (self-attention, guided attention,
//! multi-head fusion, and stacking/iterating cascades) with a bidirectional
//! temperature-scaled contrastive objective, then evaluates retrieval with
//! mAP@10 and R@k. Inputs are embedding bundles: per-item audio frame
//! embeddings, text embeddings, and relevance pairs, either read from disk
//! or synthesized.

pub mod attention;
pub mod cascade;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod trainer;

pub use error::{Error, Result};

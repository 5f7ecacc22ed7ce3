//! Dense matrix arithmetic and reverse-mode differentiation.

pub mod matrix;
pub mod param;
pub mod tape;

pub use matrix::Matrix;
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};

/// Default layer-norm epsilon used across the crate.
pub const LAYER_NORM_EPSILON: f64 = 1e-5;

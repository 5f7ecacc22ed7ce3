//! Finite-difference verification of every parameter gradient.
//!
//! Builds a small self-contained model, computes analytic gradients of the
//! batch contrastive loss on random data, then re-derives each gradient
//! entry by central differences and reports the worst normalized error per
//! parameter. The error is `|a - n| / max(|a|, |n|, 1)`, which behaves as a
//! relative error for O(1) gradients without blowing up on near-zero ones.

use crate::cascade::{CascadeConfig, Variant};
use crate::error::Result;
use crate::model::Model;
use crate::numerics::matrix::Matrix;
use crate::numerics::tape::Tape;
use crate::objective::LossConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub variant: Variant,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub frames: usize,
    pub batch: usize,
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Deliberately corrupt one analytic gradient entry; the checker must
    /// then flag exactly that parameter. Used to validate the checker.
    pub break_me: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            variant: Variant::Single,
            depth: 1,
            dim: 8,
            heads: 2,
            frames: 3,
            batch: 4,
            seed: 7,
            step: 1e-4,
            tolerance: 1e-4,
            break_me: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub max_error: f64,
    pub entries: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_error < self.tolerance)
    }

    pub fn failing_groups(&self) -> Vec<&GroupReport> {
        self.groups
            .iter()
            .filter(|g| g.max_error >= self.tolerance)
            .collect()
    }

    pub fn worst(&self) -> Option<&GroupReport> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_error.total_cmp(&b.max_error))
    }
}

pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let cascade_cfg = CascadeConfig::new(cfg.variant, cfg.depth, cfg.dim, cfg.heads);
    let mut model = Model::init(cascade_cfg, cfg.dim, cfg.seed)?;
    let loss_cfg = LossConfig::default();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xDA7A));
    let mut random = |rows: usize, cols: usize| -> Matrix {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Matrix::from_vec(rows, cols, data).expect("rows*cols data")
    };
    let batch_owned: Vec<(Matrix, Matrix)> = (0..cfg.batch)
        .map(|_| (random(cfg.frames, cfg.dim), random(1, cfg.dim)))
        .collect();
    let batch: Vec<(&Matrix, &Matrix)> = batch_owned.iter().map(|(a, t)| (a, t)).collect();

    // Analytic gradients from a single backward pass.
    let mut tape = Tape::new();
    let loss_var = model.batch_loss_t(&mut tape, &batch, &loss_cfg)?;
    model.store.zero_gradients();
    tape.backward(loss_var, &mut model.store)?;
    let mut analytic: Vec<(String, Matrix)> = model
        .store
        .iter()
        .map(|p| (p.name.clone(), p.gradient.clone()))
        .collect();
    drop(tape);

    if cfg.break_me {
        analytic[0].1.data_mut()[0] += 1e-2;
    }

    let ids: Vec<_> = model.store.ids().collect();
    let mut groups = Vec::with_capacity(ids.len());
    for (idx, id) in ids.into_iter().enumerate() {
        let entries = model.store.value(id).data().len();
        let mut max_error = 0.0f64;
        for e in 0..entries {
            let orig = model.store.value(id).data()[e];
            model.store.value_mut(id).data_mut()[e] = orig + cfg.step;
            let plus = model.batch_loss(&batch, &loss_cfg)?;
            model.store.value_mut(id).data_mut()[e] = orig - cfg.step;
            let minus = model.batch_loss(&batch, &loss_cfg)?;
            model.store.value_mut(id).data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[idx].1.data()[e];
            let error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            max_error = max_error.max(error);
        }
        groups.push(GroupReport {
            name: analytic[idx].0.clone(),
            max_error,
            entries,
        });
    }
    Ok(GradCheckReport {
        groups,
        tolerance: cfg.tolerance,
    })
}

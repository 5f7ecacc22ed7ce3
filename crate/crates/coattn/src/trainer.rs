//! Deterministic mini-batch contrastive training with checkpointing.
//!
//! One training step embeds a batch of aligned pairs, evaluates the
//! bidirectional contrastive loss, backpropagates, and applies the optimizer
//! update. Epoch order is a seeded permutation of the pair list; the last
//! incomplete batch of an epoch is dropped so every step sees the configured
//! batch size. Given the same seed, config, and bundle, training is
//! bit-identical across runs, and a resumed checkpoint continues exactly
//! where the original run would have gone.

use crate::cascade::CascadeConfig;
use crate::data::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::matrix::Matrix;
use crate::numerics::tape::Tape;
use crate::objective::LossConfig;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl Optimizer {
    pub fn as_str(&self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::Config(format!(
                "unknown optimizer `{other}` (expected sgd|adam)"
            ))),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub cascade: CascadeConfig,
    pub loss: LossConfig,
    pub optimizer: Optimizer,
    pub joint_dim: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.joint_dim == 0 {
            return Err(Error::Config("joint dimension must be positive".into()));
        }
        self.cascade.validate()?;
        self.loss.validate()
    }
}

/// Optimizer working state. Adam keeps per-parameter first/second moments in
/// store order plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: Optimizer,
    pub learning_rate: f64,
    pub adam_step: u64,
    pub adam_m: Vec<Matrix>,
    pub adam_v: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, learning_rate: f64, model: &Model) -> Self {
        let (adam_m, adam_v) = match kind {
            Optimizer::Sgd => (Vec::new(), Vec::new()),
            Optimizer::Adam => {
                let zeros: Vec<Matrix> = model
                    .store
                    .iter()
                    .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                    .collect();
                (zeros.clone(), zeros)
            }
        };
        OptimizerState {
            kind,
            learning_rate,
            adam_step: 0,
            adam_m,
            adam_v,
        }
    }

    fn apply(&mut self, model: &mut Model) {
        match self.kind {
            Optimizer::Sgd => {
                for id in model.store.ids().collect::<Vec<_>>() {
                    let grad = model.store.gradient(id).clone();
                    let value = model.store.value_mut(id);
                    for (v, g) in value.data_mut().iter_mut().zip(grad.data()) {
                        *v -= self.learning_rate * g;
                    }
                }
            }
            Optimizer::Adam => {
                self.adam_step += 1;
                let t = self.adam_step as f64;
                let bias1 = 1.0 - ADAM_BETA1.powf(t);
                let bias2 = 1.0 - ADAM_BETA2.powf(t);
                for (idx, id) in model.store.ids().collect::<Vec<_>>().into_iter().enumerate() {
                    let grad = model.store.gradient(id).clone();
                    let m = &mut self.adam_m[idx];
                    let v = &mut self.adam_v[idx];
                    let value = model.store.value_mut(id);
                    for ((p, g), (mi, vi)) in value
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                    {
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = *mi / bias1;
                        let v_hat = *vi / bias2;
                        *p -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
                    }
                }
            }
        }
    }
}

/// One forward/backward/update cycle; returns the pre-update loss. A
/// non-finite loss aborts before any parameter is touched.
pub fn step(
    model: &mut Model,
    opt: &mut OptimizerState,
    batch: &[(&Matrix, &Matrix)],
    loss_cfg: &LossConfig,
    step_index: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss_var = model.batch_loss_t(&mut tape, batch, loss_cfg)?;
    let loss = tape.value(loss_var).scalar()?;
    if !loss.is_finite() {
        return Err(Error::TrainingAborted {
            step: step_index,
            loss,
        });
    }
    model.store.zero_gradients();
    tape.backward(loss_var, &mut model.store)?;
    opt.apply(model);
    Ok(loss)
}

/// Completed training run: final parameters, optimizer state, and the
/// per-epoch mean loss curve.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
    pub params: Vec<(String, Matrix)>,
    pub adam_step: u64,
    pub adam_m: Vec<Matrix>,
    pub adam_v: Vec<Matrix>,
}

impl Checkpoint {
    fn capture(config: &TrainConfig, model: &Model, opt: &OptimizerState, epoch: usize, history: Vec<f64>) -> Self {
        Checkpoint {
            config: config.clone(),
            epoch,
            loss_history: history,
            params: model
                .store
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            adam_step: opt.adam_step,
            adam_m: opt.adam_m.clone(),
            adam_v: opt.adam_v.clone(),
        }
    }

    /// Rebuild the model and optimizer exactly as they were when the
    /// checkpoint was captured.
    pub fn restore(&self) -> Result<(Model, OptimizerState)> {
        let mut model = Model::init(
            self.config.cascade.clone(),
            self.config.joint_dim,
            self.config.seed,
        )?;
        if model.store.len() != self.params.len() {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "checkpoint has {} parameters, model expects {}",
                    self.params.len(),
                    model.store.len()
                ),
            });
        }
        for (name, value) in &self.params {
            let id = model.store.lookup(name).ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("checkpoint parameter `{name}` not in model"),
            })?;
            if !model.store.value(id).same_shape(value) {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("checkpoint parameter `{name}` has wrong shape"),
                });
            }
            *model.store.value_mut(id) = value.clone();
        }
        let mut opt = OptimizerState::new(self.config.optimizer, self.config.learning_rate, &model);
        if self.config.optimizer == Optimizer::Adam {
            if self.adam_m.len() != model.store.len() || self.adam_v.len() != model.store.len() {
                return Err(Error::Format {
                    offset: 0,
                    message: "checkpoint optimizer state does not match parameter count".into(),
                });
            }
            opt.adam_step = self.adam_step;
            opt.adam_m = self.adam_m.clone();
            opt.adam_v = self.adam_v.clone();
        }
        Ok((model, opt))
    }
}

fn resolve_pairs(bundle: &EmbeddingBundle, dim: usize) -> Result<Vec<(&Matrix, &Matrix)>> {
    if bundle.dim != dim {
        return Err(Error::Validation(format!(
            "bundle dimension {} does not match configured dimension {dim}",
            bundle.dim
        )));
    }
    bundle.validate()?;
    bundle
        .pairs
        .iter()
        .map(|(text_id, audio_id)| {
            Ok((
                bundle
                    .audio_by_id(audio_id)
                    .ok_or_else(|| Error::Validation(format!("unknown audio id `{audio_id}`")))?,
                bundle
                    .text_by_id(text_id)
                    .ok_or_else(|| Error::Validation(format!("unknown text id `{text_id}`")))?,
            ))
        })
        .collect()
}

/// RNG for one epoch's pair permutation, derived from the run seed so a
/// resumed run replays the identical shuffle sequence.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

fn run_epochs(
    model: &mut Model,
    opt: &mut OptimizerState,
    pairs: &[(&Matrix, &Matrix)],
    cfg: &TrainConfig,
    start_epoch: usize,
    history: &mut Vec<f64>,
    observer: &mut dyn FnMut(usize, f64),
) -> Result<()> {
    let steps_per_epoch = pairs.len() / cfg.batch_size;
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut epoch_loss = 0.0;
        for s in 0..steps_per_epoch {
            let batch: Vec<(&Matrix, &Matrix)> = order
                [s * cfg.batch_size..(s + 1) * cfg.batch_size]
                .iter()
                .map(|&i| pairs[i])
                .collect();
            let step_index = epoch * steps_per_epoch + s;
            epoch_loss += step(model, opt, &batch, &cfg.loss, step_index)?;
        }
        let mean = epoch_loss / steps_per_epoch as f64;
        history.push(mean);
        observer(epoch, mean);
    }
    Ok(())
}

/// Train from scratch, reporting each epoch's mean loss to `observer`.
pub fn train_with(
    bundle: &EmbeddingBundle,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(usize, f64),
) -> Result<Checkpoint> {
    cfg.validate()?;
    let pairs = resolve_pairs(bundle, cfg.cascade.dim)?;
    if pairs.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "bundle has {} pairs, need at least the batch size {}",
            pairs.len(),
            cfg.batch_size
        )));
    }
    let mut model = Model::init(cfg.cascade.clone(), cfg.joint_dim, cfg.seed)?;
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate, &model);
    let mut history = Vec::new();
    run_epochs(&mut model, &mut opt, &pairs, cfg, 0, &mut history, observer)?;
    Ok(Checkpoint::capture(cfg, &model, &opt, cfg.epochs, history))
}

pub fn train(bundle: &EmbeddingBundle, cfg: &TrainConfig) -> Result<Checkpoint> {
    train_with(bundle, cfg, &mut |_, _| {})
}

/// Continue a checkpointed run until `epochs` total epochs have completed.
/// The loss history and parameter trajectory match an uninterrupted run.
pub fn resume_with(
    bundle: &EmbeddingBundle,
    checkpoint: &Checkpoint,
    epochs: usize,
    observer: &mut dyn FnMut(usize, f64),
) -> Result<Checkpoint> {
    if epochs < checkpoint.epoch {
        return Err(Error::Config(format!(
            "target epoch count {epochs} is below the checkpoint's {} completed epochs",
            checkpoint.epoch
        )));
    }
    let mut cfg = checkpoint.config.clone();
    cfg.epochs = epochs;
    cfg.validate()?;
    let pairs = resolve_pairs(bundle, cfg.cascade.dim)?;
    if pairs.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "bundle has {} pairs, need at least the batch size {}",
            pairs.len(),
            cfg.batch_size
        )));
    }
    let (mut model, mut opt) = checkpoint.restore()?;
    let mut history = checkpoint.loss_history.clone();
    run_epochs(
        &mut model,
        &mut opt,
        &pairs,
        &cfg,
        checkpoint.epoch,
        &mut history,
        observer,
    )?;
    Ok(Checkpoint::capture(&cfg, &model, &opt, epochs, history))
}

// ---------------------------------------------------------------------------
// CKP1 checkpoint container
// ---------------------------------------------------------------------------

const CKP_MAGIC: &[u8; 4] = b"CKP1";
const CKP_VERSION: u32 = 1;

fn put_matrix_f64(buf: &mut Vec<u8>, m: &Matrix) {
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize a checkpoint: magic, version, JSON config block, epoch, loss
/// history, named parameter blobs, then optimizer state.
pub fn checkpoint_to_bytes(cp: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKP_MAGIC);
    buf.extend_from_slice(&CKP_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&cp.config)
        .map_err(|e| Error::Validation(format!("config serialization failed: {e}")))?;
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&(cp.epoch as u32).to_le_bytes());
    buf.extend_from_slice(&(cp.loss_history.len() as u32).to_le_bytes());
    for v in &cp.loss_history {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(cp.params.len() as u32).to_le_bytes());
    for (name, value) in &cp.params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        put_matrix_f64(&mut buf, value);
    }
    buf.extend_from_slice(&cp.adam_step.to_le_bytes());
    buf.extend_from_slice(&(cp.adam_m.len() as u32).to_le_bytes());
    for m in cp.adam_m.iter().chain(&cp.adam_v) {
        put_matrix_f64(&mut buf, m);
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated checkpoint while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn matrix(&mut self, what: &str) -> Result<Matrix> {
        let rows = self.u32(what)?;
        let cols = self.u32(what)?;
        let bytes = self.take(rows * cols * 8, what)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CKP_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad checkpoint magic, expected CKP1".into(),
        });
    }
    let version = r.u32("version")?;
    if version != CKP_VERSION as usize {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported checkpoint version {version}, expected {CKP_VERSION}"),
        });
    }
    let config_len = r.u32("config length")?;
    let config_offset = r.pos as u64;
    let config_bytes = r.take(config_len, "config")?;
    let config: TrainConfig = serde_json::from_slice(config_bytes).map_err(|e| Error::Format {
        offset: config_offset,
        message: format!("config block is not valid: {e}"),
    })?;
    let epoch = r.u32("epoch")?;
    let n_history = r.u32("history length")?;
    let mut loss_history = Vec::with_capacity(n_history);
    for _ in 0..n_history {
        loss_history.push(r.f64("loss history")?);
    }
    let n_params = r.u32("parameter count")?;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = r.u32("parameter name length")?;
        let name_offset = r.pos as u64;
        let name = String::from_utf8(r.take(name_len, "parameter name")?.to_vec()).map_err(|_| {
            Error::Format {
                offset: name_offset,
                message: "parameter name is not valid UTF-8".into(),
            }
        })?;
        let value = r.matrix("parameter value")?;
        params.push((name, value));
    }
    let adam_step = r.u64("adam step")?;
    let n_moments = r.u32("moment count")?;
    let mut adam_m = Vec::with_capacity(n_moments);
    for _ in 0..n_moments {
        adam_m.push(r.matrix("first moment")?);
    }
    let mut adam_v = Vec::with_capacity(n_moments);
    for _ in 0..n_moments {
        adam_v.push(r.matrix("second moment")?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: format!("{} unexpected trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(Checkpoint {
        config,
        epoch,
        loss_history,
        params,
        adam_step,
        adam_m,
        adam_v,
    })
}

pub fn save_checkpoint(cp: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = checkpoint_to_bytes(cp)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::Variant;
    use crate::data::generate_synthetic;
    use crate::objective::DenominatorMode;

    fn tiny_config(optimizer: Optimizer, epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs,
            learning_rate: 1e-3,
            seed: 7,
            cascade: CascadeConfig::new(Variant::Single, 1, 8, 2),
            loss: LossConfig::default(),
            optimizer,
            joint_dim: 8,
        }
    }

    #[test]
    fn config_validation_catches_small_batches() {
        let mut cfg = tiny_config(Optimizer::Adam, 1);
        cfg.batch_size = 1;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn training_needs_enough_pairs() {
        let bundle = generate_synthetic(2, 8, 2, 0.1, 1).unwrap();
        let cfg = tiny_config(Optimizer::Adam, 1);
        assert!(matches!(train(&bundle, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let bundle = generate_synthetic(6, 8, 2, 0.1, 2).unwrap();
        let mut model = Model::init(CascadeConfig::new(Variant::Single, 1, 8, 2), 8, 3).unwrap();
        let before: Vec<Matrix> = model.store.iter().map(|p| p.value.clone()).collect();
        let mut opt = OptimizerState::new(Optimizer::Sgd, 0.0, &model);
        let batch: Vec<(&Matrix, &Matrix)> = bundle.pairs[..4]
            .iter()
            .map(|(t, a)| (bundle.audio_by_id(a).unwrap(), bundle.text_by_id(t).unwrap()))
            .collect();
        for i in 0..3 {
            step(&mut model, &mut opt, &batch, &LossConfig::default(), i).unwrap();
        }
        for (p, b) in model.store.iter().zip(&before) {
            assert_eq!(&p.value, b);
        }
    }

    #[test]
    fn sgd_update_magnitude_scales_with_learning_rate() {
        let bundle = generate_synthetic(6, 8, 2, 0.1, 2).unwrap();
        let batch: Vec<(&Matrix, &Matrix)> = bundle.pairs[..4]
            .iter()
            .map(|(t, a)| (bundle.audio_by_id(a).unwrap(), bundle.text_by_id(t).unwrap()))
            .collect();
        let run = |lr: f64| -> Vec<f64> {
            let mut model =
                Model::init(CascadeConfig::new(Variant::Single, 1, 8, 2), 8, 3).unwrap();
            let before: Vec<f64> = model
                .store
                .iter()
                .flat_map(|p| p.value.data().to_vec())
                .collect();
            let mut opt = OptimizerState::new(Optimizer::Sgd, lr, &model);
            step(&mut model, &mut opt, &batch, &LossConfig::default(), 0).unwrap();
            model
                .store
                .iter()
                .flat_map(|p| p.value.data().to_vec())
                .zip(before)
                .map(|(after, b)| after - b)
                .collect()
        };
        let d1 = run(1e-4);
        let d2 = run(2e-4);
        // Deltas are recovered by subtracting large parameter values, so
        // allow for the cancellation noise that introduces.
        for (a, b) in d1.iter().zip(&d2) {
            assert!((2.0 * a - b).abs() <= 1e-6 * b.abs() + 1e-15);
        }
    }

    #[test]
    fn sgd_descends_on_a_fixed_batch() {
        let bundle = generate_synthetic(6, 8, 2, 0.1, 4).unwrap();
        let mut model = Model::init(CascadeConfig::new(Variant::Single, 1, 8, 2), 8, 5).unwrap();
        let mut opt = OptimizerState::new(Optimizer::Sgd, 1e-3, &model);
        let batch: Vec<(&Matrix, &Matrix)> = bundle.pairs[..4]
            .iter()
            .map(|(t, a)| (bundle.audio_by_id(a).unwrap(), bundle.text_by_id(t).unwrap()))
            .collect();
        let cfg = LossConfig::default();
        let first = step(&mut model, &mut opt, &batch, &cfg, 0).unwrap();
        let second = step(&mut model, &mut opt, &batch, &cfg, 1).unwrap();
        assert!(second < first || (second - first).abs() < 1e-8);
    }

    #[test]
    fn duplicate_pair_in_batch_stays_finite() {
        let bundle = generate_synthetic(4, 8, 2, 0.1, 6).unwrap();
        let mut model = Model::init(CascadeConfig::new(Variant::Single, 1, 8, 2), 8, 7).unwrap();
        let mut opt = OptimizerState::new(Optimizer::Adam, 1e-3, &model);
        let a = bundle.audio_by_id("a0000").unwrap();
        let t = bundle.text_by_id("t0000").unwrap();
        let b = bundle.audio_by_id("a0001").unwrap();
        let u = bundle.text_by_id("t0001").unwrap();
        let batch = vec![(a, t), (a, t), (b, u)];
        let loss = step(&mut model, &mut opt, &batch, &LossConfig::default(), 0).unwrap();
        assert!(loss.is_finite());
    }

    #[test]
    fn training_is_bit_deterministic() {
        let bundle = generate_synthetic(8, 8, 2, 0.1, 8).unwrap();
        let cfg = tiny_config(Optimizer::Adam, 3);
        let a = train(&bundle, &cfg).unwrap();
        let b = train(&bundle, &cfg).unwrap();
        assert_eq!(
            checkpoint_to_bytes(&a).unwrap(),
            checkpoint_to_bytes(&b).unwrap()
        );
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        // Observed losses imply batches; here we check the shuffle directly.
        let mut order: Vec<usize> = (0..10).collect();
        order.shuffle(&mut epoch_rng(7, 3));
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn loss_decreases_on_noiseless_bundle() {
        let bundle = generate_synthetic(16, 8, 2, 0.0, 9).unwrap();
        let mut cfg = tiny_config(Optimizer::Adam, 50);
        cfg.batch_size = 8;
        let cp = train(&bundle, &cfg).unwrap();
        assert_eq!(cp.loss_history.len(), 50);
        let first = cp.loss_history[0];
        let last = *cp.loss_history.last().unwrap();
        assert!(last < first, "loss did not improve: {first} -> {last}");
        assert!(last < (cfg.batch_size as f64 - 1.0).ln());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let bundle = generate_synthetic(8, 8, 2, 0.1, 10).unwrap();
        let cfg = tiny_config(Optimizer::Adam, 2);
        let cp = train(&bundle, &cfg).unwrap();
        let bytes = checkpoint_to_bytes(&cp).unwrap();
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(bytes, checkpoint_to_bytes(&back).unwrap());
        assert_eq!(cp.params.len(), back.params.len());
        for ((n1, v1), (n2, v2)) in cp.params.iter().zip(&back.params) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2);
        }
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let bundle = generate_synthetic(8, 8, 2, 0.1, 11).unwrap();
        let cfg = tiny_config(Optimizer::Adam, 1);
        let cp = train(&bundle, &cfg).unwrap();
        let mut bytes = checkpoint_to_bytes(&cp).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(Error::Format { .. })
        ));
        let bytes = checkpoint_to_bytes(&cp).unwrap();
        assert!(matches!(
            checkpoint_from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
        // Unsupported version number.
        let mut bytes = checkpoint_to_bytes(&cp).unwrap();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        let err = checkpoint_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let bundle = generate_synthetic(8, 8, 2, 0.1, 12).unwrap();
        let full_cfg = tiny_config(Optimizer::Adam, 4);
        let full = train(&bundle, &full_cfg).unwrap();

        let mut short_cfg = full_cfg.clone();
        short_cfg.epochs = 2;
        let half = train(&bundle, &short_cfg).unwrap();
        // Round-trip through bytes to prove the saved artifact resumes too.
        let half = checkpoint_from_bytes(&checkpoint_to_bytes(&half).unwrap()).unwrap();
        let resumed = resume_with(&bundle, &half, 4, &mut |_, _| {}).unwrap();

        assert_eq!(
            checkpoint_to_bytes(&full).unwrap(),
            checkpoint_to_bytes(&resumed).unwrap()
        );
    }

    #[test]
    fn sgd_checkpoints_restore_without_moments() {
        let bundle = generate_synthetic(8, 8, 2, 0.1, 13).unwrap();
        let cfg = tiny_config(Optimizer::Sgd, 2);
        let cp = train(&bundle, &cfg).unwrap();
        assert!(cp.adam_m.is_empty());
        let (model, opt) = cp.restore().unwrap();
        assert_eq!(opt.kind, Optimizer::Sgd);
        assert_eq!(model.store.len(), cp.params.len());
    }

    #[test]
    fn frozen_forward_matches_between_train_and_eval_paths() {
        // No mode-dependent branches exist: the training-path forward and a
        // fresh evaluation forward agree bitwise on the same inputs.
        let bundle = generate_synthetic(6, 8, 2, 0.1, 14).unwrap();
        let cfg = tiny_config(Optimizer::Adam, 1);
        let cp = train(&bundle, &cfg).unwrap();
        let (model, _) = cp.restore().unwrap();
        let batch: Vec<(&Matrix, &Matrix)> = bundle.pairs[..4]
            .iter()
            .map(|(t, a)| (bundle.audio_by_id(a).unwrap(), bundle.text_by_id(t).unwrap()))
            .collect();
        let l1 = model.batch_loss(&batch, &cfg.loss).unwrap();
        let l2 = model.batch_loss(&batch, &cfg.loss).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn include_positive_mode_trains_too() {
        let bundle = generate_synthetic(8, 8, 2, 0.1, 15).unwrap();
        let mut cfg = tiny_config(Optimizer::Adam, 2);
        cfg.loss.denominator_mode = DenominatorMode::IncludePositive;
        let cp = train(&bundle, &cfg).unwrap();
        assert!(cp.loss_history.iter().all(|l| l.is_finite() && *l >= 0.0));
    }
}

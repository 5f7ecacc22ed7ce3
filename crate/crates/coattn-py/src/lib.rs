//! Python bindings: embedding bundles, training, evaluation, gradient
//! checks, and the core attention/similarity operations.
//!
//! Build with `cargo build -p coattn-py --release` and import the resulting
//! `coattn_py` shared library (see `python/smoke_test.py`).

use coattn::cascade::{CascadeConfig, Variant};
use coattn::data::{self, EmbeddingBundle};
use coattn::error::Error;
use coattn::gradcheck::{run_gradcheck, GradCheckConfig};
use coattn::model::{evaluate_retrieval, Direction, Model};
use coattn::numerics::matrix::Matrix;
use coattn::objective::{DenominatorMode, LossConfig};
use coattn::trainer::{self, Optimizer, TrainConfig};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Validation(_) | Error::Dimension { .. } | Error::Format { .. } => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn matrix_from_rows(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(to_py_err)
}

fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Audio frame embeddings, text embeddings, and relevance pairs.
#[pyclass(name = "Bundle", from_py_object)]
#[derive(Clone)]
struct PyBundle {
    inner: EmbeddingBundle,
}

#[pymethods]
impl PyBundle {
    /// Deterministic synthetic bundle of `items` paired audio/text items.
    #[staticmethod]
    #[pyo3(signature = (items, dim, frames, noise=0.05, seed=7))]
    fn generate(items: usize, dim: usize, frames: usize, noise: f64, seed: u64) -> PyResult<Self> {
        Ok(PyBundle {
            inner: data::generate_synthetic(items, dim, frames, noise, seed).map_err(to_py_err)?,
        })
    }

    /// Read an `EMB1` file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyBundle {
            inner: data::read_bundle(path).map_err(to_py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        data::write_bundle(&self.inner, path).map_err(to_py_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn num_audio(&self) -> usize {
        self.inner.audio.len()
    }

    #[getter]
    fn num_text(&self) -> usize {
        self.inner.text.len()
    }

    #[getter]
    fn pairs(&self) -> Vec<(String, String)> {
        self.inner.pairs.clone()
    }

    fn audio_ids(&self) -> Vec<String> {
        self.inner.audio.iter().map(|(id, _)| id.clone()).collect()
    }

    fn text_ids(&self) -> Vec<String> {
        self.inner.text.iter().map(|(id, _)| id.clone()).collect()
    }

    /// Frame matrix of one audio item as nested lists.
    fn audio_frames(&self, id: &str) -> PyResult<Vec<Vec<f64>>> {
        self.inner
            .audio_by_id(id)
            .map(matrix_to_rows)
            .ok_or_else(|| PyValueError::new_err(format!("unknown audio id `{id}`")))
    }

    fn text_vector(&self, id: &str) -> PyResult<Vec<f64>> {
        self.inner
            .text_by_id(id)
            .map(|m| m.row(0).to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("unknown text id `{id}`")))
    }

    fn __repr__(&self) -> String {
        format!(
            "Bundle(dim={}, audio={}, text={}, pairs={})",
            self.inner.dim,
            self.inner.audio.len(),
            self.inner.text.len(),
            self.inner.pairs.len()
        )
    }
}

/// Trained model state plus its training configuration and loss curve.
#[pyclass(name = "Checkpoint")]
struct PyCheckpoint {
    inner: trainer::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyCheckpoint {
            inner: trainer::load_checkpoint(path).map_err(to_py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        trainer::save_checkpoint(&self.inner, path).map_err(to_py_err)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn loss_history(&self) -> Vec<f64> {
        self.inner.loss_history.clone()
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.config.cascade.variant.as_str()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.config.cascade.depth
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.config.cascade.dim
    }

    fn __repr__(&self) -> String {
        format!(
            "Checkpoint(variant={}, depth={}, dim={}, epoch={})",
            self.variant(),
            self.depth(),
            self.dim(),
            self.inner.epoch
        )
    }
}

#[pyfunction]
#[pyo3(signature = (items, dim, frames, noise=0.05, seed=7))]
fn generate_synthetic(
    items: usize,
    dim: usize,
    frames: usize,
    noise: f64,
    seed: u64,
) -> PyResult<PyBundle> {
    PyBundle::generate(items, dim, frames, noise, seed)
}

/// Train a co-attention model on a bundle and return the checkpoint.
#[pyfunction]
#[pyo3(signature = (
    bundle,
    variant="iterating",
    depth=2,
    heads=4,
    batch_size=8,
    epochs=50,
    learning_rate=1e-3,
    seed=7,
    temperature=0.07,
    lambda_=0.5,
    denominator_mode="literal_exclude_positive",
    optimizer="adam",
    joint_dim=None,
    no_residual=false,
))]
#[allow(clippy::too_many_arguments)]
fn train(
    bundle: &PyBundle,
    variant: &str,
    depth: usize,
    heads: usize,
    batch_size: usize,
    epochs: usize,
    learning_rate: f64,
    seed: u64,
    temperature: f64,
    lambda_: f64,
    denominator_mode: &str,
    optimizer: &str,
    joint_dim: Option<usize>,
    no_residual: bool,
) -> PyResult<PyCheckpoint> {
    let cfg = TrainConfig {
        batch_size,
        epochs,
        learning_rate,
        seed,
        cascade: CascadeConfig {
            variant: Variant::parse(variant).map_err(to_py_err)?,
            depth,
            dim: bundle.inner.dim,
            heads,
            no_residual,
        },
        loss: LossConfig {
            temperature,
            lambda: lambda_,
            denominator_mode: DenominatorMode::parse(denominator_mode).map_err(to_py_err)?,
        },
        optimizer: Optimizer::parse(optimizer).map_err(to_py_err)?,
        joint_dim: joint_dim.unwrap_or(bundle.inner.dim),
    };
    Ok(PyCheckpoint {
        inner: trainer::train(&bundle.inner, &cfg).map_err(to_py_err)?,
    })
}

/// Retrieval metrics (`map_at_10`, `r_at_1`, `r_at_5`, `r_at_10`,
/// `num_queries`) for a checkpointed model on a bundle.
#[pyfunction]
#[pyo3(signature = (checkpoint, bundle, direction="t2a", binary_recall=false))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: &PyCheckpoint,
    bundle: &PyBundle,
    direction: &str,
    binary_recall: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let (model, _) = checkpoint.inner.restore().map_err(to_py_err)?;
    let report = evaluate_retrieval(
        &model,
        &bundle.inner,
        Direction::parse(direction).map_err(to_py_err)?,
        binary_recall,
    )
    .map_err(to_py_err)?;
    let dict = PyDict::new(py);
    dict.set_item("map_at_10", report.map_at_10)?;
    dict.set_item("r_at_1", report.r_at_1)?;
    dict.set_item("r_at_5", report.r_at_5)?;
    dict.set_item("r_at_10", report.r_at_10)?;
    dict.set_item("num_queries", report.num_queries)?;
    Ok(dict)
}

/// Evaluate an untrained (randomly initialized) model; the baseline for
/// learnability comparisons.
#[pyfunction]
#[pyo3(signature = (bundle, variant="iterating", depth=2, heads=4, seed=7, direction="t2a"))]
fn evaluate_untrained<'py>(
    py: Python<'py>,
    bundle: &PyBundle,
    variant: &str,
    depth: usize,
    heads: usize,
    seed: u64,
    direction: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = CascadeConfig {
        variant: Variant::parse(variant).map_err(to_py_err)?,
        depth,
        dim: bundle.inner.dim,
        heads,
        no_residual: false,
    };
    let model = Model::init(cfg, bundle.inner.dim, seed).map_err(to_py_err)?;
    let report = evaluate_retrieval(
        &model,
        &bundle.inner,
        Direction::parse(direction).map_err(to_py_err)?,
        false,
    )
    .map_err(to_py_err)?;
    let dict = PyDict::new(py);
    dict.set_item("map_at_10", report.map_at_10)?;
    dict.set_item("r_at_1", report.r_at_1)?;
    dict.set_item("r_at_5", report.r_at_5)?;
    dict.set_item("r_at_10", report.r_at_10)?;
    dict.set_item("num_queries", report.num_queries)?;
    Ok(dict)
}

/// Finite-difference gradient verification; returns per-parameter errors.
#[pyfunction]
#[pyo3(signature = (variant="single", depth=1, dim=8, heads=2, frames=3, batch=4, seed=7))]
#[allow(clippy::too_many_arguments)]
fn gradcheck<'py>(
    py: Python<'py>,
    variant: &str,
    depth: usize,
    dim: usize,
    heads: usize,
    frames: usize,
    batch: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = GradCheckConfig {
        variant: Variant::parse(variant).map_err(to_py_err)?,
        depth,
        dim,
        heads,
        frames,
        batch,
        seed,
        ..GradCheckConfig::default()
    };
    let report = run_gradcheck(&cfg).map_err(to_py_err)?;
    let groups = PyDict::new(py);
    for g in &report.groups {
        groups.set_item(&g.name, g.max_error)?;
    }
    let dict = PyDict::new(py);
    dict.set_item("passed", report.passed())?;
    dict.set_item("tolerance", report.tolerance)?;
    dict.set_item("groups", groups)?;
    Ok(dict)
}

/// Numerically stabilized row-wise softmax.
#[pyfunction]
fn softmax_rows(x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let m = matrix_from_rows(x)?;
    Ok(matrix_to_rows(&coattn::numerics::matrix::softmax_rows(&m)))
}

/// `softmax(q kᵀ / sqrt(d_k)) v` on nested lists.
#[pyfunction]
fn scaled_dot_attention(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
) -> PyResult<Vec<Vec<f64>>> {
    let out = coattn::attention::scaled_dot_attention(
        &matrix_from_rows(q)?,
        &matrix_from_rows(k)?,
        &matrix_from_rows(v)?,
    )
    .map_err(to_py_err)?;
    Ok(matrix_to_rows(&out))
}

#[pyfunction]
fn cosine_similarity(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    coattn::objective::cosine_similarity(&Matrix::row_vector(&x), &Matrix::row_vector(&y))
        .map_err(to_py_err)
}

/// Pick the candidate caption most similar to the original embedding.
#[pyfunction]
fn select_caption(original: Vec<f64>, candidates: Vec<(String, Vec<f64>)>) -> PyResult<String> {
    let set = data::CandidateCaptionSet {
        original: ("original".to_string(), Matrix::row_vector(&original)),
        candidates: candidates
            .into_iter()
            .map(|(id, v)| (id, Matrix::row_vector(&v)))
            .collect(),
    };
    data::select_caption(&set).map_err(to_py_err)
}

#[pymodule]
fn coattn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBundle>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_untrained, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_rows, m)?)?;
    m.add_function(wrap_pyfunction!(scaled_dot_attention, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(select_caption, m)?)?;
    Ok(())
}

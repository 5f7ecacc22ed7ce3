use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use rand::Rng;

/// Weight matrix drawn uniformly from `[-1/sqrt(in_dim), 1/sqrt(in_dim)]`,
/// where `in_dim` is the row count under the row-vector convention
/// (`x · W`). Keeps early softmax logits unsaturated.
pub fn uniform_weight<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize) -> Matrix {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let data = (0..in_dim * out_dim)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Matrix::from_vec(in_dim, out_dim, data).expect("length is rows*cols by construction")
}

/// Handle into a [`ParamStore`]. Stable for the lifetime of the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A learnable weight: current value plus an accumulated gradient of the
/// same shape.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub gradient: Matrix,
}

/// Flat registry of every learnable parameter in a model. Creation order is
/// fixed at construction time, which keeps initialization, updates, and
/// checkpoint layout deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let gradient = Matrix::zeros(value.rows(), value.cols());
        self.params.push(Parameter {
            name: name.into(),
            value,
            gradient,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn gradient(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].gradient
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Reset every gradient to zero.
    pub fn zero_gradients(&mut self) {
        for p in &mut self.params {
            p.gradient.data_mut().fill(0.0);
        }
    }

    pub(crate) fn accumulate_gradient(&mut self, id: ParamId, grad: &Matrix) -> Result<()> {
        let p = &mut self.params[id.0];
        if !p.gradient.same_shape(grad) {
            return Err(Error::dimension(
                "accumulate_gradient",
                p.gradient.shape_string(),
                grad.shape_string(),
            ));
        }
        for (g, d) in p.gradient.data_mut().iter_mut().zip(grad.data()) {
            *g += d;
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    /// Copy values from `other` into every parameter of `self` whose name
    /// and shape match. Parameters without a counterpart are left untouched.
    pub fn copy_matching_values(&mut self, other: &ParamStore) {
        for p in &mut self.params {
            if let Some(src) = other.params.iter().find(|q| q.name == p.name) {
                if p.value.same_shape(&src.value) {
                    p.value = src.value.clone();
                }
            }
        }
    }
}

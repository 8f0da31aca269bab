//! Dense arrays and reverse-mode automatic differentiation.
//!
//! [`Array`] is a row-major f64 tensor (rank 0 through 3 in practice).
//! [`TapeGraph`] records a fixed computation once and then replays it
//! forward/backward any number of times with fresh leaf bindings; the op set
//! is the closed family the training losses compose from: affine maps,
//! tanh/relu, concat/slice, sum/mean/squared-L2, diagonal-Gaussian
//! log-density and reparameterized draw, softmax, clip, stop-gradient, and
//! elementwise arithmetic glue.
//!
//! Arithmetic runs in f64 throughout so the same execution path serves both
//! training and the central-difference gradient checker. On-disk payloads
//! are f32 (see [`crate::io`]); checkpoint saves truncate deterministically.

mod adam;
mod check;
mod graph;

pub use adam::AdamState;
pub use check::finite_diff_check;
pub(crate) use graph::matmul_add_bias;
pub use graph::{Bindings, NodeId, TapeGraph};

use thiserror::Error;

/// Failures surfaced by forward/backward passes, the optimizer, and the
/// gradient checker.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch at {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("non-finite value produced at {node}")]
    NonFinite { node: String },
    #[error("no binding supplied for leaf `{0}`")]
    MissingBinding(String),
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("unknown parameter `{0}` in optimizer group")]
    UnknownParameter(String),
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("graph has no output node set")]
    NoOutput,
    #[error("forward must run before backward")]
    NotEvaluated,
    #[error("data length {got} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, got: usize },
    #[error("finite-difference comparison non-finite at `{name}`[{index}]")]
    NonFiniteCheck { name: String, index: usize },
}

/// Row-major dense tensor. Scalars are rank 0 (empty shape, one element).
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Array { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::BadLength { shape: shape.to_vec(), got: data.len() });
        }
        Ok(Array { shape: shape.to_vec(), data })
    }

    pub fn scalar(v: f64) -> Self {
        Array { shape: vec![], data: vec![v] }
    }

    /// Stacks equal-length rows into a rank-2 array.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Array { shape: vec![rows.len(), cols], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "scalar_value on non-scalar");
        self.data[0]
    }

    /// Views any array as a batch of rows: rank-2 is (rows, cols), everything
    /// else is a single row of all elements.
    pub fn row_view(&self) -> (usize, usize) {
        if self.shape.len() == 2 {
            (self.shape[0], self.shape[1])
        } else {
            (1, self.data.len())
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Result<Self, TensorError> {
        Self::from_vec(shape, data.iter().map(|&v| v as f64).collect())
    }
}

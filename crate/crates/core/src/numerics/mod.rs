//! Dense tensors, reverse-mode differentiation, optimizers and seeded random
//! streams.

mod adam;
mod gradcheck;
mod graph;
mod io;
mod rng;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{compare_gradient, finite_diff_check, GradCheckReport};
pub use graph::{backward, grad, Gradients, Graph, Var};
pub use io::{read_tensor_record, write_tensor_record, TensorHeader};
pub use rng::RngStream;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects a matrix, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: operands live on different graphs")]
    ForeignGraph { op: &'static str },
    #[error("malformed tensor record: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NumericsError {
    /// Whether this error signals a numeric fault rather than misuse.
    pub fn is_numeric_fault(&self) -> bool {
        matches!(self, NumericsError::NonFinite { .. })
    }
}

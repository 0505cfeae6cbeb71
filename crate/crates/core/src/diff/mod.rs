//! Minimal differentiable array core.
//!
//! Dense `f64` tensors, the handful of operations the model needs, and a
//! tape ([`Graph`]) that replays them in reverse for gradients. Every
//! operation is checked against central finite differences in the tests.

mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use gradcheck::{check_gradient, check_param_gradients, FD_STEP};
pub use graph::{softmax_raw, Graph, NormStats, ObservedStats, Primitive, Var, BN_EPS};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

pub(crate) use tensor::matmul_raw;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("gradient requested of a non-scalar of shape {0:?}")]
    NonScalar(Vec<usize>),
}

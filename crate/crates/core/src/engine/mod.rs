//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is built once from primitive ops, then evaluated with
//! [`Graph::forward`] against named leaf bindings and differentiated with
//! [`Graph::backward`]. [`grad_check`] compares the analytic gradients with
//! central finite differences.

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, LeafReport};
pub use graph::{Bindings, Evaluation, Gradients, Graph, LeafKind, NodeId, RMS_EPS};
pub use tensor::Tensor;

pub(crate) use graph::{mean_cross_entropy, softmax_rows};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("tensor extents must be positive, got {0:?}")]
    BadExtent(Vec<usize>),
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have unequal lengths")]
    RaggedRows,
    #[error("shape mismatch at {node}: {detail}")]
    Shape { node: String, detail: String },
    #[error("leaf `{0}` declared twice")]
    DuplicateLeaf(String),
    #[error("leaf `{0}` is not bound")]
    UnboundLeaf(String),
    #[error("leaf `{leaf}` declared with shape {expected:?} but bound to {got:?}")]
    BindingShape {
        leaf: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{node}: index {value} is not an integer in range")]
    InvalidIndex { node: String, value: f64 },
    #[error("loss node {node} has shape {shape:?}, expected a scalar")]
    NonScalarLoss { node: String, shape: Vec<usize> },
    #[error("backward called without a forward evaluation of this graph")]
    NotEvaluated,
    #[error("no node with index {0}")]
    UnknownNode(usize),
}

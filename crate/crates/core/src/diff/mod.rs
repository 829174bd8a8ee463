//! Minimal reverse-mode differentiable array engine.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and the record needed to back-propagate. Nodes are appended after their
//! inputs, so reverse insertion order is a topological order and
//! [`Graph::backward`] visits each node exactly once.
//!
//! Learnable tensors live in a [`ParamStore`] that outlives graphs. A graph
//! binds a parameter as a leaf on first use; after `backward` the leaf
//! gradients are folded back with [`ParamStore::accumulate_grads`].

mod adam;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;

use alloc::string::String;
use alloc::vec::Vec;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport, ParamCheck};
pub use graph::{Graph, Var};
pub use kernels::WindowSpec;
pub use params::{init_uniform_fan_in, ParamId, ParamStore, Parameter};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid input shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: non-finite value in forward pass")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T, E = DiffError> = core::result::Result<T, E>;

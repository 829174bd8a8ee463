//! Core algorithms for dual-prior scene-text super-resolution.
//!
//! Everything in this crate is pure computation: a small reverse-mode
//! differentiable array engine ([`diff`]), the non-differentiable prior
//! generators ([`priors`]), the refinement network ([`net`]), losses and
//! image-quality metrics ([`losses`], [`metrics`]) and the synthetic
//! benchmark generator ([`synth`]). File formats, the command line and the
//! training orchestration live in the companion `dpmn` crate.
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is
//! disabled. The `std` feature only switches math and GEMM back-ends to
//! their runtime-dispatched implementations.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod diff;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod priors;
pub mod real;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use diff::{DiffError, Graph, ParamId, ParamStore, Var};
pub use real::Real;
pub use rng::Rng;
pub use tensor::Tensor;

/// Low-resolution input height.
pub const LR_H: usize = 16;
/// Low-resolution input width.
pub const LR_W: usize = 64;
/// Super-resolved / high-resolution height.
pub const HR_H: usize = 2 * LR_H;
/// Super-resolved / high-resolution width.
pub const HR_W: usize = 2 * LR_W;

//! Core of the talking-head pipeline.
//!
//! Everything here is pure computation over in-memory data and builds with
//! `alloc` only: dense tensors and a reverse-mode autodiff graph, the
//! parametric head model, the triangle-rigged Gaussian cloud, the
//! differentiable splat renderer, the gated residual motion network, the
//! training losses and metrics, and the pretrain / adapt / infer loops.
//! File formats, configuration files and the command line live in the
//! `talkhead` companion crate.

#![no_std]
// `!(x > 0.0)` is used on purpose so NaN lands on the error path.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod geometry;
pub mod gradcheck;
pub mod gradsuite;
pub mod grmn;
pub mod head;
pub mod loss;
pub mod math;
pub mod nn;
pub mod optim;
pub mod render;
pub mod rig;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Graph, GraphError, ParamId, Var};
pub use tensor::{Tensor, TensorError};

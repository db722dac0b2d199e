//! Minimal dense-tensor reverse-mode differentiation.
//!
//! A [`Graph`] records operations as they execute; [`Graph::backward`] walks
//! the record in reverse. Parameters live in a [`ParamStore`] outside any
//! graph and are bound to a fresh graph per step, updated with
//! [`adam_step`], and persisted as a [`Checkpoint`].

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod optim;
mod params;
mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{AutodiffError, Result};
pub use graph::{sigmoid, Graph, Var};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{Bound, ParamStore};
pub use tensor::{DType, Scalar, Tensor};

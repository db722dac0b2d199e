//! Command-line pipelines: corpus generation, simplification, training,
//! rollout, evaluation, transition statistics and rendering.

pub mod cmd;
pub mod config;
pub mod corpus;
mod error;
pub mod output;
pub mod render;

pub use error::{exit, CliError, Context, Result};

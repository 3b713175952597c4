//! Point Mamba Adapter: a selective state-space adapter over the per-layer
//! features of a frozen point-cloud transformer, with geometry-constrained
//! gate prompts, plus the training and ablation harness exercising it on
//! synthetic shapes.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gate_prompt;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod model;
pub mod opt;
pub mod param;
pub mod scan;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

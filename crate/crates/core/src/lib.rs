//! Continual multimodal learning with modality-decomposed low-rank factor
//! pools, cross-modal routing and task-key inference over a frozen
//! transformer backbone.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod lora;
pub mod loss;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod routing;
pub mod tensor;

pub use config::{ExperimentConfig, Variant};
pub use error::{Error, Result};
pub use experiment::{run_experiment, ExperimentResult};
pub use tensor::Tensor;

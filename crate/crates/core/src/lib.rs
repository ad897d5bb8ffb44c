//! Multimodal knowledge distillation on a synthetic action-recognition testbed.
//!
//! Modality-specific teachers (appearance, optical flow, box layout and a
//! spectrogram analog) are trained on procedurally generated clips, combined
//! into a weighted logit ensemble, and distilled into an appearance-only
//! student with a temperature-scaled KL objective.

pub mod checkpoint;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

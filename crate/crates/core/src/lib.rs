//! Compress-then-interact multi-frame visual tracker.
//!
//! Template frames are tokenized, contextualised and compressed by score-
//! guided merging; the compact template then interacts with the search
//! frame through hierarchical cross- and self-attention blocks before a
//! convolutional centre head predicts the target box. Everything runs on a
//! small tape-based autodiff engine that also counts multiply-accumulates.

pub mod atc;
pub mod autodiff;
pub mod cost_model;
pub mod error;
pub mod harness;
pub mod head;
pub mod hi_encoder;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use model::{Etctrack, ModelConfig};
pub use tensor::Tensor;

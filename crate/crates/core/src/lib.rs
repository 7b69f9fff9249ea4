//! Multi-scale speaking-style modeling for expressive speech synthesis.
//!
//! The crate covers the whole pipeline at desk scale: corpus formats and a
//! synthetic audiobook generator, a small reverse-mode autograd substrate,
//! the multi-scale style extractor and hierarchical style predictor, a
//! FastSpeech-2-style acoustic model, three-stage distillation training, and
//! DTW-aligned objective metrics.

pub mod acoustic;
pub mod autograd;
pub mod config;
pub mod context;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod extractor;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod params;
pub mod predictor;
pub mod semantic;
pub mod synthesis;
pub mod tensor;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use tensor::{read_tensor, write_tensor, Tensor};

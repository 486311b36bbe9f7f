//! Encoder-tap transfer learning for Conformer CTC/attention speech recognition.
//!
//! A well-trained source model's bottom `K` encoder blocks become a feature
//! extractor for a fresh target-domain model, optionally frozen and with
//! SpecAug applied to the tapped embeddings.

pub mod autograd;
pub mod data;
pub mod error;
pub mod experiments;
pub mod frontend;
pub mod nnet;
pub mod objective;
pub mod params;
pub mod scoring;
pub mod tensor;
pub mod transfer;

pub use error::{Error, Result};

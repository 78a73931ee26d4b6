//! Deep token pooling for image retrieval.
//!
//! A hybrid vision-transformer encoder with dynamic position embeddings feeds
//! a two-branch pooling head: a global branch over multi-layer class tokens
//! and a local branch over multi-layer patch tokens with a convolutional
//! locality module. Around it sit descriptor post-processing, exact cosine
//! retrieval with revisited-benchmark evaluation, batch planning, and
//! layer-similarity analysis.

pub mod analysis;
pub mod config;
pub mod descriptor;
pub mod encoder;
pub mod error;
pub mod head;
pub mod io;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod position;
pub mod retrieval;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

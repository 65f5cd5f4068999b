//! Signal-to-image decoding by next-scale autoregressive prediction.
//!
//! Stages: a patch-based transformer encoder turns preprocessed signal epochs
//! into embeddings and is contrastively aligned with frozen image embeddings;
//! a multi-scale residual quantizer tokenizes images coarse to fine; a
//! block-causal transformer predicts each finer token map from the signal
//! embedding and the previous scales.

pub mod alignment;
pub mod encoder;
pub mod error;
pub mod image;
pub mod metrics;
pub mod nsp;
pub mod numerics;
pub mod pipeline;
pub mod tokenizer;

pub use error::{Error, Result};

//! Retrieval-augmented claim verification: sentence-level evidence is
//! embedded, indexed and retrieved per claim, then fed with the claim to a
//! veracity classifier.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32`/`f64`); the
//! aliases below fix the widths the pipeline uses.

pub mod corpus;
pub mod embed;
pub mod error;
pub mod eval;
mod http;
pub mod index;
pub mod pipeline;
pub mod retrieve;
pub mod scalar;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};

/// Unit-norm embedding as stored and indexed.
pub type Embedding = embed::EmbeddingVector<f32>;
/// Similarity index over [`Embedding`]s.
pub type Index = index::VectorIndex<f32>;
/// Softmax veracity head, trained in double precision.
pub type Head = verify::SoftmaxHead<f64>;

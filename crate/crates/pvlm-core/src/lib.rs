//! Probabilistic vision-language embeddings at desk scale.
//!
//! Diagonal-Gaussian image/text embeddings from tiny transformer encoders
//! with dedicated [CLS]/[UNC] tokens, a three-part probabilistic training
//! objective, anchored positional-embedding interpolation for extending the
//! text context length, a deterministic fine-tuning loop with bit-exact
//! checkpointing, and a retrieval / zero-shot / uncertainty evaluation
//! harness over synthetic corpora.

pub mod context_ext;
pub mod data;
pub mod encoders;
pub mod evalsuite;
pub mod gradcheck;
pub mod objectives;
pub mod prob_geom;
pub mod tape;
pub mod tensor;
pub mod training;

pub use encoders::{EncoderConfig, Model, PositionalTable, TokenSequence};
pub use prob_geom::ProbEmbedding;
pub use tensor::Tensor;

//! A desk-scale mixture-of-visual-experts language model.
//!
//! Three toy visual encoders (semantic, low-level, document) are summarized
//! by learnable query tokens, fused into one visual token sequence, combined
//! with a serialized structural-knowledge text prompt, and decoded by a small
//! causal language model trained through a three-stage freeze-mask pipeline.

pub mod attention;
pub mod error;
pub mod image;
pub mod knowledge;
pub mod scene;
pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use error::{Error, Result};

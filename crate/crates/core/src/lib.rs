//! Vision Transformer inference with staged patch pruning.
//!
//! The engine runs a DeiT-S shaped transformer and, at designated blocks,
//! ranks patch tokens by how the class token's attention to them varies
//! across heads (mean, variance or median absolute deviation), drops the
//! low-ranked ones and optionally folds them into a single fusion token.
//!
//! Module map:
//! - [`tensor`]: dense f32 kernel with optional MAC counting
//! - [`model`]: patch embedding, attention, blocks and the pruning-aware forward
//! - [`pruning`]: importance indicators, top-k partition, fusion
//! - [`cost`]: closed-form MAC model of the same forward pass
//! - [`io`]: weight container, random weights, PPM images

pub mod cost;
pub mod error;
pub mod io;
pub mod model;
pub mod pruning;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{ClassAttention, ModelConfig, PatchOrigin, TokenSequence};
pub use pruning::{IndicatorKind, IndicatorScores, PruneDecision};
pub use tensor::{Backend, Exec, Matrix, OpCounter};

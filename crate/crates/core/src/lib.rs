//! Pose transformer with sparse attention.
//!
//! Keypoint tokens and patch tokens share a transformer encoder whose
//! patch-to-patch attention is pruned by per-row top-K selection at scheduled
//! layers. The keypoint tokens then pass through a second stack masked by a
//! fixed skeleton graph, and an MLP head predicts one heatmap per joint.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod digest;
pub mod evaluation;
pub mod error;
pub mod mask;
pub mod model;
pub mod parallel;
pub mod pruning;
pub mod skeleton;
pub mod tensor;

pub use error::{Error, Result};
pub use mask::AttentionMask;
pub use tensor::{Tape, Tensor, Var};

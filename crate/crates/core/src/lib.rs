//! Dynamic accumulated attention maps for vision transformers.
//!
//! The crate runs a traced ViT forward pass, splits each block's class token
//! into per-token contributions, weights them by channel importance taken from
//! a classifier row or a memory bank, and accumulates the per-block maps into
//! an attention flow. Evaluation metrics, a cascading-randomization sanity
//! check, a weight archive format and heatmap rendering round it out.

pub mod daam;
pub mod error;
pub mod eval;
pub mod memory_bank;
pub mod model_io;
pub mod numerics;
pub mod render;
pub mod sanity;
pub mod vit;

pub use error::{ArchiveError, Error, Result};
pub use numerics::Tensor;

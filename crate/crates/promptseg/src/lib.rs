//! Prompt-conditioned segmentation at desk scale.
//!
//! One small language model drives every segmentation flavor — whole-scene,
//! expression-referring, click/scribble/box/mask-prompted, open-vocabulary,
//! and frame-to-frame propagation — through a shared input schema: image
//! patches, an instruction, a task-specific condition, and a fixed set of
//! learnable mask tokens. Proposal masks are decoded from the LM's mask-token
//! outputs and classified against embeddings of the condition, so new
//! categories or expressions need no new heads.
//!
//! Everything here is self-contained: tensors and autodiff, the model,
//! synthetic data, training, and evaluation run on CPU with no external
//! model weights.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod mask;
pub mod maskgen;
pub mod model;
pub mod rng;
pub mod runner;
pub mod schema;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

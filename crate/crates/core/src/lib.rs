//! Rotation-invariant mitosis detection: P4-equivariant patch classifiers,
//! balanced training with stochastic augmentation, hard-negative mining,
//! stain-based negative enrichment, dense inference and detection metrics.

pub mod augment;
pub mod cli;
pub mod data;
pub mod detect;
pub mod error;
pub mod eval;
pub mod mining;
pub mod nnet;
pub mod stain;
pub mod train;

pub use error::{Error, Result};

//! prunekit: a compression toolkit for dense feed-forward networks.
//!
//! The crate covers the full loop of a pruning study: damage estimation
//! (random, magnitude, OBD, OBD-SD, squared-gradient surrogate, dropout
//! regression), mask-based and structural pruning, neuron merging, iterative
//! prune/fine-tune protocols, f16 quantization, raw/zipped size accounting,
//! and the ROC metrics the tradeoff curves are drawn from. A small CLI
//! (`prunekit`) orchestrates experiments from a JSON config.

pub mod cli;
pub mod compress;
pub mod damage;
pub mod data;
pub mod error;
pub mod metrics;
pub mod prune;
pub mod nn;
pub mod oracle;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Precision;

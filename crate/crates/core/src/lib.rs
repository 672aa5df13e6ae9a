//! One-shot, gradient-free pruning for Llama-style decoder-only transformers.
//!
//! The crate collects per-language input-activation statistics at every
//! linear sublayer, turns them into per-weight importance scores (magnitude,
//! Wanda, M-Wanda, RIA, M-RIA), allocates layerwise sparsity (uniform, OWL,
//! CWL) and applies the resulting unstructured masks.
//!
//! Module map:
//! - [`container`]: safetensors-compatible f32 container format
//! - [`tensor`]: row-major matrices
//! - [`model`]: model graph, forward pass, perplexity, byte tokenizer
//! - [`calib`]: streaming calibration statistics
//! - [`criteria`]: importance scores
//! - [`allocation`]: layerwise sparsity plans
//! - [`masker`]: mask construction, application and verification
//! - [`pipeline`]: the `calibrate` / `prune` / `eval-ppl` / `inspect` / `sweep` commands

pub mod allocation;
pub mod calib;
pub mod container;
pub mod criteria;
pub mod error;
pub mod masker;
pub mod model;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};

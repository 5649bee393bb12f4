//! Desk-scale inference engine for block-wise masked-diffusion language
//! model decoding, with pluggable KV-cache policies.
//!
//! A diffusion LM decodes by iteratively unmasking a fully masked suffix
//! over `T` steps, recomputing attention for the whole sequence at every
//! step. This crate implements that loop on a deterministic toy transformer
//! and the cache machinery that makes it cheap: outside-block KV states are
//! written once per block (one step late, after they have settled), pruned
//! to the top fraction of attention-salient positions, and reused for the
//! remaining steps of the block.
//!
//! Modules:
//! - [`numerics`]: dense f64 kernels with a multiply-add counter
//! - [`model`]: the toy bidirectional transformer (mask predictor)
//! - [`decoder`]: the block-wise unmasking loop
//! - [`cache`]: cache state machine and the eviction policies
//! - [`analysis`]: attention traces, saliency overlap, KV drift
//! - [`harness`]: experiment configs, reports, comparisons, sweeps

pub mod analysis;
pub mod cache;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;

pub use error::{EngineError, Result};

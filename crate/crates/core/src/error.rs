//! Error types shared across the engine.

use thiserror::Error;

/// Unified error type for the decode engine and harness.
#[derive(Debug, Error)]
pub enum EngineError {
    /// Matrix dimensions do not line up for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value is invalid; the message names the offending field.
    #[error("config error: {0}")]
    Config(String),

    /// A sequence exceeds the model's maximum supported length.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Malformed caller-supplied input (empty prompt, mismatched traces, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A cached forward pass was requested but the layer cache is missing or empty.
    #[error("cache-state error: {0}")]
    CacheState(String),

    /// Eviction retained zero entries; a later reuse step would attend nothing.
    #[error("degenerate-cache error: {0}")]
    DegenerateCache(String),

    /// The decode schedule cannot supply the per-step unmask budget.
    #[error("schedule error: {0}")]
    Schedule(String),

    /// A requested (layer, step) trace falls on a cached step with no full rows.
    #[error("trace-unavailable error: {0}")]
    TraceUnavailable(String),

    /// Reports being compared were produced under different decode configs.
    #[error("comparison error: {0}")]
    Comparison(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl EngineError {
    /// Process exit code contract: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            EngineError::Config(_) | EngineError::Json(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, EngineError>;

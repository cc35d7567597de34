//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor construction, quantization, planning and the
/// integer operators.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor dimension was zero or the data length does not match the shape.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// An index or slice fell outside the tensor extent.
    #[error("out of bounds: {0}")]
    Bounds(String),

    /// A quantization scheme violated its invariants (alpha < 1, T_s = 0, ...).
    #[error("invalid scheme: {0}")]
    InvalidScheme(String),

    /// A numeric precondition failed (non-finite input, non-positive scale).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Operand shapes do not chain.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// The requested kernel/stride combination has no Winograd plan.
    #[error("unsupported plan: {0}")]
    UnsupportedPlan(String),

    /// 32-bit accumulation head-room would be exceeded.
    #[error("overflow risk: {0}")]
    OverflowRisk(String),

    /// Quantization schemes fail the Winograd transform overflow check.
    #[error("unsafe scheme: {0}")]
    UnsafeScheme(String),

    /// Argument outside the operation's domain (e.g. speedup for k < 2).
    #[error("domain error: {0}")]
    Domain(String),

    /// Training loss became non-finite.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// Integer deployment path disagrees with the fake-quant simulation.
    #[error(
        "deployment mismatch at layer {layer}, element {index}: \
         integer path {integer}, simulated {simulated} (deviation {deviation:.3e})"
    )]
    DeploymentMismatch {
        layer: usize,
        index: usize,
        integer: f32,
        simulated: f32,
        deviation: f64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

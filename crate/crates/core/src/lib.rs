//! Quantized Winograd Conv1D toolkit.
//!
//! Implements range-scaled symmetric quantization, an overflow-safe INT8
//! Winograd F(2,3) Conv1D operator with tap-group splitting, reference
//! convolution oracles, KL-divergence scale calibration, and the
//! fake-quantization training math (learnable step sizes plus a quantization
//! noise loss) needed to fine-tune models for the integer operator.
//!
//! Real-valued math is generic over the scalar type (see [`scalar::Real`]);
//! the concrete aliases below cover the common cases.

pub mod error;
pub mod gradcheck;
pub mod io;
pub mod quant;
pub mod reference;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod wino;

pub use error::{Error, Result};
pub use scalar::Real;

/// Real tensor in deployment precision.
pub type TensorF32 = tensor::Tensor<f32>;
/// Real tensor in verification precision.
pub type TensorF64 = tensor::Tensor<f64>;
/// Accumulator-domain integer tensor.
pub type TensorI32 = tensor::Tensor<i32>;
/// Quantized-value tensor.
pub type TensorI8 = tensor::Tensor<i8>;

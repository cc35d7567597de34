//! Scalar abstraction for the real-valued math.
//!
//! Everything that operates on real tensors (quantization, convolution,
//! training gradients) is generic over [`Real`] so the same code runs in
//! `f32` for deployment-faithful simulation and in `f64` for gradient
//! verification. Integer kernels are concrete and not covered by this trait.

use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssign};

/// Floating-point scalar usable as a tensor element.
///
/// `Float::round` rounds half away from zero, which is exactly the rounding
/// mode the quantizer requires, so no extra rounding hook is needed.
pub trait Real: Float + NumAssign + Debug + Display + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }

    fn from_i32(n: i32) -> Self {
        Self::from_f64(f64::from(n))
    }
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_is_half_away_from_zero() {
        assert_eq!(<f32 as Float>::round(0.5f32), 1.0);
        assert_eq!(<f32 as Float>::round(-0.5f32), -1.0);
        assert_eq!(<f32 as Float>::round(2.5f32), 3.0);
        assert_eq!(<f64 as Float>::round(-2.5f64), -3.0);
        assert_eq!(<f64 as Float>::round(1.4f64), 1.0);
    }
}

//! Dense 3-D tensor containers shared by every other module.
//!
//! Layout is `(batch, channels, width)` with width contiguous, which makes a
//! Conv1D window a stride-1 slice of a row. Weight tensors reuse the same
//! container with the axes read as `(c_out, c_in, k)`. Tensors are immutable
//! after construction in all read paths; mutation happens only while a value
//! is being built.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extent of a 3-D tensor. For weights the axes are `(c_out, c_in, k)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(batch: usize, channels: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            width,
        }
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.batch * self.channels * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.channels == 0 || self.width == 0 {
            return Err(Error::InvalidShape(format!(
                "all dimensions must be >= 1, got ({}, {}, {})",
                self.batch, self.channels, self.width
            )));
        }
        Ok(())
    }
}

/// Dense row-major tensor. `Tensor<f32>` holds real values, `Tensor<i8>`
/// quantized values and `Tensor<i32>` accumulator results.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Copy> Tensor<T> {
    /// Tensor of the requested shape with every element set to `fill`.
    pub fn filled(shape: Shape, fill: T) -> Result<Self> {
        shape.validate()?;
        Ok(Tensor {
            shape,
            data: vec![fill; shape.len()],
        })
    }

    /// Wrap an existing buffer; `data.len()` must equal the shape's element count.
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::InvalidShape(format!(
                "data length {} does not match shape ({}, {}, {}) = {}",
                data.len(),
                shape.batch,
                shape.channels,
                shape.width,
                shape.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable view of the backing buffer; construction-time use only.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    fn offset(&self, b: usize, c: usize, w: usize) -> usize {
        (b * self.shape.channels + c) * self.shape.width + w
    }

    /// Element at `(b, c, w)`. Panics on out-of-range indices like a slice.
    #[inline]
    pub fn at(&self, b: usize, c: usize, w: usize) -> T {
        debug_assert!(b < self.shape.batch && c < self.shape.channels && w < self.shape.width);
        self.data[self.offset(b, c, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, c: usize, w: usize) -> &mut T {
        let idx = self.offset(b, c, w);
        &mut self.data[idx]
    }

    /// Contiguous width-axis row at `(b, c)`.
    #[inline]
    pub fn row(&self, b: usize, c: usize) -> &[T] {
        let start = self.offset(b, c, 0);
        &self.data[start..start + self.shape.width]
    }

    #[inline]
    pub fn row_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let start = self.offset(b, c, 0);
        let width = self.shape.width;
        &mut self.data[start..start + width]
    }

    /// Contiguous tap slice of a weight tensor along the kernel axis, copied.
    ///
    /// Axes are read as `(c_out, c_in, k)`; the result has kernel extent `len`.
    pub fn tap_group(&self, offset: usize, len: usize) -> Result<Self> {
        let k = self.shape.width;
        if len == 0 {
            return Err(Error::InvalidShape(
                "tap group length must be >= 1".to_string(),
            ));
        }
        if offset + len > k {
            return Err(Error::Bounds(format!(
                "tap group [{offset}, {}) exceeds kernel size {k}",
                offset + len
            )));
        }
        let out_shape = Shape::new(self.shape.batch, self.shape.channels, len);
        let mut data = Vec::with_capacity(out_shape.len());
        for co in 0..self.shape.batch {
            for ci in 0..self.shape.channels {
                let row = self.row(co, ci);
                data.extend_from_slice(&row[offset..offset + len]);
            }
        }
        Tensor::from_vec(out_shape, data)
    }

    /// Apply `f` element-wise, producing a new tensor of the same shape.
    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().copied().map(f).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn filled_zero() {
        let t = Tensor::filled(Shape::new(1, 1, 4), 0.0f32).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
    }

    #[test]
    fn filled_constant() {
        let t = Tensor::filled(Shape::new(2, 3, 5), 1.5f32).unwrap();
        assert_eq!(t.data().len(), 30);
        assert!(t.data().iter().all(|&x| x == 1.5));
    }

    #[test]
    fn zero_dimension_rejected() {
        let err = Tensor::filled(Shape::new(1, 1, 0), 0.0f32).unwrap_err();
        assert!(matches!(err, Error::InvalidShape(_)));
    }

    #[test]
    fn from_vec_length_mismatch() {
        let err = Tensor::from_vec(Shape::new(1, 2, 2), vec![0.0f32; 3]).unwrap_err();
        assert!(matches!(err, Error::InvalidShape(_)));
    }

    #[test]
    fn tap_group_k8_head() {
        // k=8 kernel split: first group covers taps {0,1,2}
        let w: Vec<f32> = (0..8).map(|i| i as f32).collect();
        let t = Tensor::from_vec(Shape::new(1, 1, 8), w).unwrap();
        let g = t.tap_group(0, 3).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn tap_group_k8_remainder() {
        // trailing k mod 3 taps {6,7}
        let w: Vec<f32> = (0..8).map(|i| i as f32).collect();
        let t = Tensor::from_vec(Shape::new(1, 1, 8), w).unwrap();
        let g = t.tap_group(6, 2).unwrap();
        assert_eq!(g.data(), &[6.0, 7.0]);
    }

    #[test]
    fn tap_group_identity_slice() {
        let w = vec![1.0f32, 2.0, 3.0];
        let t = Tensor::from_vec(Shape::new(1, 1, 3), w.clone()).unwrap();
        let g = t.tap_group(0, 3).unwrap();
        assert_eq!(g.data(), w.as_slice());
    }

    #[test]
    fn tap_group_out_of_range() {
        let t = Tensor::filled(Shape::new(1, 1, 8), 0.0f32).unwrap();
        assert!(matches!(t.tap_group(6, 3).unwrap_err(), Error::Bounds(_)));
    }

    #[test]
    fn indexing_is_pure() {
        let t = Tensor::from_vec(Shape::new(1, 2, 2), vec![1, 2, 3, 4]).unwrap();
        assert_eq!(t.at(0, 1, 0), 3);
        assert_eq!(t.at(0, 1, 0), 3);
    }

    proptest! {
        /// Concatenating tap groups that cover [0, k) reconstructs the kernel.
        #[test]
        fn tap_groups_cover_kernel(
            c_out in 1usize..4,
            c_in in 1usize..4,
            k in 1usize..16,
            seed in any::<u64>(),
        ) {
            let mut state = seed;
            let mut next = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 33) as f32 / 1e6
            };
            let shape = Shape::new(c_out, c_in, k);
            let data: Vec<f32> = (0..shape.len()).map(|_| next()).collect();
            let t = Tensor::from_vec(shape, data).unwrap();

            let groups = k / 3;
            let rem = k % 3;
            let mut rebuilt = vec![Vec::new(); c_out * c_in];
            for g in 0..groups {
                let slice = t.tap_group(3 * g, 3).unwrap();
                for co in 0..c_out {
                    for ci in 0..c_in {
                        rebuilt[co * c_in + ci].extend_from_slice(slice.row(co, ci));
                    }
                }
            }
            if rem > 0 {
                let slice = t.tap_group(3 * groups, rem).unwrap();
                for co in 0..c_out {
                    for ci in 0..c_in {
                        rebuilt[co * c_in + ci].extend_from_slice(slice.row(co, ci));
                    }
                }
            }
            for co in 0..c_out {
                for ci in 0..c_in {
                    prop_assert_eq!(rebuilt[co * c_in + ci].as_slice(), t.row(co, ci));
                }
            }
        }
    }
}

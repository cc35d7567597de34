//! Ground-truth convolution paths: direct Conv1D, real-arithmetic Winograd
//! Conv1D, and the plain INT8 GEMM operator.
//!
//! All convolutions use the cross-correlation convention (no kernel flip)
//! with zero padding. The direct path is the oracle everything else is
//! checked against; the integer GEMM doubles as the equivalence oracle for
//! the INT8 Winograd operator.

use crate::error::{Error, Result};
use crate::quant::QuantizedTensor;
use crate::scalar::Real;
use crate::tensor::{Shape, Tensor};
use crate::wino::{split_taps, WinogradBasis};

/// Real-valued Conv1D layer with weights `(c_out, c_in, k)`.
#[derive(Clone, Debug)]
pub struct Conv1DLayer<T: Real> {
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub padding: (usize, usize),
}

impl<T: Real> Conv1DLayer<T> {
    /// `bias = None` means all zeros.
    pub fn new(
        weights: Tensor<T>,
        bias: Option<Vec<T>>,
        stride: usize,
        padding: (usize, usize),
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidShape("stride must be >= 1".to_string()));
        }
        let c_out = weights.shape().batch;
        let bias = bias.unwrap_or_else(|| vec![T::zero(); c_out]);
        if bias.len() != c_out {
            return Err(Error::ShapeMismatch(format!(
                "bias length {} does not match c_out {}",
                bias.len(),
                c_out
            )));
        }
        Ok(Conv1DLayer {
            weights,
            bias,
            stride,
            padding,
        })
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape().batch
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape().channels
    }

    pub fn k(&self) -> usize {
        self.weights.shape().width
    }

    pub fn out_width(&self, in_width: usize) -> Result<usize> {
        out_width(in_width, self.k(), self.stride, self.padding)
    }
}

pub(crate) fn out_width(
    in_width: usize,
    k: usize,
    stride: usize,
    padding: (usize, usize),
) -> Result<usize> {
    let padded = in_width + padding.0 + padding.1;
    if padded < k {
        return Err(Error::ShapeMismatch(format!(
            "padded width {padded} shorter than kernel {k}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Copy one `(b, c)` row into a zero-padded buffer.
pub(crate) fn padded_row<T: Copy + Default>(
    input: &Tensor<T>,
    b: usize,
    c: usize,
    padding: (usize, usize),
) -> Vec<T> {
    let width = input.shape().width;
    let mut row = vec![T::default(); width + padding.0 + padding.1];
    row[padding.0..padding.0 + width].copy_from_slice(input.row(b, c));
    row
}

/// Direct cross-correlation:
/// `out[b,co,i] = bias[co] + sum_{ci,j} in[b,ci,i*stride+j-left] * w[co,ci,j]`
/// with zeros outside the padded extent.
pub fn conv1d_direct<T: Real>(input: &Tensor<T>, layer: &Conv1DLayer<T>) -> Result<Tensor<T>> {
    let in_shape = input.shape();
    if in_shape.channels != layer.c_in() {
        return Err(Error::ShapeMismatch(format!(
            "input channels {} vs layer c_in {}",
            in_shape.channels,
            layer.c_in()
        )));
    }
    let ow = layer.out_width(in_shape.width)?;
    let k = layer.k();
    let mut out = Tensor::filled(Shape::new(in_shape.batch, layer.c_out(), ow), T::zero())?;
    for b in 0..in_shape.batch {
        let padded: Vec<Vec<T>> = (0..layer.c_in())
            .map(|ci| {
                let width = in_shape.width;
                let mut row = vec![T::zero(); width + layer.padding.0 + layer.padding.1];
                row[layer.padding.0..layer.padding.0 + width].copy_from_slice(input.row(b, ci));
                row
            })
            .collect();
        for co in 0..layer.c_out() {
            for i in 0..ow {
                let mut acc = layer.bias[co];
                for (ci, row) in padded.iter().enumerate() {
                    let w_row = layer.weights.row(co, ci);
                    let base = i * layer.stride;
                    for j in 0..k {
                        acc += row[base + j] * w_row[j];
                    }
                }
                *out.at_mut(b, co, i) = acc;
            }
        }
    }
    Ok(out)
}

/// Real-arithmetic Winograd Conv1D using the same tap split as the integer
/// operator: F(2,3) groups plus a direct remainder. Requires `k >= 3`,
/// `stride = 1`.
pub fn conv1d_winograd<T: Real>(input: &Tensor<T>, layer: &Conv1DLayer<T>) -> Result<Tensor<T>> {
    if layer.k() < 3 || layer.stride != 1 {
        return Err(Error::UnsupportedPlan(format!(
            "Winograd path needs k >= 3 and stride 1, got k={} stride={}",
            layer.k(),
            layer.stride
        )));
    }
    let in_shape = input.shape();
    if in_shape.channels != layer.c_in() {
        return Err(Error::ShapeMismatch(format!(
            "input channels {} vs layer c_in {}",
            in_shape.channels,
            layer.c_in()
        )));
    }
    let ow = layer.out_width(in_shape.width)?;
    let k = layer.k();
    let (groups, remainder) = split_taps(k);
    let n_tiles = ow / 2;
    let half = T::from_f64(0.5);

    // Weight transform G2*g per (co, ci, group); the x2 is removed at the end.
    let c_in = layer.c_in();
    let c_out = layer.c_out();
    let mut v = vec![T::zero(); c_out * c_in * groups.len() * 4];
    for co in 0..c_out {
        for ci in 0..c_in {
            let w_row = layer.weights.row(co, ci);
            for (g, &off) in groups.iter().enumerate() {
                let taps = [w_row[off], w_row[off + 1], w_row[off + 2]];
                let tw = WinogradBasis::weight_transform_real(taps);
                let base = ((co * c_in + ci) * groups.len() + g) * 4;
                v[base..base + 4].copy_from_slice(&tw);
            }
        }
    }

    let mut out = Tensor::filled(Shape::new(in_shape.batch, c_out, ow), T::zero())?;
    for b in 0..in_shape.batch {
        let padded: Vec<Vec<T>> = (0..c_in)
            .map(|ci| {
                let mut row =
                    vec![T::zero(); in_shape.width + layer.padding.0 + layer.padding.1];
                row[layer.padding.0..layer.padding.0 + in_shape.width]
                    .copy_from_slice(input.row(b, ci));
                row
            })
            .collect();
        for co in 0..c_out {
            for t in 0..n_tiles {
                let i0 = 2 * t;
                let mut m = [T::zero(); 4];
                for (ci, row) in padded.iter().enumerate() {
                    for (g, &off) in groups.iter().enumerate() {
                        let d = [
                            row[i0 + off],
                            row[i0 + off + 1],
                            row[i0 + off + 2],
                            row[i0 + off + 3],
                        ];
                        let td = WinogradBasis::input_transform_real(d);
                        let base = ((co * c_in + ci) * groups.len() + g) * 4;
                        for j in 0..4 {
                            m[j] += v[base + j] * td[j];
                        }
                    }
                }
                let mut y0 = (m[0] + m[1] + m[2]) * half;
                let mut y1 = (m[1] - m[2] - m[3]) * half;
                if remainder.len > 0 {
                    for (ci, row) in padded.iter().enumerate() {
                        let w_row = layer.weights.row(co, ci);
                        for j in 0..remainder.len {
                            let tap = remainder.offset + j;
                            y0 += row[i0 + tap] * w_row[tap];
                            y1 += row[i0 + 1 + tap] * w_row[tap];
                        }
                    }
                }
                *out.at_mut(b, co, i0) = y0 + layer.bias[co];
                *out.at_mut(b, co, i0 + 1) = y1 + layer.bias[co];
            }
            if ow % 2 == 1 {
                // final output point computed directly
                let i = ow - 1;
                let mut acc = layer.bias[co];
                for (ci, row) in padded.iter().enumerate() {
                    let w_row = layer.weights.row(co, ci);
                    for j in 0..k {
                        acc += row[i + j] * w_row[j];
                    }
                }
                *out.at_mut(b, co, i) = acc;
            }
        }
    }
    Ok(out)
}

/// Quantized Conv1D layer: integer weights with their scale, real bias.
#[derive(Clone, Debug)]
pub struct QuantizedConv1D {
    pub weights: QuantizedTensor,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub padding: (usize, usize),
}

impl QuantizedConv1D {
    pub fn new(
        weights: QuantizedTensor,
        bias: Option<Vec<f32>>,
        stride: usize,
        padding: (usize, usize),
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidShape("stride must be >= 1".to_string()));
        }
        let c_out = weights.shape().batch;
        let bias = bias.unwrap_or_else(|| vec![0.0; c_out]);
        if bias.len() != c_out {
            return Err(Error::ShapeMismatch(format!(
                "bias length {} does not match c_out {}",
                bias.len(),
                c_out
            )));
        }
        Ok(QuantizedConv1D {
            weights,
            bias,
            stride,
            padding,
        })
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape().batch
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape().channels
    }

    pub fn k(&self) -> usize {
        self.weights.shape().width
    }
}

/// Plain INT8 convolution via im2col and integer GEMM with 32-bit
/// accumulators. Returns the raw accumulator tensor and the dequantized
/// result `raw * s_d * s_g + bias`.
pub fn conv1d_int8_gemm(
    input: &QuantizedTensor,
    layer: &QuantizedConv1D,
) -> Result<(Tensor<i32>, Tensor<f32>)> {
    let in_shape = input.shape();
    if in_shape.channels != layer.c_in() {
        return Err(Error::ShapeMismatch(format!(
            "input channels {} vs layer c_in {}",
            in_shape.channels,
            layer.c_in()
        )));
    }
    let k = layer.k();
    let c_in = layer.c_in();
    let c_out = layer.c_out();
    let t_s_act = i64::from(input.scheme().t_s());
    let t_s_wt = i64::from(layer.weights.scheme().t_s());
    let worst = c_in as i64 * k as i64 * t_s_act * t_s_wt;
    if worst > i64::from(i32::MAX) {
        return Err(Error::OverflowRisk(format!(
            "c_in*k*T_s_act*T_s_wt = {worst} exceeds 32-bit accumulator head-room"
        )));
    }
    let ow = out_width(in_shape.width, k, layer.stride, layer.padding)?;

    let mut raw = Tensor::filled(Shape::new(in_shape.batch, c_out, ow), 0i32)?;
    let rows = c_in * k;
    let mut col = vec![0i8; rows * ow];
    for b in 0..in_shape.batch {
        // im2col: row (ci*k + j) holds the input window tap j for channel ci
        for ci in 0..c_in {
            let padded = padded_row(input.values(), b, ci, layer.padding);
            for j in 0..k {
                let dst = &mut col[(ci * k + j) * ow..(ci * k + j + 1) * ow];
                for (i, slot) in dst.iter_mut().enumerate() {
                    *slot = padded[i * layer.stride + j];
                }
            }
        }
        for co in 0..c_out {
            let out_row = raw.row_mut(b, co);
            for ci in 0..c_in {
                let w_row = layer.weights.values().row(co, ci);
                for j in 0..k {
                    let w = i32::from(w_row[j]);
                    if w == 0 {
                        continue;
                    }
                    let src = &col[(ci * k + j) * ow..(ci * k + j + 1) * ow];
                    for (acc, &x) in out_row.iter_mut().zip(src) {
                        *acc += w * i32::from(x);
                    }
                }
            }
        }
    }

    let factor = input.scale() * layer.weights.scale();
    let mut deq = Tensor::filled(raw.shape(), 0.0f32)?;
    for b in 0..in_shape.batch {
        for co in 0..c_out {
            let bias = f64::from(layer.bias[co]);
            let raw_row = raw.row(b, co).to_vec();
            let out_row = deq.row_mut(b, co);
            for (o, r) in out_row.iter_mut().zip(raw_row) {
                *o = (f64::from(r) * factor + bias) as f32;
            }
        }
    }
    Ok((raw, deq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{fake_quantize, quantize, QuantScheme};
    use rand::prelude::*;

    fn t1(values: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(Shape::new(1, 1, values.len()), values.to_vec()).unwrap()
    }

    fn layer1(w: &[f32]) -> Conv1DLayer<f32> {
        Conv1DLayer::new(t1(w), None, 1, (0, 0)).unwrap()
    }

    #[test]
    fn direct_box_kernel() {
        let out = conv1d_direct(&t1(&[1.0, 2.0, 3.0, 4.0]), &layer1(&[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(out.data(), &[6.0, 9.0]);
    }

    #[test]
    fn direct_pins_correlation_convention() {
        // asymmetric kernel: out[i] = in[i] under [1,0,0]
        let out = conv1d_direct(&t1(&[1.0, 2.0, 3.0, 4.0]), &layer1(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn direct_zero_kernel_keeps_bias() {
        let layer = Conv1DLayer::new(t1(&[0.0, 0.0, 0.0]), Some(vec![5.0]), 1, (0, 0)).unwrap();
        let out = conv1d_direct(&t1(&[1.0, 2.0, 3.0, 4.0]), &layer).unwrap();
        assert_eq!(out.data(), &[5.0, 5.0]);
    }

    #[test]
    fn direct_same_padding_preserves_width() {
        let layer = Conv1DLayer::new(t1(&[0.5, 1.0, -0.25]), None, 1, (1, 1)).unwrap();
        let out = conv1d_direct(&t1(&[1.0, 2.0, 3.0, 4.0]), &layer).unwrap();
        assert_eq!(out.shape().width, 4);
        // edges see zeros outside
        assert_eq!(out.data()[0], 1.0 * 1.0 + 2.0 * -0.25);
    }

    #[test]
    fn winograd_matches_direct_small() {
        let input = t1(&[1.0, 2.0, 3.0, 4.0]);
        let layer = layer1(&[1.0, 1.0, 1.0]);
        let wino = conv1d_winograd(&input, &layer).unwrap();
        for (a, b) in wino.data().iter().zip([6.0, 9.0]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn winograd_matches_direct_random_k15() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let in_shape = Shape::new(1, 4, 64);
        let input = Tensor::from_vec(
            in_shape,
            (0..in_shape.len()).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        let w_shape = Shape::new(3, 4, 15);
        let weights = Tensor::from_vec(
            w_shape,
            (0..w_shape.len()).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        let bias: Vec<f32> = (0..3).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let layer = Conv1DLayer::new(weights, Some(bias), 1, (2, 1)).unwrap();

        let direct = conv1d_direct(&input, &layer).unwrap();
        let wino = conv1d_winograd(&input, &layer).unwrap();
        assert_eq!(direct.shape(), wino.shape());
        for (a, b) in wino.data().iter().zip(direct.data()) {
            let rel = (a - b).abs() / b.abs().max(1e-3);
            assert!(rel < 1e-4, "winograd {a} vs direct {b}");
        }
    }

    #[test]
    fn winograd_rejects_small_kernel() {
        let err = conv1d_winograd(&t1(&[1.0, 2.0, 3.0]), &layer1(&[1.0, 1.0])).unwrap_err();
        assert!(matches!(err, Error::UnsupportedPlan(_)));
    }

    #[test]
    fn winograd_rejects_stride() {
        let layer = Conv1DLayer::new(t1(&[1.0, 1.0, 1.0]), None, 2, (0, 0)).unwrap();
        let err = conv1d_winograd(&t1(&[1.0, 2.0, 3.0, 4.0, 5.0]), &layer).unwrap_err();
        assert!(matches!(err, Error::UnsupportedPlan(_)));
    }

    fn qtensor(values: Vec<i8>, scale: f64, scheme: QuantScheme) -> QuantizedTensor {
        QuantizedTensor::from_parts(
            Tensor::from_vec(Shape::new(1, 1, values.len()), values).unwrap(),
            scale,
            scheme,
        )
        .unwrap()
    }

    #[test]
    fn gemm_hand_sum() {
        let act = QuantScheme::int8_winograd_act();
        let wt = QuantScheme::int8_winograd_wt();
        let input = qtensor(vec![10, 20, 30, 40], 1.0, act);
        let weights = qtensor(vec![1, 1, 1], 1.0, wt);
        let layer = QuantizedConv1D::new(weights, None, 1, (0, 0)).unwrap();
        let (raw, deq) = conv1d_int8_gemm(&input, &layer).unwrap();
        assert_eq!(raw.data(), &[60, 90]);
        assert_eq!(deq.data(), &[60.0, 90.0]);
    }

    #[test]
    fn gemm_zero_weights() {
        let input = qtensor(vec![5, -7, 9, 11], 0.5, QuantScheme::int8_winograd_act());
        let weights = qtensor(vec![0, 0, 0], 0.1, QuantScheme::int8_winograd_wt());
        let layer = QuantizedConv1D::new(weights, None, 1, (0, 0)).unwrap();
        let (raw, _) = conv1d_int8_gemm(&input, &layer).unwrap();
        assert_eq!(raw.data(), &[0, 0]);
    }

    #[test]
    fn gemm_scale_algebra() {
        let input = qtensor(vec![10, 20, 30, 40], 0.5, QuantScheme::int8_winograd_act());
        let weights = qtensor(vec![1, 1, 1], 0.1, QuantScheme::int8_winograd_wt());
        let layer = QuantizedConv1D::new(weights, None, 1, (0, 0)).unwrap();
        let (raw, deq) = conv1d_int8_gemm(&input, &layer).unwrap();
        for (r, d) in raw.data().iter().zip(deq.data()) {
            assert!((f64::from(*d) - f64::from(*r) * 0.05).abs() < 1e-9);
        }
    }

    #[test]
    fn gemm_headroom_check() {
        // c_in=1, k=3 is fine at full range; a huge channel count is not
        let act = QuantScheme::int8_full();
        let wt = QuantScheme::int8_full();
        let c_in = 90_000;
        let input = QuantizedTensor::from_parts(
            Tensor::filled(Shape::new(1, c_in, 4), 1i8).unwrap(),
            1.0,
            act,
        )
        .unwrap();
        let weights = QuantizedTensor::from_parts(
            Tensor::filled(Shape::new(1, c_in, 3), 1i8).unwrap(),
            1.0,
            wt,
        )
        .unwrap();
        let layer = QuantizedConv1D::new(weights, None, 1, (0, 0)).unwrap();
        let err = conv1d_int8_gemm(&input, &layer).unwrap_err();
        assert!(matches!(err, Error::OverflowRisk(_)));
    }

    #[test]
    fn gemm_linearity_in_inputs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let act = QuantScheme::int8_winograd_act();
        let wt = QuantScheme::int8_winograd_wt();
        let shape = Shape::new(2, 3, 17);
        let values: Vec<i8> = (0..shape.len()).map(|_| rng.gen_range(-31..=31)).collect();
        let doubled: Vec<i8> = values.iter().map(|&v| v * 2).collect();
        let w_shape = Shape::new(2, 3, 5);
        let w: Vec<i8> = (0..w_shape.len()).map(|_| rng.gen_range(-42..=42)).collect();

        let weights = QuantizedTensor::from_parts(
            Tensor::from_vec(w_shape, w).unwrap(),
            0.01,
            wt,
        )
        .unwrap();
        let layer = QuantizedConv1D::new(weights, None, 1, (1, 1)).unwrap();
        let q1 = QuantizedTensor::from_parts(
            Tensor::from_vec(shape, values).unwrap(),
            0.02,
            act,
        )
        .unwrap();
        let q2 = QuantizedTensor::from_parts(
            Tensor::from_vec(shape, doubled).unwrap(),
            0.02,
            act,
        )
        .unwrap();
        let (r1, _) = conv1d_int8_gemm(&q1, &layer).unwrap();
        let (r2, _) = conv1d_int8_gemm(&q2, &layer).unwrap();
        for (a, b) in r1.data().iter().zip(r2.data()) {
            assert_eq!(*b, 2 * *a);
        }
    }

    #[test]
    fn gemm_agrees_with_direct_on_fake_quantized() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let act = QuantScheme::int8_winograd_act();
        let wt = QuantScheme::int8_winograd_wt();
        let in_shape = Shape::new(2, 3, 20);
        let input = Tensor::from_vec(
            in_shape,
            (0..in_shape.len()).map(|_| rng.gen_range(-2.0f32..2.0)).collect(),
        )
        .unwrap();
        let w_shape = Shape::new(4, 3, 7);
        let weights = Tensor::from_vec(
            w_shape,
            (0..w_shape.len()).map(|_| rng.gen_range(-0.5f32..0.5)).collect(),
        )
        .unwrap();
        let bias: Vec<f32> = (0..4).map(|_| rng.gen_range(-0.5f32..0.5)).collect();

        let s_d = 2.0f32 / 63.0;
        let s_g = 0.5f32 / 42.0;
        let q_in = quantize(&input, s_d, act).unwrap();
        let q_w = quantize(&weights, s_g, wt).unwrap();
        let qlayer = QuantizedConv1D::new(q_w, Some(bias.clone()), 2, (1, 0)).unwrap();
        let (_, deq) = conv1d_int8_gemm(&q_in, &qlayer).unwrap();

        let fq_in = fake_quantize(&input, s_d, act).unwrap();
        let fq_w = fake_quantize(&weights, s_g, wt).unwrap();
        let flayer = Conv1DLayer::new(fq_w, Some(bias), 2, (1, 0)).unwrap();
        let expect = conv1d_direct(&fq_in, &flayer).unwrap();

        assert_eq!(deq.shape(), expect.shape());
        for (a, b) in deq.data().iter().zip(expect.data()) {
            let rel = (a - b).abs() / b.abs().max(1.0);
            assert!(rel < 1e-5, "int path {a} vs fake-quant direct {b}");
        }
    }
}

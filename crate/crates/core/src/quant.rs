//! Symmetric uniform quantization with integer range scaling, plus min-max
//! and KL-divergence scale calibration.
//!
//! A scheme holds a base integer range `[-T, T]` shrunk by a scaling factor
//! `alpha >= 1` to the effective range `[-T_s, T_s]`, `T_s = floor(T/alpha)`.
//! Shrinking the range is what keeps the Winograd input and weight transforms
//! (which amplify magnitudes by 2x and 3x) inside the 8-bit storage width.
//!
//! All real-valued operations are generic over [`Real`]; quantized storage is
//! always `i8` because every supported scheme fits 8-bit deployment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Scale assigned to tensors whose values are all zero, so degenerate layers
/// calibrate instead of erroring.
pub const EPSILON_SCALE: f64 = 1e-8;

/// Default histogram resolution for KL calibration.
pub const DEFAULT_KL_BINS: usize = 2048;

/// Mass moved onto empty quantized bins when smoothing the candidate
/// distribution.
const KL_SMOOTH_EPS: f64 = 1e-4;

/// Storage bit-width, base integer range and scaling factor of a symmetric
/// uniform quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantScheme {
    storage_bits: u32,
    base_t: i32,
    alpha: f64,
    t_s: i32,
}

impl QuantScheme {
    /// Build a scheme with effective range `T_s = floor(base_t / alpha)`.
    pub fn new(storage_bits: u32, base_t: i32, alpha: f64) -> Result<Self> {
        if !(2..=8).contains(&storage_bits) {
            return Err(Error::InvalidScheme(format!(
                "storage bits must be in 2..=8, got {storage_bits}"
            )));
        }
        let limit = (1i32 << (storage_bits - 1)) - 1;
        if base_t < 1 || base_t > limit {
            return Err(Error::InvalidScheme(format!(
                "base range {base_t} outside [1, {limit}] for {storage_bits}-bit storage"
            )));
        }
        if !alpha.is_finite() || alpha < 1.0 {
            return Err(Error::InvalidScheme(format!(
                "scaling factor must be finite and >= 1, got {alpha}"
            )));
        }
        let t_s = (f64::from(base_t) / alpha).floor() as i32;
        if t_s < 1 {
            return Err(Error::InvalidScheme(format!(
                "effective range floor({base_t}/{alpha}) = {t_s} must be >= 1"
            )));
        }
        Ok(QuantScheme {
            storage_bits,
            base_t,
            alpha,
            t_s,
        })
    }

    pub fn storage_bits(&self) -> u32 {
        self.storage_bits
    }

    pub fn base_t(&self) -> i32 {
        self.base_t
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Effective integer range bound: values live in `[-T_s, T_s]`.
    pub fn t_s(&self) -> i32 {
        self.t_s
    }

    /// Largest value representable in the storage width.
    pub fn storage_limit(&self) -> i32 {
        (1i32 << (self.storage_bits - 1)) - 1
    }

    /// Activation scheme for the INT8 Winograd path: 7-bit range, unscaled.
    pub fn int8_winograd_act() -> Self {
        QuantScheme::new(8, 63, 1.0).expect("fixed scheme")
    }

    /// Weight scheme for the INT8 Winograd path: 7-bit range scaled to
    /// `[-42, 42]`.
    pub fn int8_winograd_wt() -> Self {
        QuantScheme::new(8, 63, 1.5).expect("fixed scheme")
    }

    /// Full-range scheme for layers quantized as plain INT8 GEMM.
    pub fn int8_full() -> Self {
        QuantScheme::new(8, 127, 1.0).expect("fixed scheme")
    }
}

/// Signed-integer tensor with the real scale and scheme that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    values: Tensor<i8>,
    scale: f64,
    scheme: QuantScheme,
}

impl QuantizedTensor {
    pub fn values(&self) -> &Tensor<i8> {
        &self.values
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn scheme(&self) -> QuantScheme {
        self.scheme
    }

    pub fn shape(&self) -> crate::tensor::Shape {
        self.values.shape()
    }

    /// Assemble from parts, checking the range invariant.
    pub fn from_parts(values: Tensor<i8>, scale: f64, scheme: QuantScheme) -> Result<Self> {
        if !scale.is_finite() || scale <= 0.0 {
            return Err(Error::Numeric(format!(
                "scale must be finite and > 0, got {scale}"
            )));
        }
        let t_s = scheme.t_s();
        if let Some(&v) = values
            .data()
            .iter()
            .find(|&&v| i32::from(v).abs() > t_s)
        {
            return Err(Error::Numeric(format!(
                "quantized value {v} outside [-{t_s}, {t_s}]"
            )));
        }
        Ok(QuantizedTensor {
            values,
            scale,
            scheme,
        })
    }
}

fn check_scale<T: Real>(scale: T) -> Result<()> {
    if !scale.is_finite() || scale <= T::zero() {
        return Err(Error::Numeric(format!(
            "scale must be finite and > 0, got {scale}"
        )));
    }
    Ok(())
}

/// Integer image of one element: `round(clip(v/s, -T_s, T_s))` with
/// round-half-away-from-zero.
#[inline]
fn quantize_value<T: Real>(v: T, scale: T, t_s: T) -> T {
    (v / scale).max(-t_s).min(t_s).round()
}

/// Quantize to integers in `[-T_s, T_s]` without the re-scale by `s`.
pub fn quantize<T: Real>(
    v: &Tensor<T>,
    scale: T,
    scheme: QuantScheme,
) -> Result<QuantizedTensor> {
    check_scale(scale)?;
    let t_s = T::from_i32(scheme.t_s());
    let mut data = Vec::with_capacity(v.data().len());
    for &x in v.data() {
        if !x.is_finite() {
            return Err(Error::Numeric(format!("non-finite input element {x}")));
        }
        data.push(quantize_value(x, scale, t_s).to_f64() as i8);
    }
    Ok(QuantizedTensor {
        values: Tensor::from_vec(v.shape(), data)?,
        scale: scale.to_f64(),
        scheme,
    })
}

/// Real image of a quantized tensor: element-wise `values * scale`.
pub fn dequantize<T: Real>(q: &QuantizedTensor) -> Tensor<T> {
    let scale = T::from_f64(q.scale);
    q.values.map(|v| T::from_i32(i32::from(v)) * scale)
}

/// Fake quantization `Q(v) = s * round(clip(v/s, -T_s, T_s))`: the value is
/// snapped to the in-range quantization grid but stays real.
pub fn fake_quantize<T: Real>(v: &Tensor<T>, scale: T, scheme: QuantScheme) -> Result<Tensor<T>> {
    check_scale(scale)?;
    let t_s = T::from_i32(scheme.t_s());
    let mut data = Vec::with_capacity(v.data().len());
    for &x in v.data() {
        if !x.is_finite() {
            return Err(Error::Numeric(format!("non-finite input element {x}")));
        }
        data.push(scale * quantize_value(x, scale, t_s));
    }
    Tensor::from_vec(v.shape(), data)
}

/// Baseline calibrator: `max|v| / T_s`, or [`EPSILON_SCALE`] for all-zero
/// tensors.
pub fn minmax_scale<T: Real>(v: &Tensor<T>, scheme: QuantScheme) -> T {
    let max_abs = v
        .data()
        .iter()
        .fold(T::zero(), |acc, &x| acc.max(x.abs()));
    if max_abs == T::zero() {
        T::from_f64(EPSILON_SCALE)
    } else {
        max_abs / T::from_i32(scheme.t_s())
    }
}

/// Histogram of absolute values over uniform bins spanning `[0, max|v|]`.
#[derive(Clone, Debug)]
pub struct Histogram {
    bin_edges: Vec<f64>,
    counts: Vec<u64>,
}

impl Histogram {
    /// Assemble from explicit edges and counts; edges must be increasing
    /// (non-decreasing for the all-zero degenerate case), start at 0 and
    /// number one more than the counts.
    pub fn from_parts(bin_edges: Vec<f64>, counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() || bin_edges.len() != counts.len() + 1 {
            return Err(Error::InvalidShape(format!(
                "{} edges do not delimit {} bins",
                bin_edges.len(),
                counts.len()
            )));
        }
        if bin_edges[0] != 0.0 || bin_edges.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidShape(
                "bin edges must start at 0 and be non-decreasing".to_string(),
            ));
        }
        Ok(Histogram { bin_edges, counts })
    }

    pub fn num_bins(&self) -> usize {
        self.counts.len()
    }

    /// Bin boundaries; `num_bins + 1` increasing values starting at 0.
    pub fn bin_edges(&self) -> &[f64] {
        &self.bin_edges
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn max_edge(&self) -> f64 {
        *self.bin_edges.last().expect("non-empty edges")
    }
}

/// Count `|v_i|` into `num_bins` uniform bins over `[0, max|v|]`.
pub fn build_histogram<T: Real>(v: &Tensor<T>, num_bins: usize) -> Result<Histogram> {
    if num_bins == 0 {
        return Err(Error::InvalidShape("histogram needs >= 1 bin".to_string()));
    }
    let mut max_abs = 0.0f64;
    for &x in v.data() {
        if !x.is_finite() {
            return Err(Error::Numeric(format!("non-finite input element {x}")));
        }
        max_abs = max_abs.max(x.abs().to_f64());
    }
    let bin_edges: Vec<f64> = (0..=num_bins)
        .map(|i| max_abs * i as f64 / num_bins as f64)
        .collect();
    let mut counts = vec![0u64; num_bins];
    for &x in v.data() {
        let a = x.abs().to_f64();
        let idx = if max_abs == 0.0 {
            0
        } else {
            (((a / max_abs) * num_bins as f64) as usize).min(num_bins - 1)
        };
        counts[idx] += 1;
    }
    Ok(Histogram { bin_edges, counts })
}

/// Result of KL threshold calibration.
#[derive(Clone, Copy, Debug)]
pub struct KlCalibration {
    /// Chosen quantization scale `threshold / T_s`.
    pub scale: f64,
    /// Clip threshold that minimized the divergence.
    pub threshold: f64,
    /// True when the histogram was degenerate and min-max behavior was used.
    pub fallback_minmax: bool,
    /// Divergence at the chosen threshold (NaN on fallback).
    pub kl_divergence: f64,
}

/// KL divergence of one clip candidate: keep the first `kept` bins, fold the
/// tail into the last kept bin to form the reference P, and compress the kept
/// bins into `levels` quantization buckets (expanded back over nonzero source
/// bins, then smoothed) to form Q. Returns `None` when the candidate has no
/// mass to quantize.
fn kl_for_candidate(counts: &[u64], kept: usize, levels: usize) -> Option<f64> {
    let mut p: Vec<f64> = counts[..kept].iter().map(|&c| c as f64).collect();
    let tail: u64 = counts[kept..].iter().sum();
    p[kept - 1] += tail as f64;
    let p_total: f64 = p.iter().sum();
    if p_total == 0.0 {
        return None;
    }
    for x in &mut p {
        *x /= p_total;
    }

    let merged = kept / levels;
    let mut q = vec![0.0f64; kept];
    for level in 0..levels {
        let start = level * merged;
        let end = if level == levels - 1 {
            kept
        } else {
            (level + 1) * merged
        };
        let sum: u64 = counts[start..end].iter().sum();
        let nonzero = counts[start..end].iter().filter(|&&c| c != 0).count();
        if nonzero > 0 {
            let share = sum as f64 / nonzero as f64;
            for (offset, &c) in counts[start..end].iter().enumerate() {
                if c != 0 {
                    q[start + offset] = share;
                }
            }
        }
    }
    let q_total: f64 = q.iter().sum();
    if q_total == 0.0 {
        return None;
    }
    for x in &mut q {
        *x /= q_total;
    }

    // Smooth zero bins of Q so KL(P||Q) stays finite: each zero gains eps,
    // and the nonzero bins pay for it in proportion to their mass, which
    // keeps every bin positive.
    let zeros = q.iter().filter(|&&x| x == 0.0).count();
    if zeros > 0 {
        let scale = 1.0 - KL_SMOOTH_EPS * zeros as f64;
        if scale <= 0.0 {
            return None;
        }
        for x in &mut q {
            if *x == 0.0 {
                *x = KL_SMOOTH_EPS;
            } else {
                *x *= scale;
            }
        }
    }

    let mut kl = 0.0;
    for (pi, qi) in p.iter().zip(q.iter()) {
        if *pi > 0.0 {
            kl += pi * (pi / qi).ln();
        }
    }
    if kl.is_nan() {
        return None;
    }
    Some(kl)
}

/// Search clip thresholds over the histogram's bin edges, starting at the
/// `(2*T_s + 1)`-th edge, and return the scale `threshold / T_s` whose clipped
/// reference distribution is closest (in KL divergence) to its quantized
/// image. Degenerate histograms fall back to min-max behavior with
/// `fallback_minmax` set.
pub fn kl_calibrate(hist: &Histogram, scheme: QuantScheme) -> KlCalibration {
    let t_s = scheme.t_s();
    let levels = 2 * t_s as usize + 1;
    let n = hist.num_bins();

    let fallback = |hist: &Histogram| {
        let max_edge = hist.max_edge();
        let scale = if max_edge > 0.0 {
            max_edge / f64::from(t_s)
        } else {
            EPSILON_SCALE
        };
        KlCalibration {
            scale,
            threshold: max_edge,
            fallback_minmax: true,
            kl_divergence: f64::NAN,
        }
    };

    let beyond_first: u64 = hist.counts()[1..].iter().sum();
    if beyond_first == 0 || n < levels {
        return fallback(hist);
    }
    // A point mass in the last bin (constant tensor) leaves the threshold
    // search nothing to optimize: every clip below the maximum discards all
    // the mass.
    let nonzero_bins = hist.counts().iter().filter(|&&c| c != 0).count();
    if nonzero_bins == 1 && *hist.counts().last().expect("bins") != 0 {
        return fallback(hist);
    }

    let mut best: Option<(usize, f64)> = None;
    for kept in levels..=n {
        if let Some(kl) = kl_for_candidate(hist.counts(), kept, levels) {
            match best {
                Some((_, best_kl)) if kl >= best_kl => {}
                _ => best = Some((kept, kl)),
            }
        }
    }

    match best {
        Some((kept, kl)) => {
            let threshold = hist.bin_edges()[kept];
            KlCalibration {
                scale: threshold / f64::from(t_s),
                threshold,
                fallback_minmax: false,
                kl_divergence: kl,
            }
        }
        None => fallback(hist),
    }
}

/// One calibrated tensor, as written into calibration report files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub tensor: String,
    /// `"kl"` or `"minmax"`.
    pub method: String,
    pub scale: f64,
    #[serde(rename = "T_s")]
    pub t_s: i32,
    pub alpha: f64,
    pub bins: usize,
}

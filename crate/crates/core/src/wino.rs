//! The INT8 Winograd F(2,3) Conv1D operator and its support machinery:
//! transform matrices, addition-overflow analysis, the tap-split plan,
//! the multiplication cost model and a timing harness.
//!
//! A k-tap stride-1 convolution is split into `floor(k/3)` F(2,3) tap groups
//! plus a `k mod 3`-tap plain integer remainder. The weight transform carries
//! a factor 2 so it stays integer, which makes the operator output exactly
//! twice the integer cross-correlation (`raw2x`); the factor is removed
//! during dequantization. Transformed activations are bounded by `2*T_s_act`
//! and transformed weights by `3*T_s_wt`, so the operator refuses schemes
//! where either bound exceeds the 8-bit storage limit.

use std::time::Instant;

use num_rational::Ratio;
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{QuantizedTensor, QuantScheme};
use crate::reference::{conv1d_int8_gemm, out_width, padded_row, QuantizedConv1D};
use crate::scalar::Real;
use crate::tensor::{Shape, Tensor};

/// The F(2,3) transform triple. `G2` is twice the textbook weight transform
/// so all three matrices are integer.
pub struct WinogradBasis;

impl WinogradBasis {
    /// Input transform, applied to 4-long activation windows.
    pub const BT: [[i32; 4]; 4] = [
        [1, 0, -1, 0],
        [0, 1, 1, 0],
        [0, -1, 1, 0],
        [0, 1, 0, -1],
    ];

    /// Weight transform times 2, applied to 3-tap weight groups.
    pub const G2: [[i32; 3]; 4] = [[2, 0, 0], [1, 1, 1], [1, -1, 1], [0, 0, 2]];

    /// Output transform, collapsing the 4 Hadamard lanes into 2 outputs.
    pub const AT: [[i32; 4]; 2] = [[1, 1, 1, 0], [0, 1, -1, -1]];

    /// Exact factor that undoes the x2 in [`Self::G2`] at dequantization.
    pub fn output_rescale() -> Ratio<i64> {
        Ratio::new(1, 2)
    }

    /// Worst-case amplification of the input transform (the `2 D_Q` bound).
    pub fn bt_max_row_abs_sum() -> i32 {
        Self::BT
            .iter()
            .map(|row| row.iter().map(|x| x.abs()).sum())
            .max()
            .expect("fixed rows")
    }

    /// Worst-case amplification of the weight transform (the `3 G_Q` bound).
    pub fn g2_max_row_abs_sum() -> i32 {
        Self::G2
            .iter()
            .map(|row| row.iter().map(|x| x.abs()).sum())
            .max()
            .expect("fixed rows")
    }

    /// `BT * d` in real arithmetic.
    pub fn input_transform_real<T: Real>(d: [T; 4]) -> [T; 4] {
        [
            d[0] - d[2],
            d[1] + d[2],
            d[2] - d[1],
            d[1] - d[3],
        ]
    }

    /// `G2 * g` in real arithmetic.
    pub fn weight_transform_real<T: Real>(g: [T; 3]) -> [T; 4] {
        let two = T::from_f64(2.0);
        [
            two * g[0],
            g[0] + g[1] + g[2],
            g[0] - g[1] + g[2],
            two * g[2],
        ]
    }
}

/// `BT * d` with the range precondition `|d_i| <= t_s_act` enforced.
pub fn transform_input_tile(d: [i32; 4], t_s_act: i32) -> Result<[i32; 4]> {
    if d.iter().any(|&x| x.abs() > t_s_act) {
        return Err(Error::Bounds(format!(
            "input tile {d:?} outside [-{t_s_act}, {t_s_act}]"
        )));
    }
    Ok([d[0] - d[2], d[1] + d[2], d[2] - d[1], d[1] - d[3]])
}

/// `G2 * g` with the range precondition `|g_i| <= t_s_wt` enforced.
pub fn transform_weight(g: [i32; 3], t_s_wt: i32) -> Result<[i32; 4]> {
    if g.iter().any(|&x| x.abs() > t_s_wt) {
        return Err(Error::Bounds(format!(
            "weight taps {g:?} outside [-{t_s_wt}, {t_s_wt}]"
        )));
    }
    Ok([
        2 * g[0],
        g[0] + g[1] + g[2],
        g[0] - g[1] + g[2],
        2 * g[2],
    ])
}

/// Worst-case transformed magnitudes for a scheme pair, against the storage
/// width. Running the Winograd operator requires both sides to fit.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OverflowReport {
    /// `2 * T_s_act`, the input transform bound.
    pub max_transformed_act: i32,
    /// `3 * T_s_wt`, the weight transform bound.
    pub max_transformed_wt: i32,
    /// Largest value the storage width holds (the smaller limit when the
    /// schemes differ in width).
    pub storage_limit: i32,
    pub fits: FitsPair,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FitsPair {
    pub act: bool,
    pub wt: bool,
}

impl OverflowReport {
    pub fn fits_both(&self) -> bool {
        self.fits.act && self.fits.wt
    }
}

/// Evaluate the Winograd transform overflow bounds for a scheme pair.
pub fn check_overflow(act_scheme: QuantScheme, wt_scheme: QuantScheme) -> OverflowReport {
    let max_transformed_act = WinogradBasis::bt_max_row_abs_sum() * act_scheme.t_s();
    let max_transformed_wt = WinogradBasis::g2_max_row_abs_sum() * wt_scheme.t_s();
    let storage_limit = act_scheme.storage_limit().min(wt_scheme.storage_limit());
    OverflowReport {
        max_transformed_act,
        max_transformed_wt,
        storage_limit,
        fits: FitsPair {
            act: max_transformed_act <= storage_limit,
            wt: max_transformed_wt <= storage_limit,
        },
    }
}

/// Contiguous tap range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapRange {
    pub offset: usize,
    pub len: usize,
}

/// Which execution path a plan takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanPath {
    Winograd,
    PlainInt8,
}

/// Decomposition of a k-tap convolution into F(2,3) tap groups plus a
/// trailing remainder, with the quantization schemes the operator was
/// vetted for.
#[derive(Clone, Debug)]
pub struct Conv1DPlan {
    pub k: usize,
    pub stride: usize,
    /// Tap offsets of the 3-tap Winograd groups: 0, 3, 6, ...
    pub wino_groups: Vec<usize>,
    /// Trailing `k mod 3` taps computed as plain integer GEMM.
    pub remainder: TapRange,
    pub act_scheme: QuantScheme,
    pub wt_scheme: QuantScheme,
    pub path: PlanPath,
}

/// Contiguous-from-zero tap split: `floor(k/3)` groups and the trailing
/// `k mod 3` taps.
pub fn split_taps(k: usize) -> (Vec<usize>, TapRange) {
    let groups = (0..k / 3).map(|g| 3 * g).collect();
    let remainder = TapRange {
        offset: 3 * (k / 3),
        len: k % 3,
    };
    (groups, remainder)
}

/// Plan a k-tap convolution. Kernels with `k >= 3` at stride 1 take the
/// Winograd path with the supplied schemes; everything else is planned as
/// plain INT8 with the full 8-bit range.
pub fn plan_conv1d(
    k: usize,
    stride: usize,
    act_scheme: QuantScheme,
    wt_scheme: QuantScheme,
) -> Conv1DPlan {
    assert!(k >= 1 && stride >= 1, "kernel size and stride must be >= 1");
    let (wino_groups, remainder) = split_taps(k);
    if k >= 3 && stride == 1 {
        Conv1DPlan {
            k,
            stride,
            wino_groups,
            remainder,
            act_scheme,
            wt_scheme,
            path: PlanPath::Winograd,
        }
    } else {
        Conv1DPlan {
            k,
            stride,
            wino_groups,
            remainder,
            act_scheme: QuantScheme::int8_full(),
            wt_scheme: QuantScheme::int8_full(),
            path: PlanPath::PlainInt8,
        }
    }
}

fn headroom_check(plan: &Conv1DPlan, c_in: usize) -> Result<()> {
    let t_sa = i64::from(plan.act_scheme.t_s());
    let t_sw = i64::from(plan.wt_scheme.t_s());
    let groups = plan.wino_groups.len() as i64;
    let c_in = c_in as i64;
    // Winograd-domain accumulation over channels and groups, then the output
    // transform (abs row sum 3), then the doubled remainder partials.
    let wino_acc = groups * c_in * (2 * t_sa) * (3 * t_sw);
    let at_out = 3 * wino_acc;
    let rem = 2 * c_in * plan.remainder.len as i64 * t_sa * t_sw;
    let limit = i64::from(i32::MAX);
    if wino_acc > limit || at_out + rem > limit {
        return Err(Error::OverflowRisk(format!(
            "32-bit accumulation head-room exceeded: winograd-domain bound {wino_acc}, \
             output bound {}",
            at_out + rem
        )));
    }
    Ok(())
}

/// INT8 Winograd Conv1D.
///
/// Per 2-output tile and tap group, the 4-long input window is transformed
/// with `BT`, Hadamard-multiplied with the `G2`-transformed weights and
/// accumulated over channels and groups in 32 bits in the Winograd domain;
/// `AT` is applied once per (tile, channel). Remainder taps are computed as
/// integer GEMM and doubled before summation, so `raw2x` is exactly twice
/// the integer cross-correlation. The dequantized output is
/// `raw2x * (s_d * s_g / 2) + bias`.
pub fn conv1d_int8_winograd(
    input: &QuantizedTensor,
    layer: &QuantizedConv1D,
    plan: &Conv1DPlan,
) -> Result<(Tensor<i32>, Tensor<f32>)> {
    if plan.path != PlanPath::Winograd {
        return Err(Error::UnsupportedPlan(
            "plan takes the plain INT8 path; use conv1d_int8_gemm".to_string(),
        ));
    }
    if plan.k != layer.k() || plan.stride != layer.stride {
        return Err(Error::ShapeMismatch(format!(
            "plan (k={}, stride={}) does not describe layer (k={}, stride={})",
            plan.k,
            plan.stride,
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
    let report = check_overflow(plan.act_scheme, plan.wt_scheme);
    if !report.fits_both() {
        return Err(Error::UnsafeScheme(format!(
            "transformed bounds ({}, {}) exceed storage limit {}",
            report.max_transformed_act, report.max_transformed_wt, report.storage_limit
        )));
    }
    if input.scheme().t_s() > plan.act_scheme.t_s()
        || layer.weights.scheme().t_s() > plan.wt_scheme.t_s()
    {
        return Err(Error::UnsafeScheme(format!(
            "tensor ranges ({}, {}) exceed the plan's vetted ranges ({}, {})",
            input.scheme().t_s(),
            layer.weights.scheme().t_s(),
            plan.act_scheme.t_s(),
            plan.wt_scheme.t_s()
        )));
    }
    headroom_check(plan, layer.c_in())?;

    let k = plan.k;
    let c_in = layer.c_in();
    let c_out = layer.c_out();
    let ow = out_width(in_shape.width, k, 1, layer.padding)?;
    let n_groups = plan.wino_groups.len();
    let n_tiles = ow / 2;
    let t_s_wt = plan.wt_scheme.t_s();

    // Transformed weights, stored 8-bit: |G2*g| <= 3*T_s_wt <= storage limit.
    let mut v = vec![0i8; c_out * c_in * n_groups * 4];
    for co in 0..c_out {
        for ci in 0..c_in {
            let w_row = layer.weights.values().row(co, ci);
            for (g, &off) in plan.wino_groups.iter().enumerate() {
                let taps = [
                    i32::from(w_row[off]),
                    i32::from(w_row[off + 1]),
                    i32::from(w_row[off + 2]),
                ];
                let tw = transform_weight(taps, t_s_wt)?;
                let base = ((co * c_in + ci) * n_groups + g) * 4;
                for j in 0..4 {
                    v[base + j] = tw[j] as i8;
                }
            }
        }
    }

    let mut raw = Tensor::filled(Shape::new(in_shape.batch, c_out, ow), 0i32)?;
    let mut u = vec![0i8; n_groups * c_in * 4 * n_tiles.max(1)];
    let mut m = vec![0i32; 4 * n_tiles.max(1)];
    let mut rem_acc = vec![0i32; ow];

    for b in 0..in_shape.batch {
        let padded: Vec<Vec<i8>> = (0..c_in)
            .map(|ci| padded_row(input.values(), b, ci, layer.padding))
            .collect();

        // Transformed input windows, stored 8-bit: |BT*d| <= 2*T_s_act.
        for (g, &off) in plan.wino_groups.iter().enumerate() {
            for (ci, row) in padded.iter().enumerate() {
                let base = ((g * c_in + ci) * 4) * n_tiles;
                for t in 0..n_tiles {
                    let i0 = 2 * t + off;
                    let d0 = i32::from(row[i0]);
                    let d1 = i32::from(row[i0 + 1]);
                    let d2 = i32::from(row[i0 + 2]);
                    let d3 = i32::from(row[i0 + 3]);
                    u[base + t] = (d0 - d2) as i8;
                    u[base + n_tiles + t] = (d1 + d2) as i8;
                    u[base + 2 * n_tiles + t] = (d2 - d1) as i8;
                    u[base + 3 * n_tiles + t] = (d1 - d3) as i8;
                }
            }
        }

        for co in 0..c_out {
            // Hadamard multiply-accumulate in the Winograd domain.
            m[..4 * n_tiles].fill(0);
            for g in 0..n_groups {
                for ci in 0..c_in {
                    let v_base = ((co * c_in + ci) * n_groups + g) * 4;
                    let u_base = ((g * c_in + ci) * 4) * n_tiles;
                    for j in 0..4 {
                        let w = i32::from(v[v_base + j]);
                        if w == 0 {
                            continue;
                        }
                        let lane = &u[u_base + j * n_tiles..u_base + (j + 1) * n_tiles];
                        let acc = &mut m[j * n_tiles..(j + 1) * n_tiles];
                        for (a, &x) in acc.iter_mut().zip(lane) {
                            *a += w * i32::from(x);
                        }
                    }
                }
            }
            let out_row = raw.row_mut(b, co);
            for t in 0..n_tiles {
                let m0 = m[t];
                let m1 = m[n_tiles + t];
                let m2 = m[2 * n_tiles + t];
                let m3 = m[3 * n_tiles + t];
                out_row[2 * t] = m0 + m1 + m2;
                out_row[2 * t + 1] = m1 - m2 - m3;
            }

            if plan.remainder.len > 0 && n_tiles > 0 {
                let even = 2 * n_tiles;
                rem_acc[..even].fill(0);
                for (ci, row) in padded.iter().enumerate() {
                    let w_row = layer.weights.values().row(co, ci);
                    for j in 0..plan.remainder.len {
                        let tap = plan.remainder.offset + j;
                        let w = i32::from(w_row[tap]);
                        if w == 0 {
                            continue;
                        }
                        let src = &row[tap..tap + even];
                        for (a, &x) in rem_acc[..even].iter_mut().zip(src) {
                            *a += w * i32::from(x);
                        }
                    }
                }
                for (o, &r) in out_row[..even].iter_mut().zip(&rem_acc[..even]) {
                    *o += 2 * r;
                }
            }

            if ow % 2 == 1 {
                // final output point: direct dot product in the x2 domain
                let i = ow - 1;
                let mut acc = 0i32;
                for (ci, row) in padded.iter().enumerate() {
                    let w_row = layer.weights.values().row(co, ci);
                    for j in 0..k {
                        acc += i32::from(row[i + j]) * i32::from(w_row[j]);
                    }
                }
                out_row[i] = 2 * acc;
            }
        }
    }

    let factor = input.scale() * layer.weights.scale() / 2.0;
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

/// Theoretical multiplication-count speedup of the split operator over plain
/// GEMM: `2k / (4*floor(k/3) + 2*(k mod 3))`, exact.
pub fn theoretical_speedup(k: usize) -> Result<Ratio<u64>> {
    if k < 3 {
        return Err(Error::Domain(format!(
            "speedup model needs k >= 3, got {k}"
        )));
    }
    let k = k as u64;
    Ok(Ratio::new(2 * k, 4 * (k / 3) + 2 * (k % 3)))
}

/// Hadamard/GEMM multiplication counts for a planned convolution.
/// Transforms are additions and shifts and are not counted. Counts cover
/// whole 2-output tiles; an odd output width is rounded down and flagged.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MultCounts {
    pub gemm_mults: u64,
    pub wino_mults: u64,
    /// Output width was odd; the final output point is not counted.
    pub partial_tile: bool,
}

pub fn count_multiplications(
    plan: &Conv1DPlan,
    out_width: usize,
    c_in: usize,
    c_out: usize,
) -> MultCounts {
    let tiles = (out_width / 2) as u64;
    let even_width = 2 * tiles;
    let channels = (c_in * c_out) as u64;
    let gemm_mults = channels * even_width * plan.k as u64;
    let wino_mults = match plan.path {
        PlanPath::Winograd => {
            channels
                * tiles
                * (4 * plan.wino_groups.len() as u64 + 2 * plan.remainder.len as u64)
        }
        PlanPath::PlainInt8 => gemm_mults,
    };
    MultCounts {
        gemm_mults,
        wino_mults,
        partial_tile: out_width % 2 == 1,
    }
}

/// Input geometry for [`bench_kernel`].
#[derive(Clone, Copy, Debug)]
pub struct BenchShape {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BenchOptions {
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Worker threads for the timed runs; results are bit-identical to the
    /// serial order because output channels are disjoint.
    pub threads: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            repetitions: 10,
            warmup: 2,
            seed: 42,
            threads: 1,
        }
    }
}

/// One benchmark comparison row, serialized as-is into JSON/CSV reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub k: usize,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub width: usize,
    pub gemm_ns: f64,
    pub wino_ns: f64,
    pub speedup_measured: f64,
    pub speedup_theoretical: f64,
    pub gemm_mults: u64,
    pub wino_mults: u64,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "k,stride,c_in,c_out,width,gemm_ns,wino_ns,\
speedup_measured,speedup_theoretical,gemm_mults,wino_mults";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.k,
            self.stride,
            self.c_in,
            self.c_out,
            self.width,
            self.gemm_ns,
            self.wino_ns,
            self.speedup_measured,
            self.speedup_theoretical,
            self.gemm_mults,
            self.wino_mults
        )
    }
}

fn median_ns(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

fn random_quantized(
    shape: Shape,
    scheme: QuantScheme,
    scale: f64,
    rng: &mut impl rand::Rng,
) -> QuantizedTensor {
    let t_s = scheme.t_s();
    let data: Vec<i8> = (0..shape.len())
        .map(|_| rng.gen_range(-t_s..=t_s) as i8)
        .collect();
    QuantizedTensor::from_parts(Tensor::from_vec(shape, data).expect("valid shape"), scale, scheme)
        .expect("in-range values")
}

/// Split a quantized layer into contiguous output-channel chunks, one per
/// worker thread.
fn chunk_layer(layer: &QuantizedConv1D, threads: usize) -> Vec<QuantizedConv1D> {
    let c_out = layer.c_out();
    let threads = threads.min(c_out).max(1);
    let base = c_out / threads;
    let extra = c_out % threads;
    let mut chunks = Vec::with_capacity(threads);
    let mut start = 0usize;
    let c_in = layer.c_in();
    let k = layer.k();
    for t in 0..threads {
        let len = base + usize::from(t < extra);
        let shape = Shape::new(len, c_in, k);
        let values = layer.weights.values();
        let mut data = Vec::with_capacity(shape.len());
        for co in start..start + len {
            for ci in 0..c_in {
                data.extend_from_slice(values.row(co, ci));
            }
        }
        let weights = QuantizedTensor::from_parts(
            Tensor::from_vec(shape, data).expect("valid chunk shape"),
            layer.weights.scale(),
            layer.weights.scheme(),
        )
        .expect("chunk preserves ranges");
        chunks.push(
            QuantizedConv1D::new(
                weights,
                Some(layer.bias[start..start + len].to_vec()),
                layer.stride,
                layer.padding,
            )
            .expect("chunk layer"),
        );
        start += len;
    }
    chunks
}

/// Wall-clock comparison of the INT8 GEMM and INT8 Winograd paths on
/// identical random in-range inputs. Reports medians over `repetitions`
/// timed runs after `warmup` discarded runs.
pub fn bench_kernel(
    plan: &Conv1DPlan,
    shape: BenchShape,
    opts: &BenchOptions,
) -> Result<BenchReport> {
    if opts.repetitions < 3 {
        return Err(Error::Domain(format!(
            "benchmark needs >= 3 repetitions, got {}",
            opts.repetitions
        )));
    }
    if plan.path != PlanPath::Winograd {
        return Err(Error::UnsupportedPlan(
            "benchmark compares the Winograd path; plan is plain INT8".to_string(),
        ));
    }
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    let input = random_quantized(
        Shape::new(shape.batch, shape.c_in, shape.width),
        plan.act_scheme,
        0.02,
        &mut rng,
    );
    let weights = random_quantized(
        Shape::new(shape.c_out, shape.c_in, plan.k),
        plan.wt_scheme,
        0.01,
        &mut rng,
    );
    let layer = QuantizedConv1D::new(weights, None, plan.stride, (0, 0))?;
    let chunks = if opts.threads > 1 {
        chunk_layer(&layer, opts.threads)
    } else {
        Vec::new()
    };

    let run_gemm = |layer: &QuantizedConv1D| conv1d_int8_gemm(&input, layer).map(|_| ());
    let run_wino = |layer: &QuantizedConv1D| conv1d_int8_winograd(&input, layer, plan).map(|_| ());

    type PathFn<'a> = &'a (dyn Fn(&QuantizedConv1D) -> Result<()> + Sync);
    let time_path = |run: PathFn| -> Result<Vec<f64>> {
        let mut samples = Vec::with_capacity(opts.repetitions);
        for rep in 0..opts.warmup + opts.repetitions {
            let start = Instant::now();
            if chunks.is_empty() {
                run(&layer)?;
            } else {
                std::thread::scope(|scope| {
                    let handles: Vec<_> = chunks
                        .iter()
                        .map(|chunk| scope.spawn(move || run(chunk)))
                        .collect();
                    for h in handles {
                        h.join().expect("bench worker")?;
                    }
                    Ok::<(), Error>(())
                })?;
            }
            if rep >= opts.warmup {
                samples.push(start.elapsed().as_nanos() as f64);
            }
        }
        Ok(samples)
    };

    let gemm_ns = median_ns(time_path(&run_gemm)?);
    let wino_ns = median_ns(time_path(&run_wino)?);

    let ow = out_width(shape.width, plan.k, plan.stride, (0, 0))?;
    let counts = count_multiplications(plan, ow, shape.c_in, shape.c_out);
    Ok(BenchReport {
        k: plan.k,
        stride: plan.stride,
        c_in: shape.c_in,
        c_out: shape.c_out,
        width: shape.width,
        gemm_ns,
        wino_ns,
        speedup_measured: gemm_ns / wino_ns,
        speedup_theoretical: theoretical_speedup(plan.k)?
            .to_f64()
            .expect("small rational"),
        gemm_mults: counts.gemm_mults,
        wino_mults: counts.wino_mults,
    })
}

/// Fault hooks for exercising the equivalence suite's failure reporting.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerifyFault {
    /// Shift the remainder tap offset down by one so remainder taps overlap
    /// the last Winograd group.
    RemainderOffsetSkew,
}

/// Randomized equivalence sweep configuration.
#[derive(Clone, Debug)]
pub struct EquivalenceConfig {
    pub k_values: Vec<usize>,
    pub cases_per_k: usize,
    pub seed: u64,
    pub max_channels: usize,
    pub max_width: usize,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        EquivalenceConfig {
            k_values: (3..=16).collect(),
            cases_per_k: 100,
            seed: 42,
            max_channels: 8,
            max_width: 64,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub enum CaseOutcome {
    /// `raw2x` equals twice the GEMM accumulator element-wise.
    Exact,
    /// Kernel takes the plain INT8 path; nothing to compare.
    PlainPath,
    Mismatch {
        batch: usize,
        channel: usize,
        index: usize,
        wino_raw2x: i32,
        gemm_raw_doubled: i32,
    },
    /// The operator returned an error instead of a result.
    OperatorError(String),
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub width: usize,
    pub padding: (usize, usize),
    pub outcome: CaseOutcome,
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceReport {
    pub cases: Vec<CaseResult>,
    pub exact: usize,
    pub plain: usize,
    pub failures: usize,
}

impl EquivalenceReport {
    pub fn all_ok(&self) -> bool {
        self.failures == 0
    }

    pub fn first_failure(&self) -> Option<&CaseResult> {
        self.cases.iter().find(|c| {
            matches!(
                c.outcome,
                CaseOutcome::Mismatch { .. } | CaseOutcome::OperatorError(_)
            )
        })
    }
}

/// Run the randomized Winograd-vs-GEMM equivalence sweep: for each kernel
/// size, `cases_per_k` random shapes with values uniform in the 63/42 scheme
/// ranges, comparing `raw2x` against twice the GEMM accumulator with zero
/// tolerance.
pub fn run_equivalence_suite(cfg: &EquivalenceConfig) -> EquivalenceReport {
    run_equivalence_suite_with_fault(cfg, None)
}

#[doc(hidden)]
pub fn run_equivalence_suite_with_fault(
    cfg: &EquivalenceConfig,
    fault: Option<VerifyFault>,
) -> EquivalenceReport {
    use rand::{Rng, SeedableRng};
    let act = QuantScheme::int8_winograd_act();
    let wt = QuantScheme::int8_winograd_wt();
    let mut cases = Vec::with_capacity(cfg.k_values.len() * cfg.cases_per_k);
    let (mut exact, mut plain, mut failures) = (0usize, 0usize, 0usize);

    for &k in &cfg.k_values {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
            cfg.seed.wrapping_add((k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        for _ in 0..cfg.cases_per_k {
            let c_in = rng.gen_range(1..=cfg.max_channels);
            let c_out = rng.gen_range(1..=cfg.max_channels);
            let width = rng.gen_range(k.max(4)..=cfg.max_width.max(k));
            let padding = (rng.gen_range(0..=2), rng.gen_range(0..=2));

            let mut plan = plan_conv1d(k, 1, act, wt);
            if plan.path == PlanPath::PlainInt8 {
                plain += 1;
                cases.push(CaseResult {
                    k,
                    c_in,
                    c_out,
                    width,
                    padding,
                    outcome: CaseOutcome::PlainPath,
                });
                continue;
            }
            if fault == Some(VerifyFault::RemainderOffsetSkew) && plan.remainder.len > 0 {
                plan.remainder.offset -= 1;
            }

            let input = random_quantized(Shape::new(1, c_in, width), act, 0.02, &mut rng);
            let weights =
                random_quantized(Shape::new(c_out, c_in, k), wt, 0.01, &mut rng);
            let layer = QuantizedConv1D::new(weights, None, 1, padding).expect("bench layer");

            let outcome = match (
                conv1d_int8_winograd(&input, &layer, &plan),
                conv1d_int8_gemm(&input, &layer),
            ) {
                (Ok((raw2x, _)), Ok((raw, _))) => {
                    let mut mismatch = None;
                    'scan: for b in 0..raw.shape().batch {
                        for co in 0..raw.shape().channels {
                            for i in 0..raw.shape().width {
                                let w = raw2x.at(b, co, i);
                                let g2 = 2 * raw.at(b, co, i);
                                if w != g2 {
                                    mismatch = Some(CaseOutcome::Mismatch {
                                        batch: b,
                                        channel: co,
                                        index: i,
                                        wino_raw2x: w,
                                        gemm_raw_doubled: g2,
                                    });
                                    break 'scan;
                                }
                            }
                        }
                    }
                    mismatch.unwrap_or(CaseOutcome::Exact)
                }
                (Err(e), _) | (_, Err(e)) => CaseOutcome::OperatorError(e.to_string()),
            };
            match &outcome {
                CaseOutcome::Exact => exact += 1,
                CaseOutcome::PlainPath => plain += 1,
                _ => failures += 1,
            }
            cases.push(CaseResult {
                k,
                c_in,
                c_out,
                width,
                padding,
                outcome,
            });
        }
    }
    EquivalenceReport {
        cases,
        exact,
        plain,
        failures,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn input_transform_examples() {
        assert_eq!(
            transform_input_tile([63, 63, 63, 63], 63).unwrap(),
            [0, 126, 0, 0]
        );
        assert_eq!(transform_input_tile([0, 0, 0, 0], 63).unwrap(), [0, 0, 0, 0]);
        assert_eq!(
            transform_input_tile([1, 2, 3, 4], 63).unwrap(),
            [-2, 5, 1, -2]
        );
        assert!(transform_input_tile([64, 0, 0, 0], 63).is_err());
    }

    #[test]
    fn weight_transform_examples() {
        assert_eq!(
            transform_weight([42, 42, 42], 42).unwrap(),
            [84, 126, 42, 84]
        );
        assert_eq!(transform_weight([1, 0, 0], 42).unwrap(), [2, 1, 1, 0]);
        assert_eq!(transform_weight([0, 0, 0], 42).unwrap(), [0, 0, 0, 0]);
        assert!(transform_weight([43, 0, 0], 42).is_err());
    }

    #[test]
    fn amplification_factors() {
        assert_eq!(WinogradBasis::bt_max_row_abs_sum(), 2);
        assert_eq!(WinogradBasis::g2_max_row_abs_sum(), 3);
        assert_eq!(*WinogradBasis::output_rescale().numer(), 1);
        assert_eq!(*WinogradBasis::output_rescale().denom(), 2);
    }

    #[test]
    fn basis_identity_random() {
        // AT * ((G2*g) .* (BT*d)) / 2 equals the direct 3-tap correlation
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10_000 {
            let d: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-10.0..10.0));
            let g: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-10.0..10.0));
            let td = WinogradBasis::input_transform_real(d);
            let tg = WinogradBasis::weight_transform_real(g);
            let m: [f64; 4] = std::array::from_fn(|j| td[j] * tg[j]);
            let y0 = (m[0] + m[1] + m[2]) / 2.0;
            let y1 = (m[1] - m[2] - m[3]) / 2.0;
            let c0 = d[0] * g[0] + d[1] * g[1] + d[2] * g[2];
            let c1 = d[1] * g[0] + d[2] * g[1] + d[3] * g[2];
            assert!((y0 - c0).abs() < 1e-10, "{y0} vs {c0}");
            assert!((y1 - c1).abs() < 1e-10, "{y1} vs {c1}");
        }
    }

    #[test]
    fn overflow_report_full_range_fails() {
        let full = QuantScheme::int8_full();
        let report = check_overflow(full, full);
        assert_eq!(report.max_transformed_act, 254);
        assert_eq!(report.max_transformed_wt, 381);
        assert!(!report.fits.act);
        assert!(!report.fits.wt);
    }

    #[test]
    fn overflow_report_safe_ranges_fit() {
        let report = check_overflow(
            QuantScheme::int8_winograd_act(),
            QuantScheme::int8_winograd_wt(),
        );
        assert_eq!(report.max_transformed_act, 126);
        assert_eq!(report.max_transformed_wt, 126);
        assert!(report.fits_both());
        assert_eq!(report.storage_limit, 127);
    }

    #[test]
    fn overflow_report_minimal_range() {
        let tiny = QuantScheme::new(8, 1, 1.0).unwrap();
        let report = check_overflow(tiny, tiny);
        assert_eq!(report.max_transformed_act, 2);
        assert_eq!(report.max_transformed_wt, 3);
        assert!(report.fits_both());
    }

    #[test]
    fn plan_k8_split() {
        let plan = plan_conv1d(
            8,
            1,
            QuantScheme::int8_winograd_act(),
            QuantScheme::int8_winograd_wt(),
        );
        assert_eq!(plan.path, PlanPath::Winograd);
        assert_eq!(plan.wino_groups, vec![0, 3]);
        assert_eq!(plan.remainder, TapRange { offset: 6, len: 2 });
    }

    #[test]
    fn plan_k3_single_tile() {
        let plan = plan_conv1d(
            3,
            1,
            QuantScheme::int8_winograd_act(),
            QuantScheme::int8_winograd_wt(),
        );
        assert_eq!(plan.wino_groups, vec![0]);
        assert_eq!(plan.remainder.len, 0);
    }

    #[test]
    fn plan_k1_plain_path_full_range() {
        let plan = plan_conv1d(
            1,
            1,
            QuantScheme::int8_winograd_act(),
            QuantScheme::int8_winograd_wt(),
        );
        assert_eq!(plan.path, PlanPath::PlainInt8);
        assert_eq!(plan.act_scheme.t_s(), 127);
        assert_eq!(plan.wt_scheme.t_s(), 127);
        // stride > 1 also takes the plain path
        let strided = plan_conv1d(
            5,
            2,
            QuantScheme::int8_winograd_act(),
            QuantScheme::int8_winograd_wt(),
        );
        assert_eq!(strided.path, PlanPath::PlainInt8);
        // decomposition invariant holds on every plan
        assert_eq!(3 * strided.wino_groups.len() + strided.remainder.len, 5);
    }

    fn qtensor(shape: Shape, values: Vec<i8>, scheme: QuantScheme) -> QuantizedTensor {
        QuantizedTensor::from_parts(Tensor::from_vec(shape, values).unwrap(), 1.0, scheme)
            .unwrap()
    }

    #[test]
    fn winograd_operator_box_kernel() {
        let act = QuantScheme::int8_winograd_act();
        let wt = QuantScheme::int8_winograd_wt();
        let input = qtensor(Shape::new(1, 1, 4), vec![1, 2, 3, 4], act);
        let weights = qtensor(Shape::new(1, 1, 3), vec![1, 1, 1], wt);
        let layer = QuantizedConv1D::new(weights, None, 1, (0, 0)).unwrap();
        let plan = plan_conv1d(3, 1, act, wt);
        let (raw2x, deq) = conv1d_int8_winograd(&input, &layer, &plan).unwrap();
        assert_eq!(raw2x.data(), &[12, 18]);
        assert_eq!(deq.data(), &[6.0, 9.0]);
    }

    #[test]
    fn winograd_operator_delta_kernel() {
        let act = QuantScheme::int8_winograd_act();
        let wt = QuantScheme::int8_winograd_wt();
        let input = qtensor(Shape::new(1, 1, 4), vec![1, 2, 3, 4], act);
        let weights = qtensor(Shape::new(1, 1, 3), vec![1, 0, 0], wt);
        let layer = QuantizedConv1D::new(weights, None, 1, (0, 0)).unwrap();
        let plan = plan_conv1d(3, 1, act, wt);
        let (_, deq) = conv1d_int8_winograd(&input, &layer, &plan).unwrap();
        assert_eq!(deq.data(), &[1.0, 2.0]);
    }

    #[test]
    fn winograd_refuses_full_range_schemes() {
        let full = QuantScheme::int8_full();
        let input = qtensor(Shape::new(1, 1, 4), vec![1, 2, 3, 4], full);
        let weights = qtensor(Shape::new(1, 1, 3), vec![1, 1, 1], full);
        let layer = QuantizedConv1D::new(weights, None, 1, (0, 0)).unwrap();
        let plan = plan_conv1d(3, 1, full, full);
        let err = conv1d_int8_winograd(&input, &layer, &plan).unwrap_err();
        assert!(matches!(err, Error::UnsafeScheme(_)));
    }

    #[test]
    fn winograd_matches_gemm_k8_random() {
        let act = QuantScheme::int8_winograd_act();
        let wt = QuantScheme::int8_winograd_wt();
        let plan = plan_conv1d(8, 1, act, wt);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let c_in = rng.gen_range(1..=4);
            let c_out = rng.gen_range(1..=4);
            let width = rng.gen_range(8..=40);
            let in_shape = Shape::new(2, c_in, width);
            let input = qtensor(
                in_shape,
                (0..in_shape.len()).map(|_| rng.gen_range(-63..=63) as i8).collect(),
                act,
            );
            let w_shape = Shape::new(c_out, c_in, 8);
            let weights = qtensor(
                w_shape,
                (0..w_shape.len()).map(|_| rng.gen_range(-42..=42) as i8).collect(),
                wt,
            );
            let layer = QuantizedConv1D::new(weights, None, 1, (0, 0)).unwrap();
            let (raw2x, deq_w) = conv1d_int8_winograd(&input, &layer, &plan).unwrap();
            let (raw, deq_g) = conv1d_int8_gemm(&input, &layer).unwrap();
            for (w, g) in raw2x.data().iter().zip(raw.data()) {
                assert_eq!(*w, 2 * *g);
                assert_eq!(*w % 2, 0);
            }
            for (a, b) in deq_w.data().iter().zip(deq_g.data()) {
                assert!((a - b).abs() < 1e-3 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn winograd_handles_odd_output_width() {
        let act = QuantScheme::int8_winograd_act();
        let wt = QuantScheme::int8_winograd_wt();
        let plan = plan_conv1d(5, 1, act, wt);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        // width 9, k=5 -> ow = 5 (odd), exercising the direct tail
        let in_shape = Shape::new(1, 3, 9);
        let input = qtensor(
            in_shape,
            (0..in_shape.len()).map(|_| rng.gen_range(-63..=63) as i8).collect(),
            act,
        );
        let w_shape = Shape::new(2, 3, 5);
        let weights = qtensor(
            w_shape,
            (0..w_shape.len()).map(|_| rng.gen_range(-42..=42) as i8).collect(),
            wt,
        );
        let layer = QuantizedConv1D::new(weights, None, 1, (0, 0)).unwrap();
        let (raw2x, _) = conv1d_int8_winograd(&input, &layer, &plan).unwrap();
        assert_eq!(raw2x.shape().width, 5);
        let (raw, _) = conv1d_int8_gemm(&input, &layer).unwrap();
        for (w, g) in raw2x.data().iter().zip(raw.data()) {
            assert_eq!(*w, 2 * *g);
        }
    }

    #[test]
    fn extremal_values_stay_in_storage_range() {
        // every sign pattern of saturated inputs/weights keeps transformed
        // values within [-127, 127], with the maximum exactly 126
        let mut max_seen = 0i32;
        for mask in 0..16u32 {
            let d: [i32; 4] = std::array::from_fn(|i| {
                if mask >> i & 1 == 1 {
                    63
                } else {
                    -63
                }
            });
            let td = transform_input_tile(d, 63).unwrap();
            for x in td {
                assert!(x.abs() <= 127);
                max_seen = max_seen.max(x.abs());
            }
        }
        for mask in 0..8u32 {
            let g: [i32; 3] = std::array::from_fn(|i| {
                if mask >> i & 1 == 1 {
                    42
                } else {
                    -42
                }
            });
            let tg = transform_weight(g, 42).unwrap();
            for x in tg {
                assert!(x.abs() <= 127);
                max_seen = max_seen.max(x.abs());
            }
        }
        assert_eq!(max_seen, 126);
    }

    #[test]
    fn speedup_values() {
        assert_eq!(theoretical_speedup(3).unwrap(), Ratio::new(3, 2));
        assert_eq!(theoretical_speedup(8).unwrap(), Ratio::new(4, 3));
        assert_eq!(theoretical_speedup(15).unwrap(), Ratio::new(3, 2));
        assert!(theoretical_speedup(2).is_err());
    }

    #[test]
    fn speedup_bounded_by_three_halves() {
        for k in 3..=64 {
            let s = theoretical_speedup(k).unwrap();
            assert!(s <= Ratio::new(3, 2));
            assert_eq!(s == Ratio::new(3, 2), k % 3 == 0, "k={k}");
        }
    }

    #[test]
    fn mult_counts_match_model() {
        let act = QuantScheme::int8_winograd_act();
        let wt = QuantScheme::int8_winograd_wt();
        let plan = plan_conv1d(3, 1, act, wt);
        let c = count_multiplications(&plan, 2, 1, 1);
        assert_eq!((c.gemm_mults, c.wino_mults), (6, 4));
        assert!(!c.partial_tile);

        let plan = plan_conv1d(8, 1, act, wt);
        let c = count_multiplications(&plan, 2, 1, 1);
        assert_eq!((c.gemm_mults, c.wino_mults), (16, 12));

        for k in 3..=64 {
            let plan = plan_conv1d(k, 1, act, wt);
            let c = count_multiplications(&plan, 10, 3, 5);
            let ratio = Ratio::new(c.gemm_mults, c.wino_mults);
            assert_eq!(ratio, theoretical_speedup(k).unwrap(), "k={k}");
        }
    }

    #[test]
    fn mult_counts_flag_partial_tile() {
        let plan = plan_conv1d(
            3,
            1,
            QuantScheme::int8_winograd_act(),
            QuantScheme::int8_winograd_wt(),
        );
        let c = count_multiplications(&plan, 5, 1, 1);
        assert!(c.partial_tile);
        assert_eq!(c.gemm_mults, 12); // counts the 4 whole-tile outputs only
    }

    #[test]
    fn bench_requires_repetitions() {
        let plan = plan_conv1d(
            3,
            1,
            QuantScheme::int8_winograd_act(),
            QuantScheme::int8_winograd_wt(),
        );
        let shape = BenchShape {
            batch: 1,
            c_in: 2,
            c_out: 2,
            width: 16,
        };
        let err = bench_kernel(
            &plan,
            shape,
            &BenchOptions {
                repetitions: 1,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn bench_reports_model_numbers() {
        let plan = plan_conv1d(
            9,
            1,
            QuantScheme::int8_winograd_act(),
            QuantScheme::int8_winograd_wt(),
        );
        let shape = BenchShape {
            batch: 1,
            c_in: 4,
            c_out: 4,
            width: 32,
        };
        let report = bench_kernel(
            &plan,
            shape,
            &BenchOptions {
                repetitions: 3,
                warmup: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((report.speedup_theoretical - 1.5).abs() < 1e-12);
        assert!(report.gemm_ns > 0.0 && report.wino_ns > 0.0);
        let ratio = report.gemm_mults as f64 / report.wino_mults as f64;
        assert!((ratio - report.speedup_theoretical).abs() < 1e-12);
    }

    #[test]
    fn bench_threaded_runs() {
        let plan = plan_conv1d(
            3,
            1,
            QuantScheme::int8_winograd_act(),
            QuantScheme::int8_winograd_wt(),
        );
        let shape = BenchShape {
            batch: 1,
            c_in: 3,
            c_out: 5,
            width: 24,
        };
        let report = bench_kernel(
            &plan,
            shape,
            &BenchOptions {
                repetitions: 3,
                warmup: 0,
                threads: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.wino_ns > 0.0);
    }

    #[test]
    fn equivalence_suite_small_sweep() {
        let cfg = EquivalenceConfig {
            k_values: vec![2, 3, 8],
            cases_per_k: 10,
            seed: 7,
            max_channels: 4,
            max_width: 32,
        };
        let report = run_equivalence_suite(&cfg);
        assert!(report.all_ok());
        assert_eq!(report.plain, 10); // the k=2 cases
        assert_eq!(report.exact, 20);
    }

    #[test]
    fn equivalence_suite_detects_injected_fault() {
        let cfg = EquivalenceConfig {
            k_values: vec![8],
            cases_per_k: 5,
            seed: 7,
            max_channels: 4,
            max_width: 32,
        };
        let report =
            run_equivalence_suite_with_fault(&cfg, Some(VerifyFault::RemainderOffsetSkew));
        assert!(!report.all_ok());
        assert!(report.first_failure().is_some());
    }
}

//! Range-scaled quantization training: learnable-step fake quantization with
//! its straight-through gradients, the quantization noise loss, a
//! hand-differentiated toy Conv1D network, and the PTQ / RSQ experiment
//! runner with a deployment consistency check.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{
    build_histogram, fake_quantize, kl_calibrate, quantize, QuantScheme, DEFAULT_KL_BINS,
};
use crate::reference::{conv1d_direct, conv1d_int8_gemm, Conv1DLayer, QuantizedConv1D};
use crate::scalar::Real;
use crate::tensor::{Shape, Tensor};
use crate::wino::{check_overflow, conv1d_int8_winograd, plan_conv1d, PlanPath};

/// Learnable step sizes never collapse below this.
pub const SCALE_MIN: f64 = 1e-8;

/// Learnable quantization step size with its integer-range scheme.
#[derive(Clone, Copy, Debug)]
pub struct FakeQuantParam<T: Real> {
    pub s: T,
    pub scheme: QuantScheme,
}

impl<T: Real> FakeQuantParam<T> {
    pub fn new(s: T, scheme: QuantScheme) -> Result<Self> {
        if !s.is_finite() || s <= T::zero() {
            return Err(Error::Numeric(format!(
                "step size must be finite and > 0, got {s}"
            )));
        }
        Ok(FakeQuantParam { s, scheme })
    }

    /// Gradient step on `s` with the positivity clamp.
    pub fn apply_grad(&mut self, grad: T, lr: T) {
        self.s = (self.s - lr * grad).max(T::from_f64(SCALE_MIN));
    }
}

/// Fake quantization through a learnable step size; same math as
/// [`fake_quantize`].
pub fn fq_forward<T: Real>(v: &Tensor<T>, p: &FakeQuantParam<T>) -> Result<Tensor<T>> {
    fake_quantize(v, p.s, p.scheme)
}

/// Straight-through gradients of the fake quantizer.
///
/// Per element, with `r = v/s`:
/// `dQ/dv` is 1 inside `[-T_s, T_s]` and 0 outside; `dQ/ds` is `-T_s` below,
/// `round(r) - r` inside, and `T_s` above. Returns the upstream-weighted
/// element gradient and the summed step-size gradient.
pub fn fq_backward<T: Real>(
    v: &Tensor<T>,
    p: &FakeQuantParam<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, T)> {
    if v.shape() != upstream.shape() {
        return Err(Error::ShapeMismatch(
            "upstream gradient shape differs from input".to_string(),
        ));
    }
    let t_s = T::from_i32(p.scheme.t_s());
    let mut grad_v = Vec::with_capacity(v.data().len());
    let mut grad_s = T::zero();
    for (&x, &up) in v.data().iter().zip(upstream.data()) {
        let r = x / p.s;
        if r < -t_s {
            grad_v.push(T::zero());
            grad_s += up * -t_s;
        } else if r > t_s {
            grad_v.push(T::zero());
            grad_s += up * t_s;
        } else {
            grad_v.push(up);
            grad_s += up * (r.round() - r);
        }
    }
    Ok((Tensor::from_vec(v.shape(), grad_v)?, grad_s))
}

/// Quantization noise loss `L_q = MSE(Q(v), v)`.
pub fn noise_loss<T: Real>(v: &Tensor<T>, p: &FakeQuantParam<T>) -> Result<T> {
    let q = fq_forward(v, p)?;
    let n = T::from_usize(v.data().len());
    let mut acc = T::zero();
    for (&qi, &vi) in q.data().iter().zip(v.data()) {
        let d = qi - vi;
        acc += d * d;
    }
    Ok(acc / n)
}

/// Gradients of the noise loss through the straight-through quantizer:
/// `dL/dv = (2/N)(Q(v)-v)(dQ/dv - 1)` element-wise and
/// `dL/ds = (2/N) sum (Q(v)-v) dQ/ds`.
///
/// Inside the clip range the element gradient vanishes; above `s*T_s` it is
/// strictly positive and below `-s*T_s` strictly negative, which is what
/// pulls stragglers back toward the representable range.
pub fn noise_grads<T: Real>(
    v: &Tensor<T>,
    p: &FakeQuantParam<T>,
) -> Result<(Tensor<T>, T)> {
    let t_s = T::from_i32(p.scheme.t_s());
    let n = T::from_usize(v.data().len());
    let two = T::from_f64(2.0);
    let mut grad_v = Vec::with_capacity(v.data().len());
    let mut grad_s = T::zero();
    for &x in v.data() {
        if !x.is_finite() {
            return Err(Error::Numeric(format!("non-finite input element {x}")));
        }
        let r = x / p.s;
        let (dq_dv, dq_ds, q) = if r < -t_s {
            (T::zero(), -t_s, p.s * -t_s)
        } else if r > t_s {
            (T::zero(), t_s, p.s * t_s)
        } else {
            (T::one(), r.round() - r, p.s * r.round())
        };
        let residual = two / n * (q - x);
        grad_v.push(residual * (dq_dv - T::one()));
        grad_s += residual * dq_ds;
    }
    Ok((Tensor::from_vec(v.shape(), grad_v)?, grad_s))
}

/// Which variant of the training recipe to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RsqMode {
    /// Calibrate scales only; no training steps.
    Ptq,
    /// Train weights and scales without the noise loss.
    RsqNoMse,
    /// Full recipe: training plus the beta-weighted noise loss.
    Rsq,
}

impl RsqMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RsqMode::Ptq => "ptq",
            RsqMode::RsqNoMse => "rsq_nomse",
            RsqMode::Rsq => "rsq",
        }
    }
}

/// Training hyper-parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RsqConfig {
    /// Noise-loss weight.
    pub beta: f64,
    /// Initial learning rate of the poly-decay schedule.
    pub lr0: f64,
    pub steps: usize,
    pub decay_power: f64,
    pub batch: usize,
    pub seed: u64,
    pub mode: RsqMode,
    /// Width of the synthetic input sequences.
    pub input_width: usize,
    /// Batches used for KL scale calibration.
    pub calib_batches: usize,
    /// Held-out batches for the final output MSE.
    pub eval_batches: usize,
}

impl RsqConfig {
    /// Desk-scale defaults: 300 steps, beta 0.25, lr 0.005, linear decay.
    pub fn toy(mode: RsqMode, seed: u64) -> Self {
        RsqConfig {
            beta: 0.25,
            lr0: 0.005,
            steps: 300,
            decay_power: 1.0,
            batch: 4,
            seed,
            mode,
            input_width: 48,
            calib_batches: 4,
            eval_batches: 8,
        }
    }
}

/// Polynomial learning-rate decay `lr0 * (1 - step/steps)^power`.
pub fn poly_lr(cfg: &RsqConfig, step: usize) -> f64 {
    if cfg.steps == 0 {
        return 0.0;
    }
    let frac = 1.0 - step as f64 / cfg.steps as f64;
    cfg.lr0 * frac.powf(cfg.decay_power)
}

/// Gradients of [`conv1d_direct`] with respect to its operands.
#[derive(Clone, Debug)]
pub struct ConvGrads<T: Real> {
    pub grad_input: Tensor<T>,
    pub grad_weights: Tensor<T>,
    pub grad_bias: Vec<T>,
}

/// Exact analytic gradients of the direct convolution.
pub fn conv1d_backward<T: Real>(
    input: &Tensor<T>,
    layer: &Conv1DLayer<T>,
    upstream: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let in_shape = input.shape();
    if in_shape.channels != layer.c_in() {
        return Err(Error::ShapeMismatch(format!(
            "input channels {} vs layer c_in {}",
            in_shape.channels,
            layer.c_in()
        )));
    }
    let ow = layer.out_width(in_shape.width)?;
    let up_shape = upstream.shape();
    if up_shape.batch != in_shape.batch
        || up_shape.channels != layer.c_out()
        || up_shape.width != ow
    {
        return Err(Error::ShapeMismatch(format!(
            "upstream shape ({}, {}, {}) does not match output ({}, {}, {})",
            up_shape.batch,
            up_shape.channels,
            up_shape.width,
            in_shape.batch,
            layer.c_out(),
            ow
        )));
    }
    let k = layer.k();
    let (left, _) = layer.padding;
    let pad_w = in_shape.width + layer.padding.0 + layer.padding.1;

    let mut grad_weights = Tensor::filled(layer.weights.shape(), T::zero())?;
    let mut grad_bias = vec![T::zero(); layer.c_out()];
    let mut grad_input = Tensor::filled(in_shape, T::zero())?;

    for b in 0..in_shape.batch {
        let padded: Vec<Vec<T>> = (0..layer.c_in())
            .map(|ci| {
                let mut row = vec![T::zero(); pad_w];
                row[left..left + in_shape.width].copy_from_slice(input.row(b, ci));
                row
            })
            .collect();
        let mut grad_padded = vec![vec![T::zero(); pad_w]; layer.c_in()];
        for (co, bias_slot) in grad_bias.iter_mut().enumerate() {
            let up_row = upstream.row(b, co);
            for (i, &u) in up_row.iter().enumerate() {
                *bias_slot += u;
                let base = i * layer.stride;
                for ci in 0..layer.c_in() {
                    let w_row = layer.weights.row(co, ci);
                    let x_row = &padded[ci];
                    let g_row = &mut grad_padded[ci];
                    for j in 0..k {
                        *grad_weights.at_mut(co, ci, j) += u * x_row[base + j];
                        g_row[base + j] += u * w_row[j];
                    }
                }
            }
        }
        for (ci, g_row) in grad_padded.iter().enumerate() {
            grad_input
                .row_mut(b, ci)
                .copy_from_slice(&g_row[left..left + in_shape.width]);
        }
    }
    Ok(ConvGrads {
        grad_input,
        grad_weights,
        grad_bias,
    })
}

/// One stage of the toy network: a Conv1D with optional activation/weight
/// fake quantizers and an optional trailing ReLU.
#[derive(Clone, Debug)]
pub struct ToyLayer<T: Real> {
    pub conv: Conv1DLayer<T>,
    pub act_fq: Option<FakeQuantParam<T>>,
    pub wt_fq: Option<FakeQuantParam<T>>,
    pub relu: bool,
}

impl<T: Real> ToyLayer<T> {
    pub fn is_quantized(&self) -> bool {
        self.act_fq.is_some() || self.wt_fq.is_some()
    }
}

/// Ordered stack of Conv1D layers. The final classifier layer is left
/// unquantized by the student builder.
#[derive(Clone, Debug)]
pub struct ToyModel<T: Real> {
    pub layers: Vec<ToyLayer<T>>,
}

impl<T: Real> ToyModel<T> {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidShape("model has no layers".to_string()));
        }
        for pair in self.layers.windows(2) {
            if pair[0].conv.c_out() != pair[1].conv.c_in() {
                return Err(Error::ShapeMismatch(format!(
                    "layer boundary {} -> {} does not chain",
                    pair[0].conv.c_out(),
                    pair[1].conv.c_in()
                )));
            }
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if let (Some(act), Some(wt)) = (&layer.act_fq, &layer.wt_fq) {
                let plan = plan_conv1d(layer.conv.k(), layer.conv.stride, act.scheme, wt.scheme);
                if plan.path == PlanPath::Winograd && !check_overflow(act.scheme, wt.scheme).fits_both()
                {
                    return Err(Error::UnsafeScheme(format!(
                        "layer {i} carries schemes that overflow the Winograd transforms"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Plain FP32 forward, ignoring any fake-quant parameters.
    pub fn forward_fp32(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_fp32_tape(input)?.1)
    }

    /// FP32 forward returning each layer's input, for calibration capture.
    fn forward_fp32_tape(&self, input: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let mut x = input.clone();
        let mut inputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            inputs.push(x.clone());
            let z = conv1d_direct(&x, &layer.conv)?;
            x = if layer.relu { relu(&z) } else { z };
        }
        Ok((inputs, x))
    }

    /// Fake-quant simulation forward: each quantized layer quantizes its
    /// input activation and weights before the convolution.
    pub fn forward_sim(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_sim_tape(input)?.1)
    }

    fn forward_sim_tape(&self, input: &Tensor<T>) -> Result<(Vec<LayerTape<T>>, Tensor<T>)> {
        let mut x = input.clone();
        let mut tapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x_in = x.clone();
            let a = match &layer.act_fq {
                Some(p) => fq_forward(&x_in, p)?,
                None => x_in.clone(),
            };
            let w_used = match &layer.wt_fq {
                Some(p) => fq_forward(&layer.conv.weights, p)?,
                None => layer.conv.weights.clone(),
            };
            let used = Conv1DLayer::new(
                w_used,
                Some(layer.conv.bias.clone()),
                layer.conv.stride,
                layer.conv.padding,
            )?;
            let z = conv1d_direct(&a, &used)?;
            x = if layer.relu { relu(&z) } else { z.clone() };
            tapes.push(LayerTape {
                x_in,
                a,
                layer_used: used,
                z,
            });
        }
        Ok((tapes, x))
    }
}

fn relu<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|x| x.max(T::zero()))
}

/// Forward intermediates of one simulated layer, kept for the backward pass.
struct LayerTape<T: Real> {
    x_in: Tensor<T>,
    a: Tensor<T>,
    layer_used: Conv1DLayer<T>,
    z: Tensor<T>,
}

/// One training-step record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub task_loss: f64,
    pub noise_loss: f64,
    pub lr: f64,
}

/// Result of one training run.
#[derive(Clone, Debug)]
pub struct TrainingOutcome<T: Real> {
    pub student: ToyModel<T>,
    pub history: Vec<HistoryEntry>,
    /// Held-out MSE between the fake-quant simulation and the teacher.
    pub final_output_mse: f64,
    pub scales: BTreeMap<String, f64>,
}

/// Experiment report, one per (mode, seed) run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub mode: String,
    pub seed: u64,
    pub steps: usize,
    pub beta: f64,
    pub final_output_mse: f64,
    pub scales: BTreeMap<String, f64>,
    pub history: Vec<HistoryEntry>,
}

impl<T: Real> TrainingOutcome<T> {
    pub fn report(&self, cfg: &RsqConfig) -> ExperimentReport {
        ExperimentReport {
            mode: cfg.mode.as_str().to_string(),
            seed: cfg.seed,
            steps: if cfg.mode == RsqMode::Ptq { 0 } else { cfg.steps },
            beta: cfg.beta,
            final_output_mse: self.final_output_mse,
            scales: self.scales.clone(),
            history: self.history.clone(),
        }
    }
}

fn gaussian_tensor<T: Real>(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let data: Vec<T> = (0..shape.len())
        .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::from_vec(shape, data).expect("valid shape")
}

fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.to_f64() - y.to_f64();
        acc += d * d;
    }
    acc / a.data().len() as f64
}

/// Attach fake-quant parameters to every layer except the final classifier,
/// choosing the anti-overflow schemes for Winograd-eligible kernels and the
/// full INT8 range otherwise. Scales start at 1 and are overwritten by
/// calibration.
fn build_student<T: Real>(teacher: &ToyModel<T>) -> Result<ToyModel<T>> {
    let n = teacher.layers.len();
    let layers = teacher
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let mut student = ToyLayer {
                conv: layer.conv.clone(),
                act_fq: None,
                wt_fq: None,
                relu: layer.relu,
            };
            if i + 1 < n {
                let winograd = layer.conv.k() >= 3 && layer.conv.stride == 1;
                let (act_scheme, wt_scheme) = if winograd {
                    (QuantScheme::int8_winograd_act(), QuantScheme::int8_winograd_wt())
                } else {
                    (QuantScheme::int8_full(), QuantScheme::int8_full())
                };
                student.act_fq = Some(FakeQuantParam::new(T::one(), act_scheme)?);
                student.wt_fq = Some(FakeQuantParam::new(T::one(), wt_scheme)?);
            }
            Ok(student)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyModel { layers })
}

/// Initialize every learnable scale by KL calibration: weights from their
/// own histograms, activations from FP32 forward passes over calibration
/// batches.
fn calibrate_student<T: Real>(
    student: &mut ToyModel<T>,
    teacher: &ToyModel<T>,
    cfg: &RsqConfig,
) -> Result<()> {
    let c_in0 = teacher.layers[0].conv.c_in();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5ca1_ab1e);
    let mut captured: Vec<Vec<T>> = vec![Vec::new(); teacher.layers.len()];
    for _ in 0..cfg.calib_batches {
        let x = gaussian_tensor::<T>(Shape::new(cfg.batch, c_in0, cfg.input_width), &mut rng);
        let (inputs, _) = teacher.forward_fp32_tape(&x)?;
        for (slot, t) in captured.iter_mut().zip(inputs) {
            slot.extend_from_slice(t.data());
        }
    }
    for (i, layer) in student.layers.iter_mut().enumerate() {
        if let Some(wt) = &mut layer.wt_fq {
            let hist = build_histogram(&layer.conv.weights, DEFAULT_KL_BINS)?;
            let cal = kl_calibrate(&hist, wt.scheme);
            wt.s = T::from_f64(cal.scale.max(SCALE_MIN));
        }
        if let Some(act) = &mut layer.act_fq {
            let samples = Tensor::from_vec(
                Shape::new(1, 1, captured[i].len()),
                captured[i].clone(),
            )?;
            let hist = build_histogram(&samples, DEFAULT_KL_BINS)?;
            let cal = kl_calibrate(&hist, act.scheme);
            act.s = T::from_f64(cal.scale.max(SCALE_MIN));
        }
    }
    Ok(())
}

fn collect_scales<T: Real>(student: &ToyModel<T>) -> BTreeMap<String, f64> {
    let mut scales = BTreeMap::new();
    for (i, layer) in student.layers.iter().enumerate() {
        if let Some(act) = &layer.act_fq {
            scales.insert(format!("layer{i}.act"), act.s.to_f64());
        }
        if let Some(wt) = &layer.wt_fq {
            scales.insert(format!("layer{i}.wt"), wt.s.to_f64());
        }
    }
    scales
}

fn eval_output_mse<T: Real>(
    student: &ToyModel<T>,
    teacher: &ToyModel<T>,
    cfg: &RsqConfig,
) -> Result<f64> {
    let c_in0 = teacher.layers[0].conv.c_in();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00e7_a11d);
    let mut acc = 0.0;
    for _ in 0..cfg.eval_batches.max(1) {
        let x = gaussian_tensor::<T>(Shape::new(cfg.batch, c_in0, cfg.input_width), &mut rng);
        let target = teacher.forward_fp32(&x)?;
        let out = student.forward_sim(&x)?;
        acc += mse(&out, &target);
    }
    Ok(acc / cfg.eval_batches.max(1) as f64)
}

/// Fine-tune a quantized student against an FP32 teacher.
///
/// Scales are initialized by KL calibration. In PTQ mode that is the whole
/// run; otherwise SGD distills the teacher's outputs on synthetic Gaussian
/// batches, with gradients flowing through [`fq_backward`] and
/// [`conv1d_backward`], plus `beta`-weighted [`noise_grads`] in full RSQ
/// mode. Identical seeds give bit-identical histories.
pub fn run_rsq_training<T: Real>(
    teacher: &ToyModel<T>,
    cfg: &RsqConfig,
) -> Result<TrainingOutcome<T>> {
    teacher.validate()?;
    if cfg.batch == 0 || cfg.input_width == 0 {
        return Err(Error::InvalidShape(
            "batch and input width must be >= 1".to_string(),
        ));
    }
    let mut student = build_student(teacher)?;
    student.validate()?;
    calibrate_student(&mut student, teacher, cfg)?;

    let mut history = Vec::new();
    if cfg.mode != RsqMode::Ptq {
        let beta_eff = if cfg.mode == RsqMode::Rsq {
            T::from_f64(cfg.beta)
        } else {
            T::zero()
        };
        let c_in0 = teacher.layers[0].conv.c_in();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for step in 0..cfg.steps {
            let x = gaussian_tensor::<T>(Shape::new(cfg.batch, c_in0, cfg.input_width), &mut rng);
            let target = teacher.forward_fp32(&x)?;
            let (tapes, out) = student.forward_sim_tape(&x)?;

            let task_loss = mse(&out, &target);
            let mut noise_total = 0.0f64;

            // dL_task/d_out
            let n_out = T::from_usize(out.data().len());
            let two = T::from_f64(2.0);
            let mut grad: Tensor<T> = Tensor::from_vec(
                out.shape(),
                out.data()
                    .iter()
                    .zip(target.data())
                    .map(|(&o, &t)| two / n_out * (o - t))
                    .collect(),
            )?;

            let lr = T::from_f64(poly_lr(cfg, step));
            for (layer, tape) in student.layers.iter_mut().zip(tapes.iter()).rev() {
                // ReLU mask
                if layer.relu {
                    grad = Tensor::from_vec(
                        grad.shape(),
                        grad.data()
                            .iter()
                            .zip(tape.z.data())
                            .map(|(&g, &z)| if z > T::zero() { g } else { T::zero() })
                            .collect(),
                    )?;
                }
                let grads = conv1d_backward(&tape.a, &tape.layer_used, &grad)?;

                let mut grad_w = grads.grad_weights;
                let mut grad_s_w = T::zero();
                if let Some(wt) = &layer.wt_fq {
                    let (g, gs) = fq_backward(&layer.conv.weights, wt, &grad_w)?;
                    grad_w = g;
                    grad_s_w = gs;
                    if beta_eff > T::zero() {
                        let (nv, ns) = noise_grads(&layer.conv.weights, wt)?;
                        grad_w = add_scaled(&grad_w, &nv, beta_eff)?;
                        grad_s_w += beta_eff * ns;
                    }
                    noise_total += noise_loss(&layer.conv.weights, wt)?.to_f64();
                }

                let mut grad_x = grads.grad_input;
                let mut grad_s_a = T::zero();
                if let Some(act) = &layer.act_fq {
                    let (g, gs) = fq_backward(&tape.x_in, act, &grad_x)?;
                    grad_x = g;
                    grad_s_a = gs;
                    if beta_eff > T::zero() {
                        let (nv, ns) = noise_grads(&tape.x_in, act)?;
                        grad_x = add_scaled(&grad_x, &nv, beta_eff)?;
                        grad_s_a += beta_eff * ns;
                    }
                    noise_total += noise_loss(&tape.x_in, act)?.to_f64();
                }

                // SGD update
                for (w, g) in layer
                    .conv
                    .weights
                    .data_mut()
                    .iter_mut()
                    .zip(grad_w.data())
                {
                    *w -= lr * *g;
                }
                for (b, g) in layer.conv.bias.iter_mut().zip(&grads.grad_bias) {
                    *b -= lr * *g;
                }
                if let Some(wt) = &mut layer.wt_fq {
                    wt.apply_grad(grad_s_w, lr);
                }
                if let Some(act) = &mut layer.act_fq {
                    act.apply_grad(grad_s_a, lr);
                }
                grad = grad_x;
            }

            if !task_loss.is_finite() || !noise_total.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at step {step}: task {task_loss}, noise {noise_total}"
                )));
            }
            history.push(HistoryEntry {
                step,
                task_loss,
                noise_loss: noise_total,
                lr: lr.to_f64(),
            });
        }
    }

    let final_output_mse = eval_output_mse(&student, teacher, cfg)?;
    if !final_output_mse.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite evaluation MSE {final_output_mse}"
        )));
    }
    let scales = collect_scales(&student);
    Ok(TrainingOutcome {
        student,
        history,
        final_output_mse,
        scales,
    })
}

fn add_scaled<T: Real>(a: &Tensor<T>, b: &Tensor<T>, factor: T) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch("gradient shapes differ".to_string()));
    }
    Tensor::from_vec(
        a.shape(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + factor * y)
            .collect(),
    )
}

/// Per-layer outcome of the deployment consistency check.
#[derive(Clone, Debug, Serialize)]
pub struct LayerDeployCheck {
    pub layer: usize,
    /// "winograd", "gemm" or "fp32" (bypassed).
    pub path: String,
    pub max_abs_deviation: f64,
    pub max_allowed: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DeployReport {
    pub layers: Vec<LayerDeployCheck>,
    pub tolerance: f64,
}

/// Relative tolerance for fake-quant vs integer-path agreement.
pub const DEPLOY_TOLERANCE: f64 = 1e-4;

/// Check that the trained fake-quant simulation and the integer deployment
/// path compute the same layer outputs: weights and input activations are
/// quantized with the learned scales, run through the INT8 Winograd (or
/// GEMM) operator, and compared against the simulated pre-activation output
/// within `1e-4` relative.
pub fn deploy_check(student: &ToyModel<f32>, input: &Tensor<f32>) -> Result<DeployReport> {
    deploy_check_with_corruption(student, input, None)
}

/// Deployment check with an injected scale corruption on the integer path
/// of one layer, used to exercise the mismatch detection.
#[doc(hidden)]
pub fn deploy_check_with_corruption(
    student: &ToyModel<f32>,
    input: &Tensor<f32>,
    corrupt: Option<(usize, f64)>,
) -> Result<DeployReport> {
    student.validate()?;
    let (tapes, _) = student.forward_sim_tape(input)?;
    let mut layers = Vec::with_capacity(student.layers.len());
    for (i, (layer, tape)) in student.layers.iter().zip(tapes.iter()).enumerate() {
        let (act, wt) = match (&layer.act_fq, &layer.wt_fq) {
            (Some(a), Some(w)) => (a, w),
            _ => {
                // unquantized classifier: integer path bypassed
                layers.push(LayerDeployCheck {
                    layer: i,
                    path: "fp32".to_string(),
                    max_abs_deviation: 0.0,
                    max_allowed: 0.0,
                });
                continue;
            }
        };
        let wt_scale = match corrupt {
            Some((target, factor)) if target == i => wt.s * factor as f32,
            _ => wt.s,
        };
        let q_x = quantize(&tape.x_in, act.s, act.scheme)?;
        let q_w = quantize(&layer.conv.weights, wt_scale, wt.scheme)?;
        let qlayer = QuantizedConv1D::new(
            q_w,
            Some(layer.conv.bias.clone()),
            layer.conv.stride,
            layer.conv.padding,
        )?;
        let plan = plan_conv1d(layer.conv.k(), layer.conv.stride, act.scheme, wt.scheme);
        let (deq, path) = if plan.path == PlanPath::Winograd {
            (conv1d_int8_winograd(&q_x, &qlayer, &plan)?.1, "winograd")
        } else {
            (conv1d_int8_gemm(&q_x, &qlayer)?.1, "gemm")
        };

        let mut max_abs = 0.0f64;
        let mut max_allowed = 0.0f64;
        for (idx, (&int_val, &sim_val)) in deq.data().iter().zip(tape.z.data()).enumerate() {
            let dev = (f64::from(int_val) - f64::from(sim_val)).abs();
            let allowed = DEPLOY_TOLERANCE * f64::from(sim_val.abs()).max(1.0);
            if dev > max_abs {
                max_abs = dev;
                max_allowed = allowed;
            }
            if dev > allowed {
                return Err(Error::DeploymentMismatch {
                    layer: i,
                    index: idx,
                    integer: int_val,
                    simulated: sim_val,
                    deviation: dev,
                });
            }
        }
        layers.push(LayerDeployCheck {
            layer: i,
            path: path.to_string(),
            max_abs_deviation: max_abs,
            max_allowed,
        });
    }
    Ok(DeployReport {
        layers,
        tolerance: DEPLOY_TOLERANCE,
    })
}

/// Median of a non-empty sample set.
fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite MSE"));
    v[v.len() / 2]
}

/// Aggregate over seeds for one mode.
#[derive(Clone, Debug, Serialize)]
pub struct ModeSummary {
    pub mode: String,
    pub median_mse: f64,
    pub seed_mses: Vec<f64>,
}

/// Result of the PTQ / RSQ-without-MSE / RSQ comparison over several seeds.
#[derive(Clone, Debug, Serialize)]
pub struct DemoReport {
    pub seeds: Vec<u64>,
    pub summaries: Vec<ModeSummary>,
    pub runs: Vec<ExperimentReport>,
    /// median(RSQ) <= median(RSQ without MSE)
    pub rsq_leq_nomse: bool,
    /// median(RSQ without MSE) <= median(PTQ)
    pub nomse_leq_ptq: bool,
    /// Seeds where RSQ beat PTQ strictly.
    pub rsq_beats_ptq_seeds: usize,
    /// Deployment consistency of every RSQ student.
    pub deploy_passed: bool,
    pub low_confidence: bool,
}

impl DemoReport {
    pub fn ordering_holds(&self) -> bool {
        self.rsq_leq_nomse && self.nomse_leq_ptq
    }
}

/// Run all three modes over the given seeds on per-seed toy teachers, then
/// deploy-check each RSQ student. One seed yields a low-confidence report.
pub fn run_train_demo(seeds: &[u64], base: &RsqConfig) -> Result<DemoReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidShape("need at least one seed".to_string()));
    }
    let modes = [RsqMode::Ptq, RsqMode::RsqNoMse, RsqMode::Rsq];
    let mut runs = Vec::with_capacity(modes.len() * seeds.len());
    let mut per_mode: Vec<Vec<f64>> = vec![Vec::new(); modes.len()];
    let mut rsq_beats_ptq_seeds = 0usize;
    let mut deploy_passed = true;

    for &seed in seeds {
        let teacher = toy_teacher(seed.wrapping_mul(1000).wrapping_add(1));
        let mut seed_mses = [0.0f64; 3];
        for (mi, &mode) in modes.iter().enumerate() {
            let cfg = RsqConfig {
                mode,
                seed,
                ..base.clone()
            };
            let outcome = run_rsq_training(&teacher, &cfg)?;
            seed_mses[mi] = outcome.final_output_mse;
            per_mode[mi].push(outcome.final_output_mse);
            runs.push(outcome.report(&cfg));
            if mode == RsqMode::Rsq {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdeb1_0c8e);
                let x = gaussian_tensor::<f32>(
                    Shape::new(
                        cfg.batch,
                        teacher.layers[0].conv.c_in(),
                        cfg.input_width,
                    ),
                    &mut rng,
                );
                // f32 students only: the integer path is deployment-concrete
                let student32 = outcome_to_f32(&outcome);
                if deploy_check(&student32, &x).is_err() {
                    deploy_passed = false;
                }
            }
        }
        if seed_mses[2] < seed_mses[0] {
            rsq_beats_ptq_seeds += 1;
        }
    }

    let medians: Vec<f64> = per_mode.iter().map(|v| median(v)).collect();
    let summaries = modes
        .iter()
        .zip(per_mode.iter())
        .zip(medians.iter())
        .map(|((mode, mses), &median_mse)| ModeSummary {
            mode: mode.as_str().to_string(),
            median_mse,
            seed_mses: mses.clone(),
        })
        .collect();
    Ok(DemoReport {
        seeds: seeds.to_vec(),
        summaries,
        runs,
        rsq_leq_nomse: medians[2] <= medians[1],
        nomse_leq_ptq: medians[1] <= medians[0],
        rsq_beats_ptq_seeds,
        deploy_passed,
        low_confidence: seeds.len() < 2,
    })
}

// The demo trains in f32 already; this exists so run_train_demo keeps working
// if callers instantiate it with f64 teachers later.
fn outcome_to_f32<T: Real>(outcome: &TrainingOutcome<T>) -> ToyModel<f32> {
    let layers = outcome
        .student
        .layers
        .iter()
        .map(|l| ToyLayer {
            conv: Conv1DLayer::new(
                l.conv.weights.map(|x| x.to_f64() as f32),
                Some(l.conv.bias.iter().map(|&b| b.to_f64() as f32).collect()),
                l.conv.stride,
                l.conv.padding,
            )
            .expect("same shapes"),
            act_fq: l.act_fq.as_ref().map(|p| FakeQuantParam {
                s: p.s.to_f64() as f32,
                scheme: p.scheme,
            }),
            wt_fq: l.wt_fq.as_ref().map(|p| FakeQuantParam {
                s: p.s.to_f64() as f32,
                scheme: p.scheme,
            }),
            relu: l.relu,
        })
        .collect();
    ToyModel { layers }
}

/// Manifest entry for one checkpointed layer.
#[derive(Serialize, Deserialize)]
struct LayerManifest {
    name: String,
    weights_file: String,
    bias: Vec<f32>,
    stride: usize,
    padding: (usize, usize),
    relu: bool,
    act: Option<FqManifest>,
    wt: Option<FqManifest>,
}

#[derive(Serialize, Deserialize)]
struct FqManifest {
    storage_bits: u32,
    base_t: i32,
    alpha: f64,
    scale: f64,
}

impl FqManifest {
    fn from_param(p: &FakeQuantParam<f32>) -> Self {
        FqManifest {
            storage_bits: p.scheme.storage_bits(),
            base_t: p.scheme.base_t(),
            alpha: p.scheme.alpha(),
            scale: f64::from(p.s),
        }
    }

    fn to_param(&self) -> Result<FakeQuantParam<f32>> {
        FakeQuantParam::new(
            self.scale as f32,
            QuantScheme::new(self.storage_bits, self.base_t, self.alpha)?,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    layers: Vec<LayerManifest>,
}

/// Write a model as raw weight tensors plus a JSON manifest of layers,
/// schemes and scales.
pub fn save_checkpoint(model: &ToyModel<f32>, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut layers = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let name = format!("layer{i}");
        let weights_file = format!("{name}.weights.bin");
        crate::io::save_tensor(&dir.join(&weights_file), &layer.conv.weights)?;
        layers.push(LayerManifest {
            name,
            weights_file,
            bias: layer.conv.bias.clone(),
            stride: layer.conv.stride,
            padding: layer.conv.padding,
            relu: layer.relu,
            act: layer.act_fq.as_ref().map(FqManifest::from_param),
            wt: layer.wt_fq.as_ref().map(FqManifest::from_param),
        });
    }
    let manifest = CheckpointManifest { layers };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Load a model written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &std::path::Path) -> Result<ToyModel<f32>> {
    let manifest: CheckpointManifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let layers = manifest
        .layers
        .iter()
        .map(|m| {
            let weights = crate::io::load_tensor::<f32>(&dir.join(&m.weights_file))?;
            Ok(ToyLayer {
                conv: Conv1DLayer::new(weights, Some(m.bias.clone()), m.stride, m.padding)?,
                act_fq: m.act.as_ref().map(FqManifest::to_param).transpose()?,
                wt_fq: m.wt.as_ref().map(FqManifest::to_param).transpose()?,
                relu: m.relu,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = ToyModel { layers };
    model.validate()?;
    Ok(model)
}

/// Three-layer Conv1D teacher with kernels 3, 8 and 15 and mildly
/// heavy-tailed weights, the desk-scale stand-in for a Conv1D acoustic
/// front-end.
pub fn toy_teacher(seed: u64) -> ToyModel<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [(6usize, 12usize, 3usize), (12, 16, 8), (16, 8, 15)];
    let n = dims.len();
    let layers = dims
        .iter()
        .enumerate()
        .map(|(i, &(c_in, c_out, k))| {
            let shape = Shape::new(c_out, c_in, k);
            let sigma = 1.0 / ((c_in * k) as f32).sqrt();
            let data: Vec<f32> = (0..shape.len())
                .map(|_| {
                    let w: f64 = rng.sample(StandardNormal);
                    let mut w = w as f32 * sigma;
                    // a sparse set of outsized taps makes calibration matter
                    if rng.gen_range(0.0f32..1.0) < 0.02 {
                        w *= 4.0;
                    }
                    w
                })
                .collect();
            let bias: Vec<f32> = (0..c_out)
                .map(|_| rng.sample::<f64, _>(StandardNormal) as f32 * 0.05)
                .collect();
            ToyLayer {
                conv: Conv1DLayer::new(
                    Tensor::from_vec(shape, data).expect("valid shape"),
                    Some(bias),
                    1,
                    (0, 0),
                )
                .expect("valid layer"),
                act_fq: None,
                wt_fq: None,
                relu: i + 1 < n,
            }
        })
        .collect();
    ToyModel { layers }
}

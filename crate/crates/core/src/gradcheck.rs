//! Finite-difference verification of the training gradients.
//!
//! The fake quantizer is a staircase, so its straight-through gradients are
//! slopes of the function's linear envelopes rather than almost-everywhere
//! derivatives. Central differences still pin them down exactly when probed
//! along the two directions where the implemented functions are genuinely
//! linear (or quadratic) in the probe parameter:
//!
//! * stepping `v` by one full grid step `h = s` walks the staircase up one
//!   step, so the secant slope is exactly the in-range envelope slope 1 (and
//!   exactly 0 in saturation);
//! * scaling `(v, s)` jointly to `(r*s', s')` with `r = v/s` fixed keeps the
//!   rounded integer constant, making the outputs linear in `s'`; the secant
//!   equals the directional derivative `r * dQ/dv + dQ/ds`, which pins
//!   `dQ/ds` once `dQ/dv` is known.
//!
//! Samples are drawn away from rounding and clip kinks so no probe crosses a
//! discontinuity. All checks run in 64-bit arithmetic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::quant::QuantScheme;
use crate::tensor::{Shape, Tensor};
use crate::train::{fq_backward, fq_forward, noise_grads, noise_loss, FakeQuantParam};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub samples: usize,
    pub tolerance: f64,
    pub seed: u64,
    pub scheme: QuantScheme,
    /// Additional random points for the noise-gradient sign-structure sweep.
    pub sign_samples: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            samples: 1000,
            tolerance: 1e-4,
            seed: 42,
            scheme: QuantScheme::int8_winograd_wt(),
            sign_samples: 10_000,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub samples: usize,
    pub tolerance: f64,
    pub seed: u64,
    pub failures: usize,
    pub worst_fq_v: f64,
    pub worst_fq_s: f64,
    pub worst_noise_v: f64,
    pub worst_noise_s: f64,
    pub sign_samples: usize,
    pub sign_violations: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.sign_violations == 0
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

/// Sample `(v, s)` with `|frac(v/s) - 0.5| > margin` and `||v/s| - T_s|`
/// more than one grid step plus margin away from the clip boundary, so both
/// probe directions stay within one branch.
fn sample_point(rng: &mut ChaCha8Rng, t_s: f64, margin: f64) -> (f64, f64) {
    loop {
        let s = 10f64.powf(rng.gen_range(-2.5f64..-0.5));
        // half the samples saturated, half in range
        let r = if rng.gen_bool(0.5) {
            rng.gen_range(-(t_s - 1.5)..t_s - 1.5)
        } else {
            let mag = rng.gen_range(t_s + 1.5..3.0 * t_s);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        };
        let frac = (r - r.floor()).abs();
        if (frac - 0.5).abs() <= margin {
            continue;
        }
        if (r.abs() - t_s).abs() <= 1.0 + margin {
            continue;
        }
        return (r * s, s);
    }
}

struct PointCheck {
    fq_v: f64,
    fq_s: f64,
    noise_v: f64,
    noise_s: f64,
}

fn check_point(v: f64, s: f64, scheme: QuantScheme) -> PointCheck {
    let p = FakeQuantParam::new(s, scheme).expect("positive step");
    let one = |x: f64| Tensor::from_vec(Shape::new(1, 1, 1), vec![x]).expect("scalar tensor");
    let q_at = |v: f64, s: f64| {
        let p = FakeQuantParam::new(s, scheme).expect("positive step");
        fq_forward(&one(v), &p).expect("finite").data()[0]
    };
    let l_at = |v: f64, s: f64| {
        let p = FakeQuantParam::new(s, scheme).expect("positive step");
        noise_loss(&one(v), &p).expect("finite")
    };

    let (gv, gs) = fq_backward(&one(v), &p, &one(1.0)).expect("finite");
    let (nv, ns) = noise_grads(&one(v), &p).expect("finite");
    let r = v / s;

    // envelope slope in v: one full grid step
    let fq_v_num = (q_at(v + s, s) - q_at(v - s, s)) / (2.0 * s);
    let noise_v_num = (l_at(v + s, s) - l_at(v - s, s)) / (2.0 * s);

    // scaling direction: v/s held fixed, secant equals r*dQ/dv + dQ/ds
    let h = s * 1e-4;
    let fq_dir_num = (q_at(r * (s + h), s + h) - q_at(r * (s - h), s - h)) / (2.0 * h);
    let fq_dir_ana = r * gv.data()[0] + gs;
    let noise_dir_num = (l_at(r * (s + h), s + h) - l_at(r * (s - h), s - h)) / (2.0 * h);
    let noise_dir_ana = r * nv.data()[0] + ns;

    PointCheck {
        fq_v: rel_err(gv.data()[0], fq_v_num),
        fq_s: rel_err(fq_dir_ana, fq_dir_num),
        noise_v: rel_err(nv.data()[0], noise_v_num),
        noise_s: rel_err(noise_dir_ana, noise_dir_num),
    }
}

/// Run the full gradient verification sweep.
pub fn run_gradcheck(cfg: &GradCheckConfig) -> GradCheckReport {
    let t_s = f64::from(cfg.scheme.t_s());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut failures = 0usize;
    let (mut wv, mut ws, mut wnv, mut wns) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);

    for _ in 0..cfg.samples {
        let (v, s) = sample_point(&mut rng, t_s, 0.05);
        let c = check_point(v, s, cfg.scheme);
        wv = wv.max(c.fq_v);
        ws = ws.max(c.fq_s);
        wnv = wnv.max(c.noise_v);
        wns = wns.max(c.noise_s);
        if c.fq_v > cfg.tolerance
            || c.fq_s > cfg.tolerance
            || c.noise_v > cfg.tolerance
            || c.noise_s > cfg.tolerance
        {
            failures += 1;
        }
    }

    // sign structure of the noise-loss element gradient
    let mut sign_violations = 0usize;
    let one = |x: f64| Tensor::from_vec(Shape::new(1, 1, 1), vec![x]).expect("scalar tensor");
    for _ in 0..cfg.sign_samples {
        let s = 10f64.powf(rng.gen_range(-2.5f64..-0.5));
        let v = rng.gen_range(-3.0 * t_s * s..3.0 * t_s * s);
        let p = FakeQuantParam::new(s, cfg.scheme).expect("positive step");
        let (gv, _) = noise_grads(&one(v), &p).expect("finite");
        let g = gv.data()[0];
        let bound = s * t_s;
        let ok = if v > bound {
            g > 0.0
        } else if v < -bound {
            g < 0.0
        } else {
            g == 0.0
        };
        if !ok {
            sign_violations += 1;
        }
    }

    GradCheckReport {
        samples: cfg.samples,
        tolerance: cfg.tolerance,
        seed: cfg.seed,
        failures,
        worst_fq_v: wv,
        worst_fq_s: ws,
        worst_noise_v: wnv,
        worst_noise_s: wns,
        sign_samples: cfg.sign_samples,
        sign_violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sweep_passes() {
        let cfg = GradCheckConfig {
            samples: 200,
            sign_samples: 1000,
            ..Default::default()
        };
        let report = run_gradcheck(&cfg);
        assert!(report.passed(), "{report:?}");
        assert!(report.worst_fq_v < 1e-6);
        assert!(report.worst_noise_s < 1e-6);
    }

    #[test]
    fn identical_seed_identical_report() {
        let cfg = GradCheckConfig {
            samples: 50,
            sign_samples: 100,
            ..Default::default()
        };
        let a = run_gradcheck(&cfg);
        let b = run_gradcheck(&cfg);
        assert_eq!(a.worst_fq_s.to_bits(), b.worst_fq_s.to_bits());
        assert_eq!(a.worst_noise_v.to_bits(), b.worst_noise_v.to_bits());
    }

    #[test]
    fn unreasonable_tolerance_fails_honestly() {
        let cfg = GradCheckConfig {
            samples: 200,
            tolerance: 1e-18,
            sign_samples: 0,
            ..Default::default()
        };
        let report = run_gradcheck(&cfg);
        assert!(report.failures > 0);
    }
}

//! Learned step size optimization of scale and zero offset.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::{affine_from_range, quant_error, quantize, QuantParams, MIN_SCALE};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsqConfig {
    pub iters: usize,
    /// Relative step size: the scale moves by about `lr · s₀` per step and the
    /// zero offset by about `lr · ZERO_STEP` codes.
    pub lr: f64,
}

impl Default for LsqConfig {
    fn default() -> Self {
        Self { iters: 200, lr: 0.3 }
    }
}

const REFIT_ROUNDS: usize = 10;

/// Zero-offset step (in codes) per unit of `lr`.
const ZERO_STEP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LsqOutcome {
    pub params: QuantParams,
    pub objective: f64,
    pub initial_objective: f64,
}

/// Minimizes `‖fake_quant(x, p) − target‖²` over scale and zero offset,
/// `target` defaulting to `x`.
///
/// The scale gradient follows the learned-step-size rule and is multiplied by
/// `1/√(N·Q)`; the zero offset is optimized as a real number and rounded when
/// a candidate is scored. The best candidate seen (including `p0`) is
/// returned.
pub fn lsq_optimize(
    x: &Tensor,
    p0: &QuantParams,
    cfg: &LsqConfig,
    target: Option<&Tensor>,
) -> Result<LsqOutcome> {
    p0.validate()?;
    if cfg.iters == 0 {
        return Err(Error::Config("lsq_optimize needs iters >= 1".into()));
    }
    let target = target.unwrap_or(x);
    x.check_same(target)?;
    let layout = p0.layout(x.shape())?;
    let initial_objective = quant_error(x, p0, target)?;
    let mut best = LsqOutcome {
        params: p0.clone(),
        objective: initial_objective,
        initial_objective,
    };
    if initial_objective == 0.0 {
        return Ok(best);
    }

    let starts = [p0.clone(), shrink_init(x, p0, target)?];
    for start in &starts {
        let reached = descend(x, start, cfg, target, layout.channels, &mut best)?;
        refit(x, &reached, target, &mut best)?;
    }
    let from_best = best.params.clone();
    refit(x, &from_best, target, &mut best)?;
    Ok(best)
}

/// Alternates a closed-form scale fit for fixed codes with re-quantization.
/// For fixed codes `k = code − z` the objective `Σ (s·k − t)²` is minimized
/// by `s = Σ k·t / Σ k²` per channel.
fn refit(x: &Tensor, from: &QuantParams, target: &Tensor, best: &mut LsqOutcome) -> Result<()> {
    let layout = from.layout(x.shape())?;
    let mut cur = from.clone();
    for _ in 0..REFIT_ROUNDS {
        let codes = quantize(x, &cur)?;
        let mut num = vec![0.0; cur.channels()];
        let mut den = vec![0.0; cur.channels()];
        for (e, (&code, &t)) in codes.codes.iter().zip(target.data()).enumerate() {
            let c = layout.channel(e);
            let k = (code as i64 - cur.zero[c]) as f64;
            num[c] += k * t;
            den[c] += k * k;
        }
        let mut next = cur.clone();
        for c in 0..cur.channels() {
            if den[c] > 0.0 && num[c] > 0.0 {
                next.scale[c] = (num[c] / den[c]).max(MIN_SCALE);
            }
        }
        if next == cur {
            break;
        }
        let obj = quant_error(x, &next, target)?;
        if obj < best.objective {
            best.params = next.clone();
            best.objective = obj;
        }
        cur = next;
    }
    Ok(())
}

/// The min-max range of `p0` shrunk by the factor (out of 100 evenly spaced
/// ones) with the smallest error.
fn shrink_init(x: &Tensor, p0: &QuantParams, target: &Tensor) -> Result<QuantParams> {
    let mut best = (quant_error(x, p0, target)?, p0.clone());
    for k in 1..100 {
        let a = k as f64 / 100.0;
        let mut cand = p0.clone();
        for c in 0..p0.channels() {
            let (lo, hi) = p0.range(c);
            let (s, z) = affine_from_range(a * lo, a * hi, p0.bits);
            cand.scale[c] = s;
            cand.zero[c] = z;
        }
        let err = quant_error(x, &cand, target)?;
        if err < best.0 {
            best = (err, cand);
        }
    }
    Ok(best.1)
}

fn descend(
    x: &Tensor,
    p0: &QuantParams,
    cfg: &LsqConfig,
    target: &Tensor,
    channels: usize,
    best: &mut LsqOutcome,
) -> Result<QuantParams> {
    let q = p0.levels() as f64;
    let per_channel = (x.len() / channels).max(1) as f64;
    let grad_scale = 1.0 / (per_channel * q).sqrt();
    let shape = vec![p0.channels()];
    let mut scale = Tensor::new(shape.clone(), p0.scale.clone())?;
    let mut zero = Tensor::new(shape, p0.zero.iter().map(|&z| z as f64).collect())?;
    let base_lr_s: Vec<f64> = p0.scale.iter().map(|s| s * cfg.lr).collect();
    let mut opt = Adam::new();

    for k in 0..cfg.iters {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let tv = tape.constant(target.clone());
        let sv = tape.param("scale", scale.clone());
        let zv = tape.param("zero", zero.clone());
        let fq = tape.fake_quant(xv, sv, zv, p0.bits, p0.granularity.axis())?;
        let loss = tape.sq_dist(fq, tv)?;
        let lv = tape.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::Optimization {
                context: "lsq".into(),
                detail: format!("non-finite objective at iteration {k}"),
            });
        }
        let grads = tape.backward(loss)?;
        let gs = grads.get("scale")?.scale(grad_scale);
        let gz = grads.get("zero")?;

        let decay = 0.5 * (1.0 + (PI * k as f64 / cfg.iters as f64).cos());
        let lr_s: Vec<f64> = base_lr_s.iter().map(|l| l * decay).collect();
        opt.step("scale", &mut scale, &gs, &lr_s);
        opt.step("zero", &mut zero, gz, &[cfg.lr * ZERO_STEP * decay]);
        for s in scale.data_mut() {
            *s = s.max(MIN_SCALE);
        }
        for z in zero.data_mut() {
            *z = z.clamp(0.0, q);
        }

        // score both integer neighbours of the relaxed zero offset
        for round in [f64::floor, f64::ceil] {
            let cand = QuantParams {
                scale: scale.data().to_vec(),
                zero: zero.data().iter().map(|&z| round(z) as i64).collect(),
                bits: p0.bits,
                granularity: p0.granularity,
            };
            let obj = quant_error(x, &cand, target)?;
            if obj < best.objective {
                best.params = cand;
                best.objective = obj;
            }
        }
    }
    Ok(QuantParams {
        scale: scale.data().to_vec(),
        zero: zero.data().iter().map(|z| z.round_ties_even() as i64).collect(),
        bits: p0.bits,
        granularity: p0.granularity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::estimate::{estimate_range, RangeMethod};
    use crate::quant::params::Granularity;

    #[test]
    fn representable_input_returns_p0() {
        let p0 = QuantParams::per_tensor(0.25, 2, 3);
        let x = Tensor::new(vec![4], vec![-0.5, 0.0, 0.25, 1.0]).unwrap();
        let out = lsq_optimize(&x, &p0, &LsqConfig::default(), None).unwrap();
        assert_eq!(out.params, p0);
        assert_eq!(out.objective, 0.0);
    }

    #[test]
    fn never_worse_than_start() {
        let x = Tensor::new(vec![8], vec![0.3, -1.2, 0.05, 2.2, -0.4, 0.9, 1.1, -2.5]).unwrap();
        let p0 = estimate_range(&[x.clone()], RangeMethod::MinMax, 3, Granularity::PerTensor, false).unwrap();
        let out = lsq_optimize(&x, &p0, &LsqConfig::default(), None).unwrap();
        assert!(out.objective <= out.initial_objective);
        assert!(out.objective < out.initial_objective);
        out.params.validate().unwrap();
    }

    #[test]
    fn zero_iterations_rejected() {
        let p0 = QuantParams::per_tensor(0.25, 2, 3);
        let x = Tensor::new(vec![1], vec![0.1]).unwrap();
        assert!(lsq_optimize(&x, &p0, &LsqConfig { iters: 0, lr: 0.1 }, None).is_err());
    }
}

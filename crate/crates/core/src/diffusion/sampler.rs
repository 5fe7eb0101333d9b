//! Ancestral (DDPM) and implicit (DDIM) samplers.
//!
//! Samples are produced in chunks of [`SAMPLE_CHUNK`] rows. Chunk `k` draws
//! all of its noise from stream `k` of a generator seeded with the caller's
//! seed, so two models sampled with the same seed see identical noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{DenoiserGraph, ForwardHooks};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Sampler {
    Ddpm,
    /// `steps` evenly spaced timesteps; `eta = 0` is deterministic.
    Ddim { steps: usize, eta: f64 },
}

impl Default for Sampler {
    fn default() -> Self {
        Sampler::Ddpm
    }
}

impl Sampler {
    /// Timesteps visited, in the order they are denoised.
    pub fn timesteps(&self, total: usize) -> Result<Vec<usize>> {
        match *self {
            Sampler::Ddpm => Ok((1..=total).rev().collect()),
            Sampler::Ddim { steps, eta } => {
                if steps == 0 || steps > total {
                    return Err(Error::Config(format!("ddim steps must be in 1..={total}, got {steps}")));
                }
                if !(0.0..=1.0).contains(&eta) {
                    return Err(Error::Config(format!("ddim eta must be in [0, 1], got {eta}")));
                }
                Ok((0..steps).rev().map(|j| 1 + j * total / steps).collect())
            }
        }
    }
}

/// One ancestral step
/// `x_{t−1} = (x_t − β_t/√(1−ᾱ_t)·ε) / √α_t + σ_t·z`.
///
/// The noise term is skipped at `t = 1` and when `z` is `None`.
pub fn denoise_step(
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    eps: &Tensor,
    t: usize,
    z: Option<&Tensor>,
) -> Result<Tensor> {
    x_t.check_same(eps)?;
    let beta = schedule.beta(t)?;
    let coef = beta / (1.0 - schedule.alpha_bar(t)?).sqrt();
    let inv = 1.0 / schedule.alpha(t)?.sqrt();
    let sigma = schedule.sigma(t)?;
    let mut out: Vec<f64> = x_t
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| inv * (x - coef * e))
        .collect();
    if let (Some(z), true) = (z, t > 1) {
        x_t.check_same(z)?;
        for (o, n) in out.iter_mut().zip(z.data()) {
            *o += sigma * n;
        }
    }
    Tensor::new(x_t.shape().to_vec(), out)
}

/// One generalized implicit step from `t` to `t_prev` (`t_prev = 0` ends
/// the chain).
pub fn ddim_step(
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: usize,
    eta: f64,
    z: Option<&Tensor>,
) -> Result<Tensor> {
    x_t.check_same(eps)?;
    if t_prev >= t {
        return Err(Error::Index(format!("ddim step must go backwards, got {t} -> {t_prev}")));
    }
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut out: Vec<f64> = x_t
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| {
            let x0 = (x - (1.0 - ab).sqrt() * e) / ab.sqrt();
            ab_prev.sqrt() * x0 + dir * e
        })
        .collect();
    if let (Some(z), true) = (z, sigma > 0.0) {
        x_t.check_same(z)?;
        for (o, n) in out.iter_mut().zip(z.data()) {
            *o += sigma * n;
        }
    }
    Tensor::new(x_t.shape().to_vec(), out)
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches count")
}

/// Runs the reverse chain for `count` samples, calling `observe(t, x_t,
/// eps)` before every update.
pub fn sample_with(
    model: &DenoiserGraph,
    hooks: &mut dyn ForwardHooks,
    count: usize,
    sampler: Sampler,
    seed: u64,
    observe: &mut dyn FnMut(usize, &Tensor, &Tensor) -> Result<()>,
) -> Result<Tensor> {
    if count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let schedule = model.schedule();
    let steps = sampler.timesteps(schedule.timesteps())?;
    let dim = model.config().data_dim;
    let mut chunks = Vec::new();
    for (k, start) in (0..count).step_by(SAMPLE_CHUNK).enumerate() {
        let rows = SAMPLE_CHUNK.min(count - start);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let mut x = normal(&[rows, dim], &mut rng);
        for (j, &t) in steps.iter().enumerate() {
            let eps = model.predict(&x, &vec![t; rows], hooks)?;
            observe(t, &x, &eps)?;
            x = match sampler {
                Sampler::Ddpm => {
                    let z = (t > 1).then(|| normal(&[rows, dim], &mut rng));
                    denoise_step(&schedule, &x, &eps, t, z.as_ref())?
                }
                Sampler::Ddim { eta, .. } => {
                    let t_prev = steps.get(j + 1).copied().unwrap_or(0);
                    let z = (eta > 0.0 && t_prev > 0).then(|| normal(&[rows, dim], &mut rng));
                    ddim_step(&schedule, &x, &eps, t, t_prev, eta, z.as_ref())?
                }
            };
            if !x.is_finite() {
                return Err(Error::Contract(format!("sampling produced non-finite values at t={t}")));
            }
        }
        chunks.push(x);
    }
    Tensor::concat(&chunks)
}

pub fn sample(
    model: &DenoiserGraph,
    hooks: &mut dyn ForwardHooks,
    count: usize,
    sampler: Sampler,
    seed: u64,
) -> Result<Tensor> {
    sample_with(model, hooks, count, sampler, seed, &mut |_, _, _| Ok(()))
}

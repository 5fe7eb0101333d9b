//! Noise injection into temporal or ordinary activations, and the sample
//! quality sweep over noise levels.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::metrics::{mmd2, spearman};
use crate::diffusion::model::{DenoiserGraph, ForwardHooks};
use crate::diffusion::sampler::{sample, Sampler};
use crate::error::{Error, Result};
use crate::maintenance::tib::{build_tib, non_tib_activation_sites};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Adds `λ · Δ` to every row, `Δ` drawn elementwise from a normal with the
/// row's own mean and variance.
pub fn inject_noise(x: &Tensor, lambda: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("noise level must be nonnegative, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(x.clone());
    }
    let width = x.shape().last().copied().unwrap_or(0).max(1);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(width) {
        let n = row.len() as f64;
        let mu = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let dist = Normal::new(mu, var.sqrt()).map_err(|e| Error::Contract(e.to_string()))?;
        for v in row.iter_mut() {
            *v += lambda * dist.sample(rng);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InjectionTarget {
    Temporal,
    NonTemporal,
}

struct Injector<'a> {
    lambda: f64,
    target: InjectionTarget,
    sites: &'a [String],
    rng: ChaCha8Rng,
}

impl ForwardHooks for Injector<'_> {
    fn activation(&mut self, tape: &mut Tape, site: &str, x: Var, _ts: &[usize]) -> Result<Var> {
        if self.target != InjectionTarget::NonTemporal || !self.sites.iter().any(|s| s == site) {
            return Ok(x);
        }
        let noisy = inject_noise(tape.value(x), self.lambda, &mut self.rng)?;
        Ok(tape.constant(noisy))
    }

    fn temporal_feature(&mut self, tape: &mut Tape, _block: usize, feat: Var, _batch: usize, _ts: &[usize]) -> Result<Var> {
        if self.target != InjectionTarget::Temporal {
            return Ok(feat);
        }
        // one draw per feature row; a shared timestep feature stays shared
        let noisy = inject_noise(tape.value(feat), self.lambda, &mut self.rng)?;
        Ok(tape.constant(noisy))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub samples: usize,
    /// Ordinary activation sites perturbed in the non-temporal sweep.
    pub sites: usize,
    pub sampler: Sampler,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.05, 0.1, 0.2, 0.5],
            samples: 1000,
            sites: 4,
            sampler: Sampler::Ddpm,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub target: InjectionTarget,
    pub lambda: f64,
    pub mmd2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Sites chosen for the non-temporal sweep.
    pub sites: Vec<String>,
    /// MMD² between two unperturbed sample sets.
    pub reference_mmd2: f64,
}

impl SweepTable {
    pub fn series(&self, target: InjectionTarget) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.target == target)
            .map(|r| (r.lambda, r.mmd2))
            .collect()
    }

    /// Rank correlation between noise level and MMD² for one target.
    pub fn spearman(&self, target: InjectionTarget) -> Result<f64> {
        let (l, m): (Vec<f64>, Vec<f64>) = self.series(target).into_iter().unzip();
        spearman(&l, &m)
    }
}

/// Samples the full-precision model with noise injected on every denoising
/// step and compares against reference samples drawn with another seed.
pub fn sensitivity_sweep(model: &DenoiserGraph, cfg: &SweepConfig) -> Result<SweepTable> {
    let reference = sample(model, &mut crate::diffusion::model::FullPrecision, cfg.samples, cfg.sampler, cfg.seed.wrapping_add(1))?;
    let tib = build_tib(model);
    let mut candidates = non_tib_activation_sites(model, &tib);
    let mut pick = ChaCha8Rng::seed_from_u64(cfg.seed);
    pick.set_stream(2);
    candidates.shuffle(&mut pick);
    candidates.truncate(cfg.sites);
    candidates.sort();

    let mut rows = Vec::new();
    let mut reference_mmd2 = f64::NAN;
    for target in [InjectionTarget::Temporal, InjectionTarget::NonTemporal] {
        for &lambda in &cfg.lambdas {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(3);
            let mut hooks = Injector {
                lambda,
                target,
                sites: &candidates,
                rng,
            };
            let x = sample(model, &mut hooks, cfg.samples, cfg.sampler, cfg.seed)?;
            let m = mmd2(&x, &reference)?;
            if lambda == 0.0 {
                reference_mmd2 = m;
            }
            rows.push(SweepRow { target, lambda, mmd2: m });
        }
    }
    Ok(SweepTable {
        rows,
        sites: candidates,
        reference_mmd2,
    })
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear β schedule with the derived α, ᾱ and fixed posterior σ.
///
/// Timesteps are 1-based: `beta(1)` is the first forward step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    timesteps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::Config(format!("need at least 2 timesteps, got {timesteps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta bounds must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("betas must lie in (0, 1), at least two".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])).sqrt()
            })
            .collect();
        Ok(Self {
            timesteps: beta.len(),
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.timesteps {
            return Err(Error::Index(format!("timestep {t} outside 1..={}", self.timesteps)));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.idx(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.idx(t)?])
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bar[self.idx(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigma[self.idx(t)?])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Closed-form forward noising `√ᾱ_t·x0 + √(1−ᾱ_t)·noise`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        x0.check_same(noise)?;
        let ab = self.alpha_bar(t)?;
        if t == 0 {
            return Err(Error::Index("timestep 0 has no forward sample".into()));
        }
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = x0
            .data()
            .iter()
            .zip(noise.data())
            .map(|(x, n)| a * x + b * n)
            .collect();
        Tensor::new(x0.shape().to_vec(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_products() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert!((s.alpha_bar(1).unwrap() - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2).unwrap() - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha_bar(1).unwrap(), s.alpha(1).unwrap());
        assert_eq!(s.sigma(1).unwrap(), 0.0);
    }

    #[test]
    fn long_schedule_matches_independent_product() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let mut prod = 1.0f64;
        for i in 0..100 {
            let b = 1e-4 + (0.02 - 1e-4) * (i as f64) / 99.0;
            prod *= 1.0 - b;
        }
        assert!((s.alpha_bar(100).unwrap() - prod).abs() < 1e-12);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn posterior_variance_identity() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.1).unwrap();
        for t in 2..=50 {
            let lhs = s.sigma(t).unwrap().powi(2);
            let rhs = s.beta(t).unwrap() * (1.0 - s.alpha_bar(t - 1).unwrap()) / (1.0 - s.alpha_bar(t).unwrap());
            assert!((lhs - rhs).abs() < 1e-15);
        }
    }

    #[test]
    fn bad_bounds_are_config_errors() {
        assert!(matches!(NoiseSchedule::linear(1, 0.1, 0.2), Err(Error::Config(_))));
        assert!(matches!(NoiseSchedule::linear(10, 0.0, 0.2), Err(Error::Config(_))));
        assert!(matches!(NoiseSchedule::linear(10, 0.3, 0.2), Err(Error::Config(_))));
        assert!(matches!(NoiseSchedule::linear(10, 0.1, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn q_sample_edge_cases() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.1).unwrap();
        let x0 = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let zero = Tensor::zeros(&[1, 2]);
        let out = s.q_sample(&x0, 3, &zero).unwrap();
        assert_eq!(out, x0.scale(s.alpha_bar(3).unwrap().sqrt()));
        assert!(matches!(s.q_sample(&x0, 11, &zero), Err(Error::Index(_))));
        assert!(matches!(s.q_sample(&x0, 0, &zero), Err(Error::Index(_))));
    }
}

//! Errors measured along a full-precision denoising trajectory.
//!
//! At every step the quantized model sees the same `x_t` as the
//! full-precision chain, so each measurement isolates the error of a single
//! quantized step.

use serde::{Deserialize, Serialize};

use super::metrics::sqnr;
use crate::diffusion::model::{DenoiserGraph, FullPrecision};
use crate::diffusion::sampler::{sample_with, Sampler};
use crate::error::Result;
use crate::maintenance::assemble::QuantizedDenoiser;
use crate::maintenance::hooks::CaptureBlocks;
use crate::tensor::{cosine, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    /// SQNR of the predicted noise over every step, in dB.
    pub sqnr_db: f64,
    /// Timesteps in visiting order.
    pub timesteps: Vec<usize>,
    /// Mean cosine similarity of block outputs, averaged over blocks and
    /// samples, one per visited timestep.
    pub e_nontemporal: Vec<f64>,
}

fn block_outputs(model: &DenoiserGraph, hooks: &mut dyn crate::diffusion::model::ForwardHooks, x: &Tensor, ts: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
    let mut cap = CaptureBlocks::new(hooks);
    let eps = model.predict(x, ts, &mut cap)?;
    Ok((eps, cap.outputs.into_values().collect()))
}

pub fn trajectory_report(
    model: &DenoiserGraph,
    quantized: &QuantizedDenoiser,
    count: usize,
    sampler: Sampler,
    seed: u64,
) -> Result<TrajectoryReport> {
    let mut refs = Vec::new();
    let mut preds = Vec::new();
    let mut timesteps = Vec::new();
    let mut sums: Vec<(f64, usize)> = Vec::new();
    let mut qhooks = quantized.hooks();
    sample_with(model, &mut FullPrecision, count, sampler, seed, &mut |t, x, eps| {
        let ts = vec![t; x.rows()];
        let (_, fp_blocks) = block_outputs(model, &mut FullPrecision, x, &ts)?;
        let (q_eps, q_blocks) = block_outputs(model, &mut qhooks, x, &ts)?;
        let mut total = 0.0;
        let mut n = 0;
        for (a, b) in fp_blocks.iter().zip(&q_blocks) {
            for r in 0..a.rows() {
                total += cosine(a.row(r), b.row(r));
                n += 1;
            }
        }
        // chunks revisit the same timesteps
        match timesteps.iter().position(|&s| s == t) {
            Some(k) => {
                sums[k].0 += total;
                sums[k].1 += n;
            }
            None => {
                timesteps.push(t);
                sums.push((total, n));
            }
        }
        refs.push(eps.clone());
        preds.push(q_eps);
        Ok(())
    })?;
    Ok(TrajectoryReport {
        sqnr_db: sqnr(&refs, &preds)?,
        timesteps,
        e_nontemporal: sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::ModelConfig;

    #[test]
    fn full_precision_against_itself() {
        let cfg = ModelConfig {
            hidden: 8,
            time_dim: 4,
            blocks: 2,
            timesteps: 6,
            ..ModelConfig::default()
        };
        let m = DenoiserGraph::new(cfg, 0).unwrap();
        let q = QuantizedDenoiser::full_precision(&m).unwrap();
        let r = trajectory_report(&m, &q, 4, Sampler::Ddpm, 1).unwrap();
        assert_eq!(r.sqnr_db, f64::INFINITY);
        assert_eq!(r.timesteps, vec![6, 5, 4, 3, 2, 1]);
        assert!(r.e_nontemporal.iter().all(|&e| e == 1.0));
    }
}

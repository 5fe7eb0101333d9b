//! Calibration data and initial quantizer parameters.

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tib::TemporalInformationBlock;
use crate::diffusion::model::{weight_name, DenoiserGraph, ForwardHooks, FullPrecision};
use crate::diffusion::sampler::{sample_with, Sampler};
use crate::error::{Error, Result};
use crate::quant::{estimate_range, ActParams, Granularity, QuantParamSet, RangeMethod};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Noised inputs `x_t` with their timesteps, taken from full-precision
/// sampling trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibSet {
    pub xt: Tensor,
    pub ts: Vec<usize>,
}

impl CalibSet {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    /// `count` rows chosen without replacement, or everything when
    /// `count >= len`.
    pub fn subset(&self, count: usize, seed: u64) -> CalibSet {
        if count >= self.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample_indices(&mut rng, self.len(), count).into_vec();
        idx.sort_unstable();
        CalibSet {
            xt: self.xt.select_rows(&idx),
            ts: idx.iter().map(|&i| self.ts[i]).collect(),
        }
    }
}

/// Runs `trajectories` full-precision ancestral chains and keeps `x_t` at
/// `t = T, T − stride, …`.
pub fn generate_calibration(model: &DenoiserGraph, trajectories: usize, stride: usize, seed: u64) -> Result<CalibSet> {
    if stride == 0 || trajectories == 0 {
        return Err(Error::Config("calibration needs trajectories >= 1 and stride >= 1".into()));
    }
    let total = model.config().timesteps;
    let mut parts = Vec::new();
    let mut ts = Vec::new();
    sample_with(model, &mut FullPrecision, trajectories, Sampler::Ddpm, seed, &mut |t, x, _| {
        if (total - t) % stride == 0 {
            parts.push(x.clone());
            ts.extend(std::iter::repeat(t).take(x.rows()));
        }
        Ok(())
    })?;
    Ok(CalibSet {
        xt: Tensor::concat(&parts)?,
        ts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub w_bits: u32,
    pub a_bits: u32,
    pub weight_method: RangeMethod,
    pub act_method: RangeMethod,
    pub weight_symmetric: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            w_bits: 4,
            a_bits: 8,
            weight_method: RangeMethod::MinMax,
            act_method: RangeMethod::MinMax,
            weight_symmetric: false,
        }
    }
}

/// Records the input of every activation site.
#[derive(Default)]
struct Recorder {
    seen: BTreeMap<String, Vec<Tensor>>,
}

impl ForwardHooks for Recorder {
    fn activation(&mut self, tape: &mut Tape, site: &str, x: Var, _ts: &[usize]) -> Result<Var> {
        self.seen.entry(site.to_string()).or_default().push(tape.value(x).clone());
        Ok(x)
    }
}

/// Per-channel weight parameters (output axis) for `layers`.
pub fn init_weights(model: &DenoiserGraph, layers: &[String], cfg: &InitConfig) -> Result<QuantParamSet> {
    let mut qset = QuantParamSet::new();
    for layer in layers {
        let w = model.param(&weight_name(layer))?;
        let p = estimate_range(
            &[w.clone()],
            cfg.weight_method,
            cfg.w_bits,
            Granularity::PerChannel { axis: 1 },
            cfg.weight_symmetric,
        )?;
        qset.weights.insert(layer.clone(), p);
    }
    Ok(qset)
}

/// Static per-tensor activation parameters. Sites outside the time branch
/// are calibrated on the full-precision activations of `calib`; sites inside
/// it on their values over every timestep.
pub fn init_activations(
    model: &DenoiserGraph,
    tib: &TemporalInformationBlock,
    calib: &CalibSet,
    cfg: &InitConfig,
    include_tib: bool,
) -> Result<BTreeMap<String, ActParams>> {
    let mut rec = Recorder::default();
    model.predict(&calib.xt, &calib.ts, &mut rec)?;
    let mut tib_rec = Recorder::default();
    let all_t: Vec<usize> = (1..=model.config().timesteps).collect();
    let mut tape = Tape::new();
    let h = model.time_embedding(&mut tape, &all_t, &mut tib_rec)?;
    for i in 0..model.config().blocks {
        model.block_embedding(&mut tape, i, h, &all_t, &mut tib_rec)?;
    }

    let mut out = BTreeMap::new();
    for site in model.activation_sites() {
        let in_tib = tib.contains_site(&site);
        if in_tib && !include_tib {
            continue;
        }
        let source = if in_tib { &tib_rec.seen } else { &rec.seen };
        let samples = source
            .get(&site)
            .ok_or_else(|| Error::Contract(format!("activation site {site} never observed")))?;
        let p = estimate_range(samples, cfg.act_method, cfg.a_bits, Granularity::PerTensor, false)?;
        out.insert(site, ActParams::Static(p));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::ModelConfig;
    use crate::maintenance::tib::build_tib;

    fn small() -> DenoiserGraph {
        let cfg = ModelConfig {
            hidden: 8,
            time_dim: 4,
            blocks: 2,
            timesteps: 12,
            ..ModelConfig::default()
        };
        DenoiserGraph::new(cfg, 1).unwrap()
    }

    #[test]
    fn calibration_keeps_every_fourth_step() {
        let m = small();
        let c = generate_calibration(&m, 5, 4, 0).unwrap();
        assert_eq!(c.len(), 5 * 3);
        let mut distinct: Vec<usize> = c.ts.clone();
        distinct.dedup();
        assert_eq!(distinct, vec![12, 8, 4]);
        let s = c.subset(7, 1);
        assert_eq!(s.len(), 7);
        assert_eq!(s, c.subset(7, 1));
    }

    #[test]
    fn activations_cover_every_site() {
        let m = small();
        let tib = build_tib(&m);
        let c = generate_calibration(&m, 4, 4, 0).unwrap();
        let acts = init_activations(&m, &tib, &c, &InitConfig::default(), true).unwrap();
        assert_eq!(acts.len(), m.activation_sites().len());
        let without = init_activations(&m, &tib, &c, &InitConfig::default(), false).unwrap();
        assert_eq!(without.len(), m.activation_sites().len() - tib.activation_sites.len());
    }
}

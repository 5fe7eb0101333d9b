//! Assembling a runnable quantized denoiser from its parts.

use super::cache::TemporalFeatureCache;
use super::hooks::{QuantHooks, QuantState, StoredFeatures};
use super::select::{Choice, SelectionMask};
use super::tib::{build_tib, non_tib_activation_sites, non_tib_layers};
use crate::diffusion::features::{capture_with, FeatureTable};
use crate::diffusion::model::DenoiserGraph;
use crate::diffusion::sampler::{sample, sample_with, Sampler};
use crate::error::{Error, Result};
use crate::quant::QuantParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct QuantizedDenoiser {
    model: DenoiserGraph,
    qset: QuantParamSet,
    state: QuantState,
    stored: Option<StoredFeatures>,
    mask: Option<SelectionMask>,
}

/// Checks that every quantizer the chosen path needs is present and builds
/// the model. Without a mask, a cache serves every `(t, i)`.
pub fn assemble_quantized_model(
    model: &DenoiserGraph,
    qset: &QuantParamSet,
    cache: Option<&TemporalFeatureCache>,
    mask: Option<&SelectionMask>,
) -> Result<QuantizedDenoiser> {
    let cfg = model.config();
    qset.validate(cfg.timesteps)?;
    if mask.is_some() && cache.is_none() && mask.is_some_and(|m| m.any(Choice::Cache)) {
        return Err(Error::Assembly(vec!["temporal feature cache".into()]));
    }
    if let Some(c) = cache {
        if c.timesteps() != cfg.timesteps || c.blocks() != cfg.blocks || c.fp.width() != cfg.hidden {
            return Err(Error::Shape(format!(
                "cache covers {} timesteps x {} blocks of width {}, model needs {} x {} of width {}",
                c.timesteps(),
                c.blocks(),
                c.fp.width(),
                cfg.timesteps,
                cfg.blocks,
                cfg.hidden
            )));
        }
    }
    if let Some(m) = mask {
        if m.timesteps() != cfg.timesteps || m.blocks() != cfg.blocks {
            return Err(Error::Shape("mask does not match the model".into()));
        }
    }
    let needs_tib = match (cache, mask) {
        (None, _) => true,
        (Some(_), None) => false,
        (Some(_), Some(m)) => m.any(Choice::Tib),
    };
    let tib = build_tib(model);
    let mut missing = Vec::new();
    let mut layers = non_tib_layers(model, &tib);
    let mut sites = non_tib_activation_sites(model, &tib);
    if needs_tib {
        layers.extend(tib.weight_sites.iter().cloned());
        sites.extend(tib.activation_sites.iter().cloned());
    }
    missing.extend(layers.into_iter().filter(|l| !qset.weights.contains_key(l)).map(|l| format!("weight {l}")));
    missing.extend(sites.into_iter().filter(|s| !qset.activations.contains_key(s)).map(|s| format!("activation {s}")));
    if !missing.is_empty() {
        return Err(Error::Assembly(missing));
    }
    let stored = cache.map(|c| c.stored_features(mask)).transpose()?;
    Ok(QuantizedDenoiser {
        model: model.clone(),
        qset: qset.clone(),
        state: QuantState::new(model, qset)?,
        stored,
        mask: mask.cloned(),
    })
}

impl QuantizedDenoiser {
    /// The unquantized model behind the same interface.
    pub fn full_precision(model: &DenoiserGraph) -> Result<Self> {
        Ok(Self {
            model: model.clone(),
            qset: QuantParamSet::new(),
            state: QuantState::new(model, &QuantParamSet::new())?,
            stored: None,
            mask: None,
        })
    }

    pub fn model(&self) -> &DenoiserGraph {
        &self.model
    }

    pub fn qset(&self) -> &QuantParamSet {
        &self.qset
    }

    pub fn mask(&self) -> Option<&SelectionMask> {
        self.mask.as_ref()
    }

    pub fn hooks(&self) -> QuantHooks<'_> {
        let h = self.state.hooks();
        match &self.stored {
            Some(s) => h.with_stored(s),
            None => h,
        }
    }

    pub fn predict(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        self.model.predict(x, ts, &mut self.hooks())
    }

    pub fn sample(&self, count: usize, sampler: Sampler, seed: u64) -> Result<Tensor> {
        sample(&self.model, &mut self.hooks(), count, sampler, seed)
    }

    pub fn sample_with(
        &self,
        count: usize,
        sampler: Sampler,
        seed: u64,
        observe: &mut dyn FnMut(usize, &Tensor, &Tensor) -> Result<()>,
    ) -> Result<Tensor> {
        sample_with(&self.model, &mut self.hooks(), count, sampler, seed, observe)
    }

    /// The temporal feature each block receives at each timestep.
    pub fn temporal_features(&self) -> Result<FeatureTable> {
        capture_with(&self.model, &mut self.hooks())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::features::capture_temporal_features;
    use crate::diffusion::model::ModelConfig;
    use crate::maintenance::cache::cache_maintain;
    use crate::maintenance::calib::{init_weights, InitConfig};
    use crate::quant::{ActParams, LsqConfig, QuantParams};

    fn small() -> DenoiserGraph {
        let cfg = ModelConfig {
            hidden: 8,
            time_dim: 4,
            blocks: 2,
            timesteps: 6,
            ..ModelConfig::default()
        };
        DenoiserGraph::new(cfg, 3).unwrap()
    }

    fn non_tib_qset(m: &DenoiserGraph) -> QuantParamSet {
        let tib = build_tib(m);
        let mut q = init_weights(m, &non_tib_layers(m, &tib), &InitConfig::default()).unwrap();
        for s in non_tib_activation_sites(m, &tib) {
            q.activations.insert(s, ActParams::Static(QuantParams::per_tensor(0.05, 128, 8)));
        }
        q
    }

    #[test]
    fn missing_sites_are_listed() {
        let m = small();
        let q = non_tib_qset(&m);
        let Err(Error::Assembly(missing)) = assemble_quantized_model(&m, &q, None, None) else {
            panic!("expected an assembly error");
        };
        assert!(missing.iter().any(|s| s.contains("time_embed/lin1")));
        assert!(missing.iter().any(|s| s.contains("block1/emb/out")));
        let mut partial = q.clone();
        partial.weights.remove("stem");
        let Err(Error::Assembly(more)) = assemble_quantized_model(&m, &partial, None, None) else {
            panic!("expected an assembly error");
        };
        assert_eq!(more.len(), missing.len() + 1);
        assert!(more.contains(&"weight stem".to_string()));
    }

    #[test]
    fn all_cache_skips_time_branch() {
        let m = small();
        let cache = cache_maintain(&capture_temporal_features(&m).unwrap(), 8, &LsqConfig { iters: 5, lr: 0.3 }).unwrap();
        let qm = assemble_quantized_model(&m, &non_tib_qset(&m), Some(&cache), None).unwrap();
        qm.model().reset_temporal_calls();
        qm.sample(5, Sampler::Ddpm, 0).unwrap();
        let feats = qm.temporal_features().unwrap();
        assert_eq!(qm.model().temporal_calls(), 0);
        assert_eq!(feats.get(4, 1).unwrap(), cache.dequantized(4, 1).unwrap().data());
    }
}

//! End-to-end quantization strategies.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::assemble::{assemble_quantized_model, QuantizedDenoiser};
use super::cache::{cache_maintain, TemporalFeatureCache};
use super::calib::{init_activations, init_weights, CalibSet, InitConfig};
use super::fsc::{fsc_calibrate, quantized_features};
use super::reconstruct::{block_reconstruct, tiar_reconstruct, ReconConfig, ReconReport};
use super::select::{loss_table, select_maintenance, LossKind, SelectionMask};
use super::tib::{build_tib, non_tib_layers};
use crate::diffusion::features::capture_temporal_features;
use crate::diffusion::model::DenoiserGraph;
use crate::error::{Error, Result};
use crate::quant::{LsqConfig, QuantParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Block-wise reconstruction with each embedding layer in its block.
    Baseline,
    /// Block-wise reconstruction with the time branch left at its initial
    /// quantizers.
    Freeze,
    /// Time-branch reconstruction plus per-timestep activation calibration.
    Tm,
    /// Cached quantized features in place of the time branch.
    Cm,
    /// Per-`(t, i)` choice between the two.
    Ds,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::Baseline, Strategy::Freeze, Strategy::Tm, Strategy::Cm, Strategy::Ds];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Freeze => "freeze",
            Strategy::Tm => "tm",
            Strategy::Cm => "cm",
            Strategy::Ds => "ds",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}` (expected baseline, freeze, tm, cm, ds)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantizeConfig {
    pub init: InitConfig,
    pub cache_bits: u32,
    pub lsq: LsqConfig,
    pub tiar: ReconConfig,
    pub recon: ReconConfig,
    /// Calibration rows used by block reconstruction.
    pub recon_rows: usize,
    pub selection_loss: LossKind,
    pub seed: u64,
}

impl Default for QuantizeConfig {
    fn default() -> Self {
        Self {
            init: InitConfig::default(),
            cache_bits: 8,
            lsq: LsqConfig::default(),
            tiar: ReconConfig { iters: 300, lr: 0.01 },
            recon: ReconConfig { iters: 100, lr: 0.01 },
            recon_rows: 1024,
            selection_loss: LossKind::Mse,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub tiar: Option<ReconReport>,
    pub blocks: Vec<ReconReport>,
}

/// Everything needed to rebuild a quantized model from its checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantBundle {
    pub strategy: Strategy,
    pub qset: QuantParamSet,
    pub cache: Option<TemporalFeatureCache>,
    pub mask: Option<SelectionMask>,
    pub report: StrategyReport,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleMeta {
    strategy: Strategy,
    report: StrategyReport,
    has_cache: bool,
    has_mask: bool,
}

pub const QSET_FILE: &str = "qparams.json";
pub const CACHE_FILE: &str = "cache.json";
pub const MASK_FILE: &str = "mask.json";
const META_FILE: &str = "bundle.json";

impl QuantBundle {
    pub fn assemble(&self, model: &DenoiserGraph) -> Result<QuantizedDenoiser> {
        assemble_quantized_model(model, &self.qset, self.cache.as_ref(), self.mask.as_ref())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.qset.save(&dir.join(QSET_FILE))?;
        if let Some(c) = &self.cache {
            c.save(&dir.join(CACHE_FILE))?;
        }
        if let Some(m) = &self.mask {
            m.save(&dir.join(MASK_FILE))?;
        }
        let meta = BundleMeta {
            strategy: self.strategy,
            report: self.report.clone(),
            has_cache: self.cache.is_some(),
            has_mask: self.mask.is_some(),
        };
        let path = dir.join(META_FILE);
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::format(&path, e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: BundleMeta = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
        Ok(Self {
            strategy: meta.strategy,
            qset: QuantParamSet::load(&dir.join(QSET_FILE))?,
            cache: meta
                .has_cache
                .then(|| TemporalFeatureCache::load(&dir.join(CACHE_FILE)))
                .transpose()?,
            mask: meta.has_mask.then(|| SelectionMask::load(&dir.join(MASK_FILE))).transpose()?,
            report: meta.report,
        })
    }
}

/// Initial weights for `layers` and static activation ranges.
fn initial_qset(
    model: &DenoiserGraph,
    calib: &CalibSet,
    cfg: &QuantizeConfig,
    layers: &[String],
    include_tib: bool,
) -> Result<QuantParamSet> {
    let tib = build_tib(model);
    let mut q = init_weights(model, layers, &cfg.init)?;
    q.activations = init_activations(model, &tib, calib, &cfg.init, include_tib)?;
    Ok(q)
}

pub fn quantize_model(
    model: &DenoiserGraph,
    calib: &CalibSet,
    strategy: Strategy,
    cfg: &QuantizeConfig,
) -> Result<QuantBundle> {
    if calib.is_empty() {
        return Err(Error::Config("calibration set is empty".into()));
    }
    let tib = build_tib(model);
    let recon_set = calib.subset(cfg.recon_rows, cfg.seed);
    let mut report = StrategyReport::default();
    let mut cache = None;
    let mut mask = None;

    let tm_qset = |report: &mut StrategyReport| -> Result<QuantParamSet> {
        let q = initial_qset(model, calib, cfg, &model.layers(), true)?;
        let (q, r) = tiar_reconstruct(model, &tib, &q, &cfg.tiar)?;
        report.tiar = Some(r);
        fsc_calibrate(model, &tib, &q, cfg.init.a_bits)
    };

    let qset = match strategy {
        Strategy::Baseline | Strategy::Freeze => {
            let q = initial_qset(model, calib, cfg, &model.layers(), true)?;
            let (q, blocks) = block_reconstruct(model, &q, None, &recon_set, &cfg.recon, strategy == Strategy::Baseline)?;
            report.blocks = blocks;
            q
        }
        Strategy::Tm => {
            let q = tm_qset(&mut report)?;
            let (q, blocks) = block_reconstruct(model, &q, None, &recon_set, &cfg.recon, false)?;
            report.blocks = blocks;
            q
        }
        Strategy::Cm => {
            let c = cache_maintain(&capture_temporal_features(model)?, cfg.cache_bits, &cfg.lsq)?;
            let stored = c.stored_features(None)?;
            let q = initial_qset(model, calib, cfg, &non_tib_layers(model, &tib), false)?;
            let (q, blocks) = block_reconstruct(model, &q, Some(&stored), &recon_set, &cfg.recon, false)?;
            report.blocks = blocks;
            cache = Some(c);
            q
        }
        Strategy::Ds => {
            let fp = capture_temporal_features(model)?;
            let c = cache_maintain(&fp, cfg.cache_bits, &cfg.lsq)?;
            let q = tm_qset(&mut report)?;
            let loss_tm = loss_table(&fp, &quantized_features(model, &q)?, cfg.selection_loss)?;
            let loss_cm = loss_table(&fp, &c.table()?, cfg.selection_loss)?;
            let m = select_maintenance(&loss_tm, &loss_cm)?;
            let stored = c.stored_features(Some(&m))?;
            let (q, blocks) = block_reconstruct(model, &q, Some(&stored), &recon_set, &cfg.recon, false)?;
            report.blocks = blocks;
            cache = Some(c);
            mask = Some(m);
            q
        }
    };
    Ok(QuantBundle {
        strategy,
        qset,
        cache,
        mask,
        report,
    })
}

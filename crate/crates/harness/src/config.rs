//! Experiment configuration: a JSON document, overridable from the command
//! line, validated before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use timeq_core::analysis::SweepConfig;
use timeq_core::diffusion::{DatasetName, ModelConfig, Sampler, TrainConfig};
use timeq_core::maintenance::{InitConfig, LossKind, QuantizeConfig, ReconConfig, Strategy};
use timeq_core::quant::{LsqConfig, RangeMethod};

use crate::error::{HarnessError, Result};

/// Widest code range the quantizers accept.
pub const MAX_BITS: u32 = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub heldout: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            lr: t.lr,
            batch: t.batch,
            heldout: t.heldout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibSection {
    pub trajectories: usize,
    /// Keep every `stride`-th timestep of each trajectory.
    pub stride: usize,
}

impl Default for CalibSection {
    fn default() -> Self {
        Self {
            trajectories: 256,
            stride: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub tiar: ReconConfig,
    pub recon: ReconConfig,
    pub lsq: LsqConfig,
    pub recon_rows: usize,
    pub selection_loss: LossKind,
}

impl Default for OptimSection {
    fn default() -> Self {
        let q = QuantizeConfig::default();
        Self {
            tiar: q.tiar,
            recon: q.recon,
            lsq: q.lsq,
            recon_rows: q.recon_rows,
            selection_loss: q.selection_loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub samples: usize,
    /// Chains followed when measuring SQNR and block-output similarity.
    pub trajectory_samples: usize,
    pub sampler: Sampler,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            samples: 2000,
            trajectory_samples: 256,
            sampler: Sampler::Ddpm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivitySection {
    pub lambdas: Vec<f64>,
    pub samples: usize,
    pub sites: usize,
}

impl Default for SensitivitySection {
    fn default() -> Self {
        let s = SweepConfig::default();
        Self {
            lambdas: s.lambdas,
            samples: s.samples,
            sites: s.sites,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Required; left optional here so validation can name it.
    pub dataset: Option<DatasetName>,
    pub dataset_size: usize,
    pub dataset_seed: u64,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub strategy: Strategy,
    pub w_bits: u32,
    pub a_bits: u32,
    pub cache_bits: u32,
    pub weight_method: RangeMethod,
    pub act_method: RangeMethod,
    pub weight_symmetric: bool,
    pub calibration: CalibSection,
    pub optim: OptimSection,
    pub eval: EvalSection,
    pub sensitivity: SensitivitySection,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let init = InitConfig::default();
        Self {
            dataset: None,
            dataset_size: 10_000,
            dataset_seed: 0,
            seed: 0,
            model: ModelConfig::default(),
            train: TrainSection::default(),
            strategy: Strategy::Ds,
            w_bits: init.w_bits,
            a_bits: init.a_bits,
            cache_bits: 8,
            weight_method: init.weight_method,
            act_method: init.act_method,
            weight_symmetric: init.weight_symmetric,
            calibration: CalibSection::default(),
            optim: OptimSection::default(),
            eval: EvalSection::default(),
            sensitivity: SensitivitySection::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

/// Overlays `src` on `dst`, descending into objects. Tagged values (those
/// with a `kind`) replace wholesale.
fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() && v.get("kind").is_none() => merge(slot, v),
                    _ => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

/// Sets `path` (dot separated) inside `root`, creating objects on the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(format!("bad key `{path}`")));
    }
    for key in &keys[..keys.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| config_err(format!("`{path}`: `{key}` is not inside an object")))?;
        cur = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| config_err(format!("`{path}` does not name an object field")))?;
    let key = keys[keys.len() - 1].to_string();
    match obj.get_mut(&key) {
        Some(slot) => merge(slot, value),
        None => {
            obj.insert(key, value);
        }
    }
    Ok(())
}

/// Parses a `key=value` override. The value is read as JSON when it parses,
/// otherwise as a plain string.
pub fn parse_override(arg: &str) -> Result<(String, Value)> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{arg}` is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl ExperimentConfig {
    /// Reads `path` (if any), applies `overrides` in order, then validates.
    pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut root = serde_json::to_value(Self::default()).expect("defaults serialize");
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| HarnessError::io(p, e))?;
            let file: Value =
                serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            if !file.is_object() {
                return Err(config_err(format!("{}: config must be a JSON object", p.display())));
            }
            merge(&mut root, file);
        }
        for (k, v) in overrides {
            set_path(&mut root, k, v.clone())?;
        }
        let cfg: Self = serde_json::from_value(root).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.is_none() {
            return Err(config_err("missing required field `dataset`"));
        }
        for (name, b) in [("w_bits", self.w_bits), ("a_bits", self.a_bits), ("cache_bits", self.cache_bits)] {
            if !(2..=MAX_BITS).contains(&b) {
                return Err(config_err(format!("`{name}` must be in 2..={MAX_BITS}, got {b}")));
            }
        }
        self.model.validate()?;
        if self.dataset_size == 0 {
            return Err(config_err("`dataset_size` must be positive"));
        }
        if self.calibration.trajectories == 0 || self.calibration.stride == 0 {
            return Err(config_err("`calibration.trajectories` and `calibration.stride` must be positive"));
        }
        if self.train.steps == 0 || self.train.batch == 0 || !(self.train.lr > 0.0) {
            return Err(config_err("`train` needs steps >= 1, batch >= 1 and lr > 0"));
        }
        if self.eval.samples < 2 || self.sensitivity.samples < 2 {
            return Err(config_err("`eval.samples` and `sensitivity.samples` must be at least 2"));
        }
        if self.eval.trajectory_samples == 0 {
            return Err(config_err("`eval.trajectory_samples` must be positive"));
        }
        self.eval.sampler.timesteps(self.model.timesteps)?;
        if self.sensitivity.lambdas.is_empty() || self.sensitivity.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(config_err("`sensitivity.lambdas` must be non-empty and non-negative"));
        }
        if self.optim.recon_rows == 0 {
            return Err(config_err("`optim.recon_rows` must be positive"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(config_err("`output_dir` must not be empty"));
        }
        Ok(())
    }

    pub fn dataset(&self) -> DatasetName {
        self.dataset.expect("validated")
    }

    /// SHA-256 over the canonical JSON form, leaving out where results go.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        // serde_json maps are sorted, so this text is canonical
        let text = serde_json::to_string(&v).expect("value serializes");
        format!("{:x}", Sha256::digest(text.as_bytes()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            lr: self.train.lr,
            batch: self.train.batch,
            seed: self.seed,
            heldout: self.train.heldout,
        }
    }

    pub fn quantize_config(&self) -> QuantizeConfig {
        QuantizeConfig {
            init: InitConfig {
                w_bits: self.w_bits,
                a_bits: self.a_bits,
                weight_method: self.weight_method,
                act_method: self.act_method,
                weight_symmetric: self.weight_symmetric,
            },
            cache_bits: self.cache_bits,
            lsq: self.optim.lsq,
            tiar: self.optim.tiar,
            recon: self.optim.recon,
            recon_rows: self.optim.recon_rows,
            selection_loss: self.optim.selection_loss,
            seed: self.seed,
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            lambdas: self.sensitivity.lambdas.clone(),
            samples: self.sensitivity.samples,
            sites: self.sensitivity.sites,
            sampler: self.eval.sampler,
            seed: seeds::sensitivity(self.seed),
        }
    }
}

/// Seeds of the individual pipeline stages, all derived from the global
/// seed so no two stages share a random stream.
pub mod seeds {
    pub fn calibration(seed: u64) -> u64 {
        seed.wrapping_add(1_000)
    }

    pub fn eval_samples(seed: u64) -> u64 {
        seed.wrapping_add(2_000)
    }

    pub fn trajectory(seed: u64) -> u64 {
        seed.wrapping_add(3_000)
    }

    pub fn sensitivity(seed: u64) -> u64 {
        seed.wrapping_add(4_000)
    }

    /// Fresh data draw used as the MMD reference.
    pub fn reference_data(dataset_seed: u64) -> u64 {
        dataset_seed.wrapping_add(5_000)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with(over: &[(&str, &str)]) -> Result<ExperimentConfig> {
        let o: Vec<_> = over.iter().map(|(k, v)| parse_override(&format!("{k}={v}")).unwrap()).collect();
        ExperimentConfig::load(None, &o)
    }

    #[test]
    fn dataset_is_required() {
        let err = with(&[]).unwrap_err();
        assert!(err.to_string().contains("dataset"));
        assert_eq!(err.exit_code(), 2);
        assert!(with(&[("dataset", "swiss-roll")]).is_ok());
    }

    #[test]
    fn bits_below_two_rejected() {
        for key in ["w_bits", "a_bits", "cache_bits"] {
            let err = with(&[("dataset", "swiss-roll"), (key, "1")]).unwrap_err();
            assert!(err.to_string().contains(key));
        }
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(with(&[("dataset", "swiss-roll"), ("w_bit", "4")]).is_err());
        assert!(with(&[("dataset", "swiss-roll"), ("train.step", "4")]).is_err());
    }

    #[test]
    fn nested_override_and_hash() {
        let a = with(&[("dataset", "swiss-roll"), ("train.steps", "10")]).unwrap();
        assert_eq!(a.train.steps, 10);
        let b = with(&[("dataset", "swiss-roll"), ("train.steps", "10"), ("output_dir", "elsewhere")]).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = with(&[("dataset", "swiss-roll"), ("train.steps", "11")]).unwrap();
        assert_ne!(a.hash(), c.hash());
        let e = with(&[("dataset", "swiss-roll"), ("train.steps", "10"), ("optim.tiar", r#"{"iters":5}"#)]).unwrap();
        assert_eq!(e.optim.tiar.iters, 5);
        assert_eq!(e.optim.tiar.lr, a.optim.tiar.lr);
        // spelling a default out changes nothing
        let d = with(&[("dataset", "swiss-roll"), ("train.steps", "10"), ("w_bits", "4")]).unwrap();
        assert_eq!(a.hash(), d.hash());
    }

    #[test]
    fn sampler_override() {
        let c = with(&[("dataset", "swiss-roll"), ("eval.sampler", r#"{"kind":"ddim","steps":10,"eta":0.5}"#)]).unwrap();
        assert_eq!(c.eval.sampler, Sampler::Ddim { steps: 10, eta: 0.5 });
        assert!(with(&[("dataset", "swiss-roll"), ("eval.sampler", r#"{"kind":"ddim","steps":0,"eta":0}"#)]).is_err());
    }
}

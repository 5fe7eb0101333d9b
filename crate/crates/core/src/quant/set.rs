//! Named collections of quantizer parameters and their JSON form.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::QuantParams;
use crate::error::{Error, Result};

/// Activation parameters: one static set, or one set per timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ActParams {
    Static(QuantParams),
    PerTimestep(Vec<QuantParams>),
}

impl ActParams {
    /// Parameters in force at timestep `t` (1-based).
    pub fn at(&self, t: usize) -> Result<&QuantParams> {
        match self {
            ActParams::Static(p) => Ok(p),
            ActParams::PerTimestep(table) => table
                .get(t.wrapping_sub(1))
                .ok_or_else(|| Error::Index(format!("timestep {t} outside table of {}", table.len()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QuantParamSet {
    pub weights: BTreeMap<String, QuantParams>,
    pub activations: BTreeMap<String, ActParams>,
}

impl QuantParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Checks every table against the timestep count and every entry for
    /// validity.
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        for p in self.weights.values() {
            p.validate()?;
        }
        for (site, a) in &self.activations {
            match a {
                ActParams::Static(p) => p.validate()?,
                ActParams::PerTimestep(table) => {
                    if table.len() != timesteps {
                        return Err(Error::Contract(format!(
                            "site {site}: per-timestep table has {} entries, expected {timesteps}",
                            table.len()
                        )));
                    }
                    for p in table {
                        p.validate()?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Contract(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("<quant params>", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::params::Granularity;

    #[test]
    fn json_round_trip_is_exact() {
        let mut set = QuantParamSet::new();
        set.weights.insert(
            "block0/lin1".into(),
            QuantParams {
                scale: vec![0.1 + 0.2, 1.0 / 3.0],
                zero: vec![7, 8],
                bits: 4,
                granularity: Granularity::PerChannel { axis: 1 },
            },
        );
        set.activations.insert(
            "time_embed/lin1/in".into(),
            ActParams::PerTimestep(vec![QuantParams::per_tensor(std::f64::consts::PI, 3, 8); 3]),
        );
        set.activations
            .insert("head/in".into(), ActParams::Static(QuantParams::per_tensor(1e-8, 0, 8)));
        let back = QuantParamSet::from_json(&set.to_json().unwrap()).unwrap();
        assert_eq!(back, set);
        set.validate(3).unwrap();
        assert!(set.validate(4).is_err());
    }

    #[test]
    fn timestep_lookup_is_one_based() {
        let table = ActParams::PerTimestep(vec![
            QuantParams::per_tensor(1.0, 0, 8),
            QuantParams::per_tensor(2.0, 0, 8),
        ]);
        assert_eq!(table.at(2).unwrap().scale, vec![2.0]);
        assert!(table.at(0).is_err());
        assert!(table.at(3).is_err());
    }
}

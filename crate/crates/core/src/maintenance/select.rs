//! Choosing, per timestep and block, between the quantized time branch and
//! the cached feature.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::diffusion::features::FeatureTable;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Tib,
    Cache,
}

/// Distance between a full-precision and a quantized feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mse,
    /// `KL(softmax(fp) ‖ softmax(q))`.
    Kl,
    /// Cross-entropy of `softmax(q)` under `softmax(fp)`.
    Ce,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "mse",
            LossKind::Kl => "kl",
            LossKind::Ce => "ce",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "kl" => Ok(LossKind::Kl),
            "ce" => Ok(LossKind::Ce),
            other => Err(Error::Config(format!("unknown selection loss `{other}` (expected mse, kl, ce)"))),
        }
    }
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

pub fn feature_loss(fp: &[f64], q: &[f64], kind: LossKind) -> Result<f64> {
    if fp.len() != q.len() || fp.is_empty() {
        return Err(Error::Shape(format!("feature lengths {} and {}", fp.len(), q.len())));
    }
    Ok(match kind {
        LossKind::Mse => fp.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / fp.len() as f64,
        LossKind::Kl | LossKind::Ce => {
            let lp = log_softmax(fp);
            let lq = log_softmax(q);
            let ce: f64 = lp.iter().zip(&lq).map(|(a, b)| -a.exp() * b).sum();
            if kind == LossKind::Ce {
                ce
            } else {
                let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
                kl.max(0.0)
            }
        }
    })
}

/// Per-`(t, i)` loss table `[t − 1][i]`.
pub fn loss_table(fp: &FeatureTable, q: &FeatureTable, kind: LossKind) -> Result<Vec<Vec<f64>>> {
    if fp.timesteps() != q.timesteps() || fp.blocks() != q.blocks() {
        return Err(Error::Shape("feature tables differ in shape".into()));
    }
    (1..=fp.timesteps())
        .map(|t| {
            (0..fp.blocks())
                .map(|i| feature_loss(fp.get(t, i)?, q.get(t, i)?, kind))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskCell {
    #[serde(serialize_with = "ser_ratio", deserialize_with = "de_ratio")]
    pub tau: f64,
    pub choice: Choice,
    pub loss_tm: f64,
    pub loss_cm: f64,
}

fn ser_ratio<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_ratio<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Ratio {
        Num(f64),
        Text(String),
    }
    match Ratio::deserialize(d)? {
        Ratio::Num(v) => Ok(v),
        Ratio::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Ratio::Text(t) => Err(serde::de::Error::custom(format!("bad ratio `{t}`"))),
    }
}

/// `cells[t − 1][i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMask {
    pub cells: Vec<Vec<MaskCell>>,
}

impl SelectionMask {
    pub fn uniform(timesteps: usize, blocks: usize, choice: Choice) -> Self {
        let cell = MaskCell {
            tau: f64::NAN,
            choice,
            loss_tm: f64::NAN,
            loss_cm: f64::NAN,
        };
        Self {
            cells: vec![vec![cell; blocks]; timesteps],
        }
    }

    pub fn timesteps(&self) -> usize {
        self.cells.len()
    }

    pub fn blocks(&self) -> usize {
        self.cells.first().map_or(0, Vec::len)
    }

    pub fn choice(&self, t: usize, i: usize) -> Result<Choice> {
        self.cells
            .get(t.wrapping_sub(1))
            .and_then(|r| r.get(i))
            .map(|c| c.choice)
            .ok_or_else(|| Error::Index(format!("mask cell (t={t}, block={i})")))
    }

    pub fn any(&self, choice: Choice) -> bool {
        self.cells.iter().flatten().any(|c| c.choice == choice)
    }

    /// Share of blocks choosing the time branch, per timestep.
    pub fn tib_share(&self) -> Vec<f64> {
        self.cells
            .iter()
            .map(|r| r.iter().filter(|c| c.choice == Choice::Tib).count() as f64 / r.len().max(1) as f64)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Contract(e.to_string()))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }
}

/// `τ = L_tm / L_cm`; the time branch is chosen iff `τ < 1`. A zero cache
/// loss gives `τ = ∞` (or keeps the cache when both are zero).
pub fn select_maintenance(loss_tm: &[Vec<f64>], loss_cm: &[Vec<f64>]) -> Result<SelectionMask> {
    if loss_tm.len() != loss_cm.len() || loss_tm.iter().zip(loss_cm).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Shape("loss tables differ in shape".into()));
    }
    let mut cells = Vec::with_capacity(loss_tm.len());
    for (row_tm, row_cm) in loss_tm.iter().zip(loss_cm) {
        let mut row = Vec::with_capacity(row_tm.len());
        for (&tm, &cm) in row_tm.iter().zip(row_cm) {
            if !(tm >= 0.0 && cm >= 0.0) {
                return Err(Error::Contract(format!("losses must be nonnegative, got {tm} and {cm}")));
            }
            let tau = if cm == 0.0 {
                if tm == 0.0 {
                    1.0
                } else {
                    f64::INFINITY
                }
            } else {
                tm / cm
            };
            let choice = if tau < 1.0 { Choice::Tib } else { Choice::Cache };
            row.push(MaskCell {
                tau,
                choice,
                loss_tm: tm,
                loss_cm: cm,
            });
        }
        cells.push(row);
    }
    Ok(SelectionMask { cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_rule_and_ties() {
        let m = select_maintenance(&[vec![0.5, 1.0, 0.0, 0.3]], &[vec![1.0, 1.0, 0.0, 0.0]]).unwrap();
        let c = &m.cells[0];
        assert_eq!((c[0].tau, c[0].choice), (0.5, Choice::Tib));
        assert_eq!((c[1].tau, c[1].choice), (1.0, Choice::Cache));
        assert_eq!(c[2].choice, Choice::Cache);
        assert_eq!((c[3].tau, c[3].choice), (f64::INFINITY, Choice::Cache));
        assert!(select_maintenance(&[vec![-1.0]], &[vec![1.0]]).is_err());
        assert!(select_maintenance(&[vec![1.0]], &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn json_round_trip_keeps_infinite_ratio() {
        let m = select_maintenance(&[vec![0.25, 2.0]], &[vec![0.5, 0.0]]).unwrap();
        let back: SelectionMask = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn loss_kinds() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(feature_loss(&a, &a, LossKind::Mse).unwrap(), 0.0);
        assert!(feature_loss(&a, &a, LossKind::Kl).unwrap().abs() < 1e-15);
        let b = [1.0, 2.0, 4.0];
        assert!((feature_loss(&a, &b, LossKind::Mse).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(feature_loss(&a, &b, LossKind::Kl).unwrap() > 0.0);
        assert!(feature_loss(&a, &b, LossKind::Ce).unwrap() > feature_loss(&a, &a, LossKind::Ce).unwrap());
        assert_eq!("kl".parse::<LossKind>().unwrap(), LossKind::Kl);
    }
}

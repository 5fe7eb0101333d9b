use serde::{Deserialize, Serialize};

use super::model::{DenoiserGraph, ForwardHooks, FullPrecision};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Temporal features `g_i(h(t))` for every timestep and block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    timesteps: usize,
    blocks: usize,
    /// `[t − 1][i]`, each of length `hidden`.
    rows: Vec<Vec<Vec<f64>>>,
}

impl FeatureTable {
    /// Builds a table from `[t − 1][i]` rows, all of one width.
    pub fn from_rows(rows: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let blocks = rows.first().map_or(0, Vec::len);
        let width = rows.first().and_then(|r| r.first()).map_or(0, Vec::len);
        if rows.is_empty() || blocks == 0 {
            return Err(Error::Shape("feature table needs at least one timestep and block".into()));
        }
        if rows.iter().any(|r| r.len() != blocks || r.iter().any(|f| f.len() != width)) {
            return Err(Error::Shape("ragged feature table".into()));
        }
        Ok(Self {
            timesteps: rows.len(),
            blocks,
            rows,
        })
    }

    pub fn width(&self) -> usize {
        self.rows[0][0].len()
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    /// Feature of block `i` at timestep `t` (1-based).
    pub fn get(&self, t: usize, i: usize) -> Result<&[f64]> {
        if t == 0 || t > self.timesteps || i >= self.blocks {
            return Err(Error::Index(format!(
                "feature (t={t}, block={i}) outside {}x{}",
                self.timesteps, self.blocks
            )));
        }
        Ok(&self.rows[t - 1][i])
    }

    /// All timesteps of block `i` as a `[T, hidden]` tensor.
    pub fn block(&self, i: usize) -> Result<Tensor> {
        let rows = (1..=self.timesteps)
            .map(|t| self.get(t, i).map(<[f64]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }
}

/// The temporal feature of every block at every timestep, under `hooks`.
/// Stored features offered by the hooks are taken as they are; the time
/// branch runs only when some entry lacks one.
pub fn capture_with(model: &DenoiserGraph, hooks: &mut dyn ForwardHooks) -> Result<FeatureTable> {
    let c = model.config();
    let ts: Vec<usize> = (1..=c.timesteps).collect();
    let mut tape = Tape::new();
    let mut h = None;
    let mut rows = vec![Vec::with_capacity(c.blocks); c.timesteps];
    for i in 0..c.blocks {
        let stored = ts
            .iter()
            .map(|&t| hooks.temporal_source(i, t))
            .collect::<Result<Vec<_>>>()?;
        let computed = if stored.iter().any(Option::is_none) {
            let hv = match h {
                Some(v) => v,
                None => *h.insert(model.time_embedding(&mut tape, &ts, hooks)?),
            };
            let g = model.block_embedding(&mut tape, i, hv, &ts, hooks)?;
            Some(tape.value(g).clone())
        } else {
            None
        };
        for (t, (row, src)) in rows.iter_mut().zip(stored).enumerate() {
            row.push(match (src, &computed) {
                (Some(f), _) => f.into_data(),
                (None, Some(g)) => g.row(t).to_vec(),
                (None, None) => unreachable!("computed whenever an entry is missing"),
            });
        }
    }
    Ok(FeatureTable {
        timesteps: c.timesteps,
        blocks: c.blocks,
        rows,
    })
}

/// Full-precision temporal features.
pub fn capture_temporal_features(model: &DenoiserGraph) -> Result<FeatureTable> {
    capture_with(model, &mut FullPrecision)
}

//! Temporal feature error and mismatch.

use serde::{Deserialize, Serialize};

use crate::diffusion::features::FeatureTable;
use crate::error::{Error, Result};
use crate::tensor::cosine;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalError {
    /// Mean cosine similarity over blocks, one per timestep.
    pub e_t: Vec<f64>,
    /// Mean squared error per element, `[t − 1][i]`.
    pub mse: Vec<Vec<f64>>,
    /// Pairs where one vector had zero norm.
    pub degenerate: usize,
}

impl TemporalError {
    pub fn mean_e_t(&self) -> f64 {
        mean(&self.e_t)
    }

    pub fn mean_mse(&self) -> f64 {
        mean(&self.mse.iter().flatten().copied().collect::<Vec<_>>())
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn check(fp: &FeatureTable, q: &FeatureTable) -> Result<()> {
    if fp.timesteps() != q.timesteps() || fp.blocks() != q.blocks() || fp.width() != q.width() {
        return Err(Error::Shape(format!(
            "feature tables {}x{}x{} and {}x{}x{}",
            fp.timesteps(),
            fp.blocks(),
            fp.width(),
            q.timesteps(),
            q.blocks(),
            q.width()
        )));
    }
    Ok(())
}

pub fn temporal_error(fp: &FeatureTable, q: &FeatureTable) -> Result<TemporalError> {
    check(fp, q)?;
    let mut e_t = Vec::with_capacity(fp.timesteps());
    let mut mse = Vec::with_capacity(fp.timesteps());
    let mut degenerate = 0;
    for t in 1..=fp.timesteps() {
        let mut cos_sum = 0.0;
        let mut row = Vec::with_capacity(fp.blocks());
        for i in 0..fp.blocks() {
            let (a, b) = (fp.get(t, i)?, q.get(t, i)?);
            let za = a.iter().all(|&v| v == 0.0);
            let zb = b.iter().all(|&v| v == 0.0);
            if za != zb {
                degenerate += 1;
            }
            cos_sum += cosine(a, b);
            row.push(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64);
        }
        e_t.push(cos_sum / fp.blocks() as f64);
        mse.push(row);
    }
    Ok(TemporalError { e_t, mse, degenerate })
}

/// `δ[t − 1][i] = argmax_{t'} cos(q_{t,i}, fp_{t',i}) − t`, ties going to
/// the `t'` nearest `t`.
pub fn mismatch_index(fp: &FeatureTable, q: &FeatureTable) -> Result<Vec<Vec<i64>>> {
    check(fp, q)?;
    let total = fp.timesteps();
    let mut out = Vec::with_capacity(total);
    for t in 1..=total {
        let mut row = Vec::with_capacity(fp.blocks());
        for i in 0..fp.blocks() {
            let x = q.get(t, i)?;
            let mut best = (f64::NEG_INFINITY, 0i64);
            for tp in 1..=total {
                let c = cosine(x, fp.get(tp, i)?);
                let d = tp as i64 - t as i64;
                if c > best.0 || (c == best.0 && d.abs() < best.1.abs()) {
                    best = (c, d);
                }
            }
            row.push(best.1);
        }
        out.push(row);
    }
    Ok(out)
}

pub fn mean_abs_delta(delta: &[Vec<i64>]) -> f64 {
    let all: Vec<f64> = delta.iter().flatten().map(|d| d.unsigned_abs() as f64).collect();
    mean(&all)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(t: usize, n: usize, f: impl Fn(usize, usize, usize) -> f64) -> FeatureTable {
        FeatureTable::from_rows(
            (1..=t)
                .map(|t| (0..n).map(|i| (0..4).map(|k| f(t, i, k)).collect()).collect())
                .collect(),
        )
        .unwrap()
    }

    fn wave(t: usize, i: usize, k: usize) -> f64 {
        ((t as f64) * 0.3 + (k as f64) * 1.1 + i as f64).sin()
    }

    #[test]
    fn identity_and_antipode() {
        let fp = table(10, 3, wave);
        let e = temporal_error(&fp, &fp).unwrap();
        assert!(e.e_t.iter().all(|&v| v == 1.0));
        assert!(e.mse.iter().flatten().all(|&v| v == 0.0));
        let neg = table(10, 3, |t, i, k| -wave(t, i, k));
        assert!(temporal_error(&fp, &neg).unwrap().e_t.iter().all(|&v| (v + 1.0).abs() < 1e-15));
        assert!(mismatch_index(&fp, &fp).unwrap().iter().flatten().all(|&d| d == 0));
    }

    #[test]
    fn cosine_by_hand() {
        let a = [1.0, 2.0, -0.5, 3.0];
        let b = [0.5, -1.0, 2.0, 1.5];
        let dot = 0.5 - 2.0 - 1.0 + 4.5;
        let want = dot / ((1.0f64 + 4.0 + 0.25 + 9.0).sqrt() * (0.25f64 + 1.0 + 4.0 + 2.25).sqrt());
        let fp = FeatureTable::from_rows(vec![vec![a.to_vec()]]).unwrap();
        let q = FeatureTable::from_rows(vec![vec![b.to_vec()]]).unwrap();
        assert!((temporal_error(&fp, &q).unwrap().e_t[0] - want).abs() < 1e-12);
        let zero = FeatureTable::from_rows(vec![vec![vec![0.0; 4]]]).unwrap();
        let r = temporal_error(&fp, &zero).unwrap();
        assert_eq!((r.e_t[0], r.degenerate), (0.0, 1));
        assert_eq!(temporal_error(&zero, &zero).unwrap().e_t[0], 1.0);
    }

    #[test]
    fn shifted_features_give_the_shift() {
        let total = 20;
        let fp = table(total, 2, wave);
        let q = table(total, 2, |t, i, k| wave((t + 3).min(total), i, k));
        let delta = mismatch_index(&fp, &q).unwrap();
        for t in 1..=total {
            for d in &delta[t - 1] {
                assert_eq!(*d, ((t + 3).min(total) - t) as i64);
            }
        }
    }
}

//! Quantized copies of the temporal features, one quantizer per timestep and
//! block.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::hooks::StoredFeatures;
use super::select::{Choice, SelectionMask};
use crate::diffusion::features::FeatureTable;
use crate::error::{Error, Result};
use crate::quant::{dequantize, estimate_range, lsq_optimize, quantize, Granularity, IntCodes, LsqConfig, QuantParams, RangeMethod};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub params: QuantParams,
    pub codes: IntCodes,
    /// Mean squared error of the min-max starting point.
    pub initial_mse: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalFeatureCache {
    pub bits: u32,
    /// Full-precision features the cache was built from.
    pub fp: FeatureTable,
    /// `entries[t − 1][i]`.
    pub entries: Vec<Vec<CacheEntry>>,
}

/// Quantizes every `(t, i)` feature independently: min-max start, then LSQ.
pub fn cache_maintain(fp: &FeatureTable, bits: u32, lsq: &LsqConfig) -> Result<TemporalFeatureCache> {
    let width = fp.width();
    let mut entries = Vec::with_capacity(fp.timesteps());
    for t in 1..=fp.timesteps() {
        let mut row = Vec::with_capacity(fp.blocks());
        for i in 0..fp.blocks() {
            let x = Tensor::new(vec![width], fp.get(t, i)?.to_vec())?;
            let p0 = estimate_range(&[x.clone()], RangeMethod::MinMax, bits, Granularity::PerTensor, false)?;
            let out = lsq_optimize(&x, &p0, lsq, None)?;
            let codes = quantize(&x, &out.params)?;
            row.push(CacheEntry {
                params: out.params,
                codes,
                initial_mse: out.initial_objective / width as f64,
                mse: out.objective / width as f64,
            });
        }
        entries.push(row);
    }
    Ok(TemporalFeatureCache {
        bits,
        fp: fp.clone(),
        entries,
    })
}

impl TemporalFeatureCache {
    pub fn timesteps(&self) -> usize {
        self.entries.len()
    }

    pub fn blocks(&self) -> usize {
        self.entries.first().map_or(0, Vec::len)
    }

    pub fn entry(&self, t: usize, i: usize) -> Result<&CacheEntry> {
        self.entries
            .get(t.wrapping_sub(1))
            .and_then(|r| r.get(i))
            .ok_or_else(|| Error::Index(format!("cache entry (t={t}, block={i})")))
    }

    /// `s · (code − z)` for one entry, shaped `[hidden]`.
    pub fn dequantized(&self, t: usize, i: usize) -> Result<Tensor> {
        let e = self.entry(t, i)?;
        dequantize(&e.codes, &e.params)
    }

    /// All dequantized features as a table.
    pub fn table(&self) -> Result<FeatureTable> {
        let rows = (1..=self.timesteps())
            .map(|t| {
                (0..self.blocks())
                    .map(|i| Ok(self.dequantized(t, i)?.into_data()))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        FeatureTable::from_rows(rows)
    }

    /// Per-`(t, i)` mean squared error against the full-precision features.
    pub fn mse_table(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|r| r.iter().map(|e| e.mse).collect()).collect()
    }

    /// Features to serve in place of the time branch: every entry, or only
    /// those the mask assigns to the cache.
    pub fn stored_features(&self, mask: Option<&SelectionMask>) -> Result<StoredFeatures> {
        if let Some(m) = mask {
            if m.timesteps() != self.timesteps() || m.blocks() != self.blocks() {
                return Err(Error::Shape(format!(
                    "mask is {}x{}, cache is {}x{}",
                    m.timesteps(),
                    m.blocks(),
                    self.timesteps(),
                    self.blocks()
                )));
            }
        }
        (1..=self.timesteps())
            .map(|t| {
                (0..self.blocks())
                    .map(|i| {
                        let use_cache = match mask {
                            Some(m) => m.choice(t, i)? == Choice::Cache,
                            None => true,
                        };
                        if !use_cache {
                            return Ok(None);
                        }
                        let f = self.dequantized(t, i)?;
                        let n = f.len();
                        Ok(Some(f.reshape(vec![1, n])?))
                    })
                    .collect()
            })
            .collect()
    }

    /// Writes the JSON manifest at `path` and a sibling `.bin` blob holding
    /// the codes (one byte each up to 8 bits, else `u32` LE) followed by the
    /// full-precision features as `f64` LE.
    pub fn save(&self, path: &Path) -> Result<()> {
        let blob = blob_path(path);
        let wide = self.bits > 8;
        let mut bytes = Vec::new();
        let mut entries = Vec::new();
        for (t, row) in self.entries.iter().enumerate() {
            for (i, e) in row.iter().enumerate() {
                entries.push(EntryRecord {
                    t: t + 1,
                    i,
                    s: e.params.scale[0],
                    z: e.params.zero[0],
                    shape: e.codes.shape.clone(),
                    initial_mse: e.initial_mse,
                    mse: e.mse,
                });
                for &c in &e.codes.codes {
                    if wide {
                        bytes.extend_from_slice(&c.to_le_bytes());
                    } else {
                        bytes.push(c as u8);
                    }
                }
            }
        }
        let fp_offset = bytes.len();
        for t in 1..=self.fp.timesteps() {
            for i in 0..self.fp.blocks() {
                for v in self.fp.get(t, i)? {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let manifest = Manifest {
            timesteps: self.timesteps(),
            blocks: self.blocks(),
            bits: self.bits,
            width: self.fp.width(),
            blob: blob
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            fp_offset,
            entries,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(path, e))?;
        std::fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        let blob = path.with_file_name(&m.blob);
        let bytes = std::fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
        if m.entries.len() != m.timesteps * m.blocks {
            return Err(Error::format(path, "entry count does not match timesteps x blocks"));
        }
        let code_bytes = if m.bits > 8 { 4 } else { 1 };
        let need = m.timesteps * m.blocks * m.width;
        if m.fp_offset != need * code_bytes || bytes.len() != m.fp_offset + need * 8 {
            return Err(Error::format(&blob, "unexpected length"));
        }
        let mut entries: Vec<Vec<Option<CacheEntry>>> = vec![vec![None; m.blocks]; m.timesteps];
        let mut offset = 0;
        for r in &m.entries {
            let n: usize = r.shape.iter().product();
            if n != m.width {
                return Err(Error::format(path, format!("entry (t={}, block={}) has width {n}", r.t, r.i)));
            }
            let raw = &bytes[offset..offset + n * code_bytes];
            offset += n * code_bytes;
            let codes = if code_bytes == 4 {
                raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()
            } else {
                raw.iter().map(|&c| c as u32).collect()
            };
            let params = QuantParams::per_tensor(r.s, r.z, m.bits);
            params.validate()?;
            let slot = entries
                .get_mut(r.t.wrapping_sub(1))
                .and_then(|row| row.get_mut(r.i))
                .ok_or_else(|| Error::format(path, format!("entry (t={}, block={}) out of range", r.t, r.i)))?;
            *slot = Some(CacheEntry {
                params,
                codes: IntCodes {
                    shape: r.shape.clone(),
                    codes,
                },
                initial_mse: r.initial_mse,
                mse: r.mse,
            });
        }
        let entries = entries
            .into_iter()
            .map(|row| row.into_iter().collect::<Option<Vec<_>>>())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::format(path, "duplicate or missing entries"))?;
        let fp_values: Vec<f64> = bytes[m.fp_offset..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let rows = fp_values
            .chunks(m.blocks * m.width)
            .map(|r| r.chunks(m.width).map(<[f64]>::to_vec).collect())
            .collect();
        Ok(Self {
            bits: m.bits,
            fp: FeatureTable::from_rows(rows)?,
            entries,
        })
    }
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    #[serde(rename = "T")]
    timesteps: usize,
    #[serde(rename = "n")]
    blocks: usize,
    #[serde(rename = "b")]
    bits: u32,
    width: usize,
    blob: String,
    fp_offset: usize,
    entries: Vec<EntryRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryRecord {
    t: usize,
    i: usize,
    s: f64,
    z: i64,
    shape: Vec<usize>,
    initial_mse: f64,
    mse: f64,
}

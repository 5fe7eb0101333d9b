//! Range estimators: min-max, MSE shrink search, percentile and KL.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::params::{affine_from_range, symmetric_from_range, Granularity, QuantParams, MIN_SCALE};
use crate::error::{Error, Result};
use crate::tape::ChannelLayout;
use crate::tensor::Tensor;

/// Two-sided clipping level of the percentile estimator.
pub const PERCENTILE: f64 = 99.9;
/// Histogram resolution of the KL estimator.
pub const KL_BINS: usize = 2048;
/// Number of shrink factors tried by the MSE estimator.
pub const MSE_GRID: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RangeMethod {
    #[default]
    MinMax,
    Mse,
    Percentile,
    Kl,
}

impl fmt::Display for RangeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RangeMethod::MinMax => "min-max",
            RangeMethod::Mse => "mse",
            RangeMethod::Percentile => "percentile",
            RangeMethod::Kl => "kl",
        })
    }
}

impl FromStr for RangeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "min-max" | "minmax" => Ok(RangeMethod::MinMax),
            "mse" => Ok(RangeMethod::Mse),
            "percentile" => Ok(RangeMethod::Percentile),
            "kl" => Ok(RangeMethod::Kl),
            other => Err(Error::Config(format!(
                "unknown range method `{other}` (expected min-max, mse, percentile, kl)"
            ))),
        }
    }
}

/// Estimates quantization parameters from one or more observed tensors.
///
/// With per-channel granularity all samples must share the channel count
/// along the axis; each channel gets its own range.
pub fn estimate_range(
    samples: &[Tensor],
    method: RangeMethod,
    bits: u32,
    granularity: Granularity,
    symmetric: bool,
) -> Result<QuantParams> {
    if samples.is_empty() || samples.iter().all(Tensor::is_empty) {
        return Err(Error::Config("range estimation needs at least one sample".into()));
    }
    if !(2..=30).contains(&bits) {
        return Err(Error::Config(format!("bit-width {bits} outside [2, 30]")));
    }
    let channels = ChannelLayout::new(samples[0].shape(), granularity.axis())?.channels;
    let mut per_channel: Vec<Vec<f64>> = vec![Vec::new(); channels];
    for s in samples {
        let layout = ChannelLayout::new(s.shape(), granularity.axis())?;
        if layout.channels != channels {
            return Err(Error::Shape("samples disagree on channel count".into()));
        }
        for (e, &v) in s.data().iter().enumerate() {
            per_channel[layout.channel(e)].push(v);
        }
    }
    let mut scale = Vec::with_capacity(channels);
    let mut zero = Vec::with_capacity(channels);
    for values in &per_channel {
        let (s, z) = channel_params(values, method, bits, symmetric);
        scale.push(s);
        zero.push(z);
    }
    Ok(QuantParams {
        scale,
        zero,
        bits,
        granularity,
    })
}

fn rule(lo: f64, hi: f64, bits: u32, symmetric: bool) -> (f64, i64) {
    if symmetric {
        symmetric_from_range(lo, hi, bits)
    } else {
        affine_from_range(lo, hi, bits)
    }
}

fn channel_params(values: &[f64], method: RangeMethod, bits: u32, symmetric: bool) -> (f64, i64) {
    let (lo, hi) = min_max(values);
    match method {
        RangeMethod::MinMax => rule(lo, hi, bits, symmetric),
        RangeMethod::Percentile => {
            let mut sorted = values.to_vec();
            sorted.sort_by(f64::total_cmp);
            let tail = (100.0 - PERCENTILE) / 100.0;
            rule(quantile(&sorted, tail), quantile(&sorted, 1.0 - tail), bits, symmetric)
        }
        RangeMethod::Mse => {
            let mut best = rule(lo, hi, bits, symmetric);
            let mut best_err = sse(values, best, bits);
            for k in (1..MSE_GRID).rev() {
                let a = k as f64 / MSE_GRID as f64;
                let cand = rule(a * lo, a * hi, bits, symmetric);
                let err = sse(values, cand, bits);
                if err < best_err {
                    best = cand;
                    best_err = err;
                }
            }
            best
        }
        RangeMethod::Kl => {
            let thr = kl_threshold(values, bits, lo < 0.0);
            rule(lo.max(-thr), hi.min(thr), bits, symmetric)
        }
    }
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn sse(values: &[f64], (s, z): (f64, i64), bits: u32) -> f64 {
    let q = super::params::levels(bits) as f64;
    values
        .iter()
        .map(|&v| {
            let code = ((v / s).round_ties_even() + z as f64).clamp(0.0, q);
            let d = s * (code - z as f64) - v;
            d * d
        })
        .sum()
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Clipping threshold on |x| minimizing KL(P‖Q) between the clipped
/// reference histogram and its quantized re-expansion.
fn kl_threshold(values: &[f64], bits: u32, signed: bool) -> f64 {
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let target = if signed { 1usize << (bits - 1) } else { 1usize << bits };
    if max_abs == 0.0 || target >= KL_BINS {
        return max_abs;
    }
    let width = max_abs / KL_BINS as f64;
    let mut hist = vec![0.0f64; KL_BINS];
    for v in values {
        let b = ((v.abs() / width) as usize).min(KL_BINS - 1);
        hist[b] += 1.0;
    }

    let mut best = (f64::INFINITY, KL_BINS);
    for i in target..=KL_BINS {
        let mut reference = hist[..i].to_vec();
        let outliers: f64 = hist[i..].iter().sum();
        reference[i - 1] += outliers;

        let mut candidate = vec![0.0; i];
        for j in 0..target {
            let start = j * i / target;
            let end = ((j + 1) * i / target).max(start + 1);
            let mass: f64 = hist[start..end].iter().sum();
            let nonzero = hist[start..end].iter().filter(|&&h| h > 0.0).count();
            if nonzero > 0 {
                for k in start..end {
                    if hist[k] > 0.0 {
                        candidate[k] = mass / nonzero as f64;
                    }
                }
            }
        }
        let kl = kl_divergence(&reference, &candidate);
        if kl < best.0 {
            best = (kl, i);
        }
    }
    (best.1 as f64 * width).max(MIN_SCALE)
}

fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let ps: f64 = p.iter().sum();
    let qs: f64 = q.iter().sum();
    if ps == 0.0 || qs == 0.0 {
        return f64::INFINITY;
    }
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| {
            let pn = pi / ps;
            let qn = (qi / qs).max(1e-12);
            pn * (pn / qn).ln()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::params::{fake_quant, quant_error};

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn min_max_hand_case() {
        let p = estimate_range(&[t(&[-1.0, 0.5, 3.0])], RangeMethod::MinMax, 8, Granularity::PerTensor, false)
            .unwrap();
        assert_eq!(p.scale, vec![4.0 / 255.0]);
        assert_eq!(p.zero, vec![64]);
    }

    #[test]
    fn all_zero_is_exact() {
        let x = t(&[0.0; 6]);
        let p = estimate_range(&[x.clone()], RangeMethod::MinMax, 8, Granularity::PerTensor, false).unwrap();
        assert_eq!(p.scale, vec![MIN_SCALE]);
        assert_eq!(p.zero, vec![0]);
        assert_eq!(fake_quant(&x, &p).unwrap(), x);
    }

    #[test]
    fn empty_samples_rejected() {
        assert!(matches!(
            estimate_range(&[], RangeMethod::MinMax, 8, Granularity::PerTensor, false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mse_beats_min_max_with_outlier() {
        let mut v: Vec<f64> = (0..15).map(|i| (i as f64 - 7.0) * 0.1).collect();
        v.push(25.0);
        let x = t(&v);
        let mm = estimate_range(&[x.clone()], RangeMethod::MinMax, 4, Granularity::PerTensor, false).unwrap();
        let ms = estimate_range(&[x.clone()], RangeMethod::Mse, 4, Granularity::PerTensor, false).unwrap();
        let e_mm = quant_error(&x, &mm, &x).unwrap();
        let e_ms = quant_error(&x, &ms, &x).unwrap();
        assert!(e_ms < e_mm, "{e_ms} !< {e_mm}");

        // grid oracle: the best of the 100 shrink factors, evaluated independently
        let (lo, hi) = (-0.7, 25.0);
        let oracle = (1..=100)
            .map(|k| {
                let a = k as f64 / 100.0;
                let (s, z) = affine_from_range(a * lo, a * hi, 4);
                quant_error(&x, &QuantParams::per_tensor(s, z, 4), &x).unwrap()
            })
            .fold(f64::INFINITY, f64::min);
        assert_eq!(e_ms, oracle);
    }

    #[test]
    fn percentile_clips_tails() {
        let mut v: Vec<f64> = (0..10_000).map(|i| (i as f64 / 10_000.0) - 0.5).collect();
        v.push(100.0);
        let p = estimate_range(&[t(&v)], RangeMethod::Percentile, 8, Granularity::PerTensor, false).unwrap();
        let (_, hi) = p.range(0);
        assert!(hi < 1.0, "hi = {hi}");
    }

    #[test]
    fn kl_clips_heavy_tail() {
        let mut v: Vec<f64> = (0..4000).map(|i| ((i as f64) * 0.618).sin() * 0.1).collect();
        v.push(50.0);
        let p = estimate_range(&[t(&v)], RangeMethod::Kl, 4, Granularity::PerTensor, false).unwrap();
        let (lo, hi) = p.range(0);
        assert!(hi < 50.0 && lo > -50.0);
        // at 24 bits the histogram is too coarse to clip anything
        let p24 = estimate_range(&[t(&v)], RangeMethod::Kl, 24, Granularity::PerTensor, false).unwrap();
        assert!(p24.range(0).1 >= 50.0 - 1e-6);
    }

    #[test]
    fn per_channel_ranges_are_independent() {
        let x = Tensor::new(vec![2, 2], vec![1.0, -10.0, -1.0, 10.0]).unwrap();
        let p = estimate_range(&[x], RangeMethod::MinMax, 8, Granularity::PerChannel { axis: 1 }, false).unwrap();
        assert_eq!(p.scale, vec![2.0 / 255.0, 20.0 / 255.0]);
    }

    #[test]
    fn method_names_parse() {
        assert_eq!("min-max".parse::<RangeMethod>().unwrap(), RangeMethod::MinMax);
        assert_eq!("KL".parse::<RangeMethod>().unwrap(), RangeMethod::Kl);
        assert!("lsq".parse::<RangeMethod>().is_err());
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::ChannelLayout;
use crate::tensor::Tensor;

/// Smallest scale ever produced by an estimator.
pub const MIN_SCALE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

impl Granularity {
    pub fn axis(&self) -> Option<usize> {
        match self {
            Granularity::PerTensor => None,
            Granularity::PerChannel { axis } => Some(*axis),
        }
    }
}

/// Uniform affine quantizer parameters for one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    #[serde(rename = "s")]
    pub scale: Vec<f64>,
    #[serde(rename = "z")]
    pub zero: Vec<i64>,
    #[serde(rename = "b")]
    pub bits: u32,
    pub granularity: Granularity,
}

/// Integer codes in `[0, 2^b − 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntCodes {
    pub shape: Vec<usize>,
    pub codes: Vec<u32>,
}

impl QuantParams {
    pub fn per_tensor(scale: f64, zero: i64, bits: u32) -> Self {
        Self {
            scale: vec![scale],
            zero: vec![zero],
            bits,
            granularity: Granularity::PerTensor,
        }
    }

    pub fn levels(&self) -> i64 {
        levels(self.bits)
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=30).contains(&self.bits) {
            return Err(Error::Contract(format!("bit-width {} outside [2, 30]", self.bits)));
        }
        if self.scale.is_empty() || self.scale.len() != self.zero.len() {
            return Err(Error::Contract("scale/zero length mismatch".into()));
        }
        if let Some(s) = self.scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Contract(format!("scale must be positive, got {s}")));
        }
        let q = self.levels();
        if let Some(z) = self.zero.iter().find(|z| **z < 0 || **z > q) {
            return Err(Error::Contract(format!("zero offset {z} outside [0, {q}]")));
        }
        if self.granularity == Granularity::PerTensor && self.scale.len() != 1 {
            return Err(Error::Contract("per-tensor params need exactly one scale".into()));
        }
        Ok(())
    }

    pub(crate) fn layout(&self, shape: &[usize]) -> Result<ChannelLayout> {
        let layout = ChannelLayout::new(shape, self.granularity.axis())?;
        if layout.channels != self.scale.len() {
            return Err(Error::Shape(format!(
                "params carry {} channels, tensor {:?} has {}",
                self.scale.len(),
                shape,
                layout.channels
            )));
        }
        Ok(layout)
    }

    /// Representable interval `[s·(0 − z), s·(2^b − 1 − z)]` of channel `c`.
    pub fn range(&self, c: usize) -> (f64, f64) {
        let s = self.scale[c];
        let z = self.zero[c] as f64;
        (s * (0.0 - z), s * (self.levels() as f64 - z))
    }
}

pub fn levels(bits: u32) -> i64 {
    (1i64 << bits) - 1
}

#[inline]
fn code_of(x: f64, s: f64, z: i64, q: i64) -> u32 {
    ((x / s).round_ties_even() + z as f64).clamp(0.0, q as f64) as u32
}

/// `Φ(⌊x / s⌉ + z, 0, 2^b − 1)` with ties rounded to even.
pub fn quantize(x: &Tensor, p: &QuantParams) -> Result<IntCodes> {
    p.validate()?;
    let layout = p.layout(x.shape())?;
    let q = p.levels();
    let codes = x
        .data()
        .iter()
        .enumerate()
        .map(|(e, &v)| {
            let c = layout.channel(e);
            code_of(v, p.scale[c], p.zero[c], q)
        })
        .collect();
    Ok(IntCodes {
        shape: x.shape().to_vec(),
        codes,
    })
}

/// `s · (code − z)`.
pub fn dequantize(codes: &IntCodes, p: &QuantParams) -> Result<Tensor> {
    p.validate()?;
    let layout = p.layout(&codes.shape)?;
    let q = p.levels();
    let mut data = Vec::with_capacity(codes.codes.len());
    for (e, &code) in codes.codes.iter().enumerate() {
        if code as i64 > q {
            return Err(Error::Contract(format!("code {code} exceeds {q}")));
        }
        let c = layout.channel(e);
        data.push(p.scale[c] * ((code as i64 - p.zero[c]) as f64));
    }
    Tensor::new(codes.shape.clone(), data)
}

/// Quantize followed by dequantize.
pub fn fake_quant(x: &Tensor, p: &QuantParams) -> Result<Tensor> {
    dequantize(&quantize(x, p)?, p)
}

/// Squared reconstruction error `‖fake_quant(x) − target‖²`.
pub fn quant_error(x: &Tensor, p: &QuantParams, target: &Tensor) -> Result<f64> {
    fake_quant(x, p)?.sq_dist(target)
}

/// Scale and zero offset covering `[lo, hi]` with the min-max rule.
///
/// A constant range maps the constant onto a code exactly. A range whose zero
/// offset would leave `[0, 2^b − 1]` is widened to include zero.
pub fn affine_from_range(lo: f64, hi: f64, bits: u32) -> (f64, i64) {
    let q = levels(bits);
    if hi <= lo {
        let c = lo;
        return if c == 0.0 {
            (MIN_SCALE, 0)
        } else if c > 0.0 {
            (c.max(MIN_SCALE), 0)
        } else {
            ((-c).max(MIN_SCALE), 1)
        };
    }
    let s = ((hi - lo) / q as f64).max(MIN_SCALE);
    let z = (-lo / s).round_ties_even();
    if z >= 0.0 && z <= q as f64 {
        return (s, z as i64);
    }
    let (lo, hi) = (lo.min(0.0), hi.max(0.0));
    let s = ((hi - lo) / q as f64).max(MIN_SCALE);
    let z = (-lo / s).round_ties_even().clamp(0.0, q as f64);
    (s, z as i64)
}

/// Symmetric parameters with the zero offset at mid-range `2^(b−1)`.
pub fn symmetric_from_range(lo: f64, hi: f64, bits: u32) -> (f64, i64) {
    let max_abs = lo.abs().max(hi.abs());
    let half = (1i64 << (bits - 1)) as f64;
    ((max_abs / (half - 1.0)).max(MIN_SCALE), 1i64 << (bits - 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn hand_evaluated_codes() {
        let p = QuantParams::per_tensor(0.5, 0, 2);
        assert_eq!(quantize(&t(&[0.0, 0.7]), &p).unwrap().codes, vec![0, 1]);
        let p = QuantParams::per_tensor(1.0, 0, 8);
        assert_eq!(quantize(&t(&[1000.0]), &p).unwrap().codes, vec![255]);
        let p = QuantParams::per_tensor(0.37, 0, 5);
        assert_eq!(quantize(&t(&[0.0]), &p).unwrap().codes, vec![0]);
    }

    #[test]
    fn ties_round_to_even() {
        let p = QuantParams::per_tensor(1.0, 0, 4);
        assert_eq!(quantize(&t(&[0.5, 1.5, 2.5]), &p).unwrap().codes, vec![0, 2, 2]);
    }

    #[test]
    fn dequantize_table_b2() {
        // s = 0.5, z = 1: representable values are -0.5, 0, 0.5, 1.0
        let p = QuantParams::per_tensor(0.5, 1, 2);
        let x = t(&[-1.0, -0.5, 0.0, 0.5, 1.0]);
        let codes = quantize(&x, &p).unwrap();
        assert_eq!(codes.codes, vec![0, 0, 1, 2, 3]);
        assert_eq!(dequantize(&codes, &p).unwrap().data(), &[-0.5, -0.5, 0.0, 0.5, 1.0]);
        let at_zero = IntCodes { shape: vec![1], codes: vec![1] };
        assert_eq!(dequantize(&at_zero, &p).unwrap().data(), &[0.0]);
    }

    #[test]
    fn out_of_range_code_is_rejected() {
        let p = QuantParams::per_tensor(0.5, 1, 2);
        let bad = IntCodes { shape: vec![1], codes: vec![4] };
        assert!(matches!(dequantize(&bad, &p), Err(Error::Contract(_))));
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(QuantParams::per_tensor(0.0, 0, 8).validate().is_err());
        assert!(QuantParams::per_tensor(1.0, 256, 8).validate().is_err());
        assert!(QuantParams::per_tensor(1.0, 0, 1).validate().is_err());
    }

    #[test]
    fn min_max_rule() {
        let (s, z) = affine_from_range(-1.0, 3.0, 8);
        assert_eq!(s, 4.0 / 255.0);
        assert_eq!(z, 64);
        assert_eq!(affine_from_range(0.0, 0.0, 8), (MIN_SCALE, 0));
        // positive-only range is widened to include zero
        let (s, z) = affine_from_range(2.0, 5.0, 8);
        assert_eq!((s, z), (5.0 / 255.0, 0));
    }

    #[test]
    fn constants_are_exact() {
        for c in [0.0, 0.3, -1.7, 1e-3] {
            let (s, z) = affine_from_range(c, c, 4);
            let p = QuantParams::per_tensor(s, z, 4);
            assert_eq!(fake_quant(&t(&[c, c]), &p).unwrap().data(), &[c, c]);
        }
    }

    #[test]
    fn fake_quant_is_idempotent() {
        let p = QuantParams::per_tensor(0.13, 3, 4);
        let x = t(&[-0.9, -0.2, 0.0, 0.31, 0.77, 5.0]);
        let once = fake_quant(&x, &p).unwrap();
        assert_eq!(fake_quant(&once, &p).unwrap(), once);
    }

    #[test]
    fn single_channel_equals_per_tensor() {
        let x = Tensor::new(vec![3, 1], vec![0.1, -0.4, 0.25]).unwrap();
        let a = QuantParams::per_tensor(0.05, 8, 4);
        let b = QuantParams {
            granularity: Granularity::PerChannel { axis: 1 },
            ..a.clone()
        };
        assert_eq!(quantize(&x, &a).unwrap(), quantize(&x, &b).unwrap());
    }
}

//! Forward hooks that simulate a quantized model.

use std::collections::BTreeMap;

use crate::diffusion::model::{weight_name, DenoiserGraph, ForwardHooks};
use crate::error::{Error, Result};
use crate::quant::{fake_quant, ActParams, QuantParamSet, QuantParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Fake-quantized weights and activation parameters ready for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantState {
    /// Layer name to fake-quantized weight matrix.
    weights: BTreeMap<String, Tensor>,
    activations: BTreeMap<String, ActParams>,
}

impl QuantState {
    pub fn new(model: &DenoiserGraph, qset: &QuantParamSet) -> Result<Self> {
        let mut weights = BTreeMap::new();
        for layer in model.layers() {
            if let Some(p) = qset.weights.get(&layer) {
                weights.insert(layer.clone(), fake_quant(model.param(&weight_name(&layer))?, p)?);
            }
        }
        Ok(Self {
            weights,
            activations: qset.activations.clone(),
        })
    }

    /// Same weights, activations left in full precision.
    pub fn weights_only(&self) -> Self {
        Self {
            weights: self.weights.clone(),
            activations: BTreeMap::new(),
        }
    }

    pub fn hooks(&self) -> QuantHooks<'_> {
        QuantHooks {
            state: self,
            stored: None,
            trainable: None,
        }
    }
}

/// Weight quantizers being optimized: continuous scale and zero offset per
/// layer, registered on the tape as `<layer>/scale` and `<layer>/zero`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableWeights {
    pub entries: BTreeMap<String, TrainableQuant>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainableQuant {
    pub scale: Tensor,
    pub zero: Tensor,
    pub bits: u32,
    pub template: QuantParams,
}

impl TrainableQuant {
    pub fn from_params(p: &QuantParams) -> Self {
        Self {
            scale: Tensor::new(vec![p.channels()], p.scale.clone()).expect("channel vector"),
            zero: Tensor::new(vec![p.channels()], p.zero.iter().map(|&z| z as f64).collect())
                .expect("channel vector"),
            bits: p.bits,
            template: p.clone(),
        }
    }

    /// Integer parameters with the zero offset rounded as in the forward pass.
    pub fn to_params(&self) -> QuantParams {
        QuantParams {
            scale: self.scale.data().to_vec(),
            zero: self.zero.data().iter().map(|z| z.round_ties_even() as i64).collect(),
            bits: self.bits,
            granularity: self.template.granularity,
        }
    }
}

pub fn scale_param(layer: &str) -> String {
    format!("{layer}/scale")
}

pub fn zero_param(layer: &str) -> String {
    format!("{layer}/zero")
}

/// Temporal features served from storage, `[t − 1][i]`; `None` entries fall
/// back to the time branch.
pub type StoredFeatures = Vec<Vec<Option<Tensor>>>;

pub struct QuantHooks<'a> {
    state: &'a QuantState,
    stored: Option<&'a StoredFeatures>,
    trainable: Option<&'a TrainableWeights>,
}

impl<'a> QuantHooks<'a> {
    pub fn with_stored(mut self, stored: &'a StoredFeatures) -> Self {
        self.stored = Some(stored);
        self
    }

    pub fn with_trainable(mut self, trainable: &'a TrainableWeights) -> Self {
        self.trainable = Some(trainable);
        self
    }
}

/// Fake-quantizes `x` on the tape with per-row parameters looked up by
/// timestep, or one static set.
pub fn quantize_activation(tape: &mut Tape, x: Var, params: &ActParams, ts: &[usize]) -> Result<Var> {
    match params {
        ActParams::Static(p) => {
            let s = tape.constant(Tensor::new(vec![p.channels()], p.scale.clone())?);
            let z = tape.constant(Tensor::new(vec![p.channels()], p.zero.iter().map(|&z| z as f64).collect())?);
            tape.fake_quant(x, s, z, p.bits, p.granularity.axis())
        }
        ActParams::PerTimestep(_) => {
            let shape = tape.value(x).shape().to_vec();
            if shape.len() != 2 || shape[0] != ts.len() {
                return Err(Error::Shape(format!(
                    "per-timestep activation needs one row per timestep, got {shape:?} for {} timesteps",
                    ts.len()
                )));
            }
            let mut scale = Vec::with_capacity(ts.len());
            let mut zero = Vec::with_capacity(ts.len());
            let mut bits = None;
            for &t in ts {
                let p = params.at(t)?;
                if p.channels() != 1 {
                    return Err(Error::Contract("per-timestep activation parameters must be per-tensor".into()));
                }
                if *bits.get_or_insert(p.bits) != p.bits {
                    return Err(Error::Contract("per-timestep table mixes bit-widths".into()));
                }
                scale.push(p.scale[0]);
                zero.push(p.zero[0] as f64);
            }
            let s = tape.constant(Tensor::new(vec![ts.len()], scale)?);
            let z = tape.constant(Tensor::new(vec![ts.len()], zero)?);
            tape.fake_quant(x, s, z, bits.unwrap_or(8), Some(0))
        }
    }
}

impl ForwardHooks for QuantHooks<'_> {
    fn weight(&mut self, tape: &mut Tape, layer: &str, w: &Tensor) -> Result<Var> {
        if let Some(q) = self.trainable.and_then(|t| t.entries.get(layer)) {
            let wv = tape.constant(w.clone());
            let s = tape.param(&scale_param(layer), q.scale.clone());
            let z = tape.param(&zero_param(layer), q.zero.clone());
            let z = tape.round_ste(z);
            return tape.fake_quant(wv, s, z, q.bits, q.template.granularity.axis());
        }
        match self.state.weights.get(layer) {
            Some(wq) => Ok(tape.constant(wq.clone())),
            None => Ok(tape.constant(w.clone())),
        }
    }

    fn activation(&mut self, tape: &mut Tape, site: &str, x: Var, ts: &[usize]) -> Result<Var> {
        match self.state.activations.get(site) {
            Some(p) => quantize_activation(tape, x, p, ts),
            None => Ok(x),
        }
    }

    fn temporal_source(&mut self, block: usize, t: usize) -> Result<Option<Tensor>> {
        Ok(self
            .stored
            .and_then(|s| s.get(t.wrapping_sub(1)))
            .and_then(|row| row.get(block))
            .and_then(|f| f.clone()))
    }
}

/// Wraps other hooks and records every block output.
pub struct CaptureBlocks<'h> {
    pub inner: &'h mut dyn ForwardHooks,
    pub outputs: BTreeMap<usize, Tensor>,
}

impl<'h> CaptureBlocks<'h> {
    pub fn new(inner: &'h mut dyn ForwardHooks) -> Self {
        Self {
            inner,
            outputs: BTreeMap::new(),
        }
    }
}

impl ForwardHooks for CaptureBlocks<'_> {
    fn weight(&mut self, tape: &mut Tape, layer: &str, w: &Tensor) -> Result<Var> {
        self.inner.weight(tape, layer, w)
    }

    fn bias(&mut self, tape: &mut Tape, layer: &str, b: &Tensor) -> Result<Var> {
        self.inner.bias(tape, layer, b)
    }

    fn activation(&mut self, tape: &mut Tape, site: &str, x: Var, ts: &[usize]) -> Result<Var> {
        self.inner.activation(tape, site, x, ts)
    }

    fn temporal_source(&mut self, block: usize, t: usize) -> Result<Option<Tensor>> {
        self.inner.temporal_source(block, t)
    }

    fn temporal_feature(&mut self, tape: &mut Tape, block: usize, feat: Var, batch: usize, ts: &[usize]) -> Result<Var> {
        self.inner.temporal_feature(tape, block, feat, batch, ts)
    }

    fn block_output(&mut self, tape: &mut Tape, block: usize, out: Var, ts: &[usize]) -> Result<Var> {
        let out = self.inner.block_output(tape, block, out, ts)?;
        self.outputs.insert(block, tape.value(out).clone());
        Ok(out)
    }
}

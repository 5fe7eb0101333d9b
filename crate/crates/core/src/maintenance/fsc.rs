//! Per-timestep activation calibration of the time branch.

use std::collections::BTreeMap;

use super::hooks::{quantize_activation, QuantState};
use super::tib::TemporalInformationBlock;
use crate::diffusion::features::{capture_with, FeatureTable};
use crate::diffusion::model::{DenoiserGraph, ForwardHooks};
use crate::error::Result;
use crate::quant::{estimate_range, ActParams, Granularity, QuantParamSet, RangeMethod};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Calibrates each time-branch site as activations flow through it, so every
/// site sees upstream activations already quantized.
struct Calibrator<'a> {
    state: &'a QuantState,
    tib: &'a TemporalInformationBlock,
    bits: u32,
    per_timestep: bool,
    found: BTreeMap<String, ActParams>,
}

impl ForwardHooks for Calibrator<'_> {
    fn weight(&mut self, tape: &mut Tape, layer: &str, w: &Tensor) -> Result<Var> {
        self.state.hooks().weight(tape, layer, w)
    }

    fn activation(&mut self, tape: &mut Tape, site: &str, x: Var, ts: &[usize]) -> Result<Var> {
        if !self.tib.contains_site(site) {
            return Ok(x);
        }
        let value = tape.value(x).clone();
        let params = if self.per_timestep {
            let mut table = Vec::with_capacity(ts.len());
            for r in 0..value.rows() {
                let row = Tensor::new(vec![value.cols()], value.row(r).to_vec())?;
                table.push(estimate_range(&[row], RangeMethod::MinMax, self.bits, Granularity::PerTensor, false)?);
            }
            ActParams::PerTimestep(table)
        } else {
            ActParams::Static(estimate_range(
                &[value],
                RangeMethod::MinMax,
                self.bits,
                Granularity::PerTensor,
                false,
            )?)
        };
        let out = quantize_activation(tape, x, &params, ts)?;
        self.found.insert(site.to_string(), params);
        Ok(out)
    }
}

fn calibrate(
    model: &DenoiserGraph,
    tib: &TemporalInformationBlock,
    qset: &QuantParamSet,
    bits: u32,
    per_timestep: bool,
) -> Result<QuantParamSet> {
    let state = QuantState::new(model, qset)?;
    let mut cal = Calibrator {
        state: &state,
        tib,
        bits,
        per_timestep,
        found: BTreeMap::new(),
    };
    capture_with(model, &mut cal)?;
    let mut out = qset.clone();
    out.activations.extend(cal.found);
    Ok(out)
}

/// One min-max parameter set per timestep for every time-branch activation
/// site, estimated on that timestep's activation. Other sites are untouched.
pub fn fsc_calibrate(
    model: &DenoiserGraph,
    tib: &TemporalInformationBlock,
    qset: &QuantParamSet,
    a_bits: u32,
) -> Result<QuantParamSet> {
    calibrate(model, tib, qset, a_bits, true)
}

/// A single min-max set per time-branch site shared by all timesteps,
/// calibrated the same sequential way.
pub fn shared_calibrate(
    model: &DenoiserGraph,
    tib: &TemporalInformationBlock,
    qset: &QuantParamSet,
    a_bits: u32,
) -> Result<QuantParamSet> {
    calibrate(model, tib, qset, a_bits, false)
}

/// Temporal features produced by the quantized time branch.
pub fn quantized_features(model: &DenoiserGraph, qset: &QuantParamSet) -> Result<FeatureTable> {
    let state = QuantState::new(model, qset)?;
    capture_with(model, &mut state.hooks())
}

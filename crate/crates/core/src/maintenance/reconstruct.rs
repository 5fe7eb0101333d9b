//! Gradient-based optimization of weight quantizer parameters: the
//! block-wise baseline and the time-branch reconstruction.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::calib::CalibSet;
use super::hooks::{scale_param, zero_param, CaptureBlocks, QuantHooks, QuantState, StoredFeatures, TrainableQuant, TrainableWeights};
use super::tib::TemporalInformationBlock;
use crate::diffusion::features::capture_temporal_features;
use crate::diffusion::model::{emb_layer, DenoiserGraph, FullPrecision};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::quant::{QuantParamSet, QuantParams, MIN_SCALE};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub iters: usize,
    /// Relative scale step; the zero offset moves by about `10 · lr` codes.
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub initial: f64,
    pub objective: f64,
}

const ZERO_STEP: f64 = 10.0;

/// Minimizes `objective` over the weight quantizers of `layers`, all other
/// quantizers held at their values in `qset`. Returns the best parameters
/// seen; the first evaluation is the starting point, so the result is never
/// worse than the start.
#[allow(clippy::too_many_arguments)]
fn optimize_layers(
    model: &DenoiserGraph,
    qset: &QuantParamSet,
    layers: &[String],
    stored: Option<&StoredFeatures>,
    weights_only: bool,
    cfg: &ReconConfig,
    context: &str,
    objective: &mut dyn FnMut(&mut Tape, &mut QuantHooks) -> Result<Var>,
) -> Result<(BTreeMap<String, QuantParams>, ReconReport)> {
    let mut state = QuantState::new(model, qset)?;
    if weights_only {
        state = state.weights_only();
    }
    let mut trainable = TrainableWeights {
        entries: BTreeMap::new(),
    };
    let mut grad_scale = BTreeMap::new();
    let mut base_lr = BTreeMap::new();
    for layer in layers {
        let p = qset
            .weights
            .get(layer)
            .ok_or_else(|| Error::Assembly(vec![layer.clone()]))?;
        let fan_in = model.param(&crate::diffusion::model::weight_name(layer))?.rows();
        grad_scale.insert(layer.clone(), 1.0 / ((fan_in as f64) * p.levels() as f64).sqrt());
        base_lr.insert(layer.clone(), p.scale.iter().map(|s| s * cfg.lr).collect::<Vec<_>>());
        trainable.entries.insert(layer.clone(), TrainableQuant::from_params(p));
    }

    let snapshot = |t: &TrainableWeights| -> BTreeMap<String, QuantParams> {
        t.entries.iter().map(|(k, q)| (k.clone(), q.to_params())).collect()
    };
    let mut best = snapshot(&trainable);
    let mut initial = f64::NAN;
    let mut best_obj = f64::INFINITY;
    let mut opt = Adam::new();
    for k in 0..=cfg.iters {
        let mut tape = Tape::new();
        let mut hooks = state.hooks().with_trainable(&trainable);
        if let Some(s) = stored {
            hooks = hooks.with_stored(s);
        }
        let loss = objective(&mut tape, &mut hooks)?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Optimization {
                context: context.to_string(),
                detail: format!("objective became {value} at iteration {k}"),
            });
        }
        if k == 0 {
            initial = value;
        }
        if value < best_obj {
            best_obj = value;
            best = snapshot(&trainable);
        }
        if k == cfg.iters {
            break;
        }
        let grads = tape.backward(loss)?;
        let decay = 0.5 * (1.0 + (PI * k as f64 / cfg.iters as f64).cos());
        for (layer, q) in trainable.entries.iter_mut() {
            let levels = q.template.levels() as f64;
            if let Ok(gs) = grads.get(&scale_param(layer)) {
                let gs = gs.scale(grad_scale[layer]);
                let lr: Vec<f64> = base_lr[layer].iter().map(|l| l * decay).collect();
                opt.step(&scale_param(layer), &mut q.scale, &gs, &lr);
            }
            if let Ok(gz) = grads.get(&zero_param(layer)) {
                opt.step(&zero_param(layer), &mut q.zero, gz, &[cfg.lr * ZERO_STEP * decay]);
            }
            for s in q.scale.data_mut() {
                *s = s.max(MIN_SCALE);
            }
            for z in q.zero.data_mut() {
                *z = z.clamp(0.0, levels);
            }
        }
    }
    Ok((
        best,
        ReconReport {
            initial,
            objective: best_obj,
        },
    ))
}

/// `Σ_i ‖g_i(h(t)) − ĝ_i(ĥ(t))‖²` over every timestep, with quantized
/// weights and full-precision activations.
pub fn tiar_objective(model: &DenoiserGraph, qset: &QuantParamSet) -> Result<f64> {
    let state = QuantState::new(model, qset)?.weights_only();
    let fp = fp_blocks(model)?;
    let mut tape = Tape::new();
    let loss = temporal_loss(model, &fp, &mut tape, &mut state.hooks())?;
    tape.value(loss).item()
}

fn fp_blocks(model: &DenoiserGraph) -> Result<Vec<Tensor>> {
    let table = capture_temporal_features(model)?;
    (0..model.config().blocks).map(|i| table.block(i)).collect()
}

fn temporal_loss(model: &DenoiserGraph, fp: &[Tensor], tape: &mut Tape, hooks: &mut QuantHooks) -> Result<Var> {
    let ts: Vec<usize> = (1..=model.config().timesteps).collect();
    let h = model.time_embedding(tape, &ts, hooks)?;
    let mut total: Option<Var> = None;
    for (i, target) in fp.iter().enumerate() {
        let g = model.block_embedding(tape, i, h, &ts, hooks)?;
        let t = tape.constant(target.clone());
        let d = tape.sq_dist(g, t)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, d)?,
            None => d,
        });
    }
    total.ok_or_else(|| Error::Config("model has no blocks".into()))
}

/// Optimizes only the time-branch weight quantizers against the feature
/// matching objective over all timesteps. No sample `x_t` is involved.
pub fn tiar_reconstruct(
    model: &DenoiserGraph,
    tib: &TemporalInformationBlock,
    qset: &QuantParamSet,
    cfg: &ReconConfig,
) -> Result<(QuantParamSet, ReconReport)> {
    let layers: Vec<String> = tib.weight_sites.iter().cloned().collect();
    let fp = fp_blocks(model)?;
    if cfg.iters == 0 {
        let obj = tiar_objective(model, qset)?;
        return Ok((qset.clone(), ReconReport { initial: obj, objective: obj }));
    }
    let (best, report) = optimize_layers(model, qset, &layers, None, true, cfg, "tiar", &mut |tape, hooks| {
        temporal_loss(model, &fp, tape, hooks)
    })?;
    let mut out = qset.clone();
    out.weights.extend(best);
    Ok((out, report))
}

fn run_hooks<'a>(state: &'a QuantState, stored: Option<&'a StoredFeatures>) -> QuantHooks<'a> {
    let h = state.hooks();
    match stored {
        Some(s) => h.with_stored(s),
        None => h,
    }
}

/// Block-wise reconstruction of the residual blocks in forward order. Each
/// block sees the quantized output of its predecessors and is fitted to the
/// full-precision block output on the calibration inputs.
///
/// With `include_emb` the block's embedding layer is optimized together with
/// the block. `stored` supplies cached temporal features where present.
pub fn block_reconstruct(
    model: &DenoiserGraph,
    qset: &QuantParamSet,
    stored: Option<&StoredFeatures>,
    calib: &CalibSet,
    cfg: &ReconConfig,
    include_emb: bool,
) -> Result<(QuantParamSet, Vec<ReconReport>)> {
    if cfg.iters == 0 {
        return Ok((qset.clone(), Vec::new()));
    }
    let mut fp_hooks = FullPrecision;
    let mut capture = CaptureBlocks::new(&mut fp_hooks);
    model.predict(&calib.xt, &calib.ts, &mut capture)?;
    let fp_out = capture.outputs;
    let rows = calib.len().max(1) as f64;

    let mut current = qset.clone();
    let mut reports = Vec::new();
    let mut hq = {
        let state = QuantState::new(model, &current)?;
        let mut tape = Tape::new();
        let x = tape.constant(calib.xt.clone());
        let v = model.stem(&mut tape, x, &calib.ts, &mut run_hooks(&state, stored))?;
        tape.value(v).clone()
    };
    for i in 0..model.config().blocks {
        let mut layers = model.block_layers(i);
        if include_emb {
            layers.push(emb_layer(i));
        }
        let target = fp_out
            .get(&i)
            .ok_or_else(|| Error::Contract(format!("block {i} output not captured")))?;
        let input = hq.clone();
        let (best, report) = optimize_layers(
            model,
            &current,
            &layers,
            stored,
            false,
            cfg,
            &format!("block {i}"),
            &mut |tape, hooks| {
                let x = tape.constant(input.clone());
                let out = model.block(tape, i, x, &calib.ts, hooks)?;
                let t = tape.constant(target.clone());
                let d = tape.sq_dist(out, t)?;
                Ok(tape.scale(d, 1.0 / rows))
            },
        )?;
        current.weights.extend(best);
        reports.push(report);
        let state = QuantState::new(model, &current)?;
        let mut tape = Tape::new();
        let x = tape.constant(hq);
        let v = model.block(&mut tape, i, x, &calib.ts, &mut run_hooks(&state, stored))?;
        hq = tape.value(v).clone();
    }
    Ok((current, reports))
}

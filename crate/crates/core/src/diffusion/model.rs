//! The denoiser: an MLP residual network with a timestep-only branch.
//!
//! The time embedding `h` maps the sinusoidal encoding of `t` through two
//! linear layers. Each residual block `i` owns an embedding layer `g_i`
//! (`silu` then linear) whose output is added to the block's input
//! projection. `h` and every `g_i` together form the time-information block;
//! their outputs depend on `t` alone.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub data_dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub blocks: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden: 64,
            time_dim: 32,
            blocks: 4,
            timesteps: 100,
            beta_start: 1e-3,
            beta_end: 0.12,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.hidden == 0 || self.blocks == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config(format!("time_dim must be even and >= 2, got {}", self.time_dim)));
        }
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end).map(|_| ())
    }
}

/// Interception points of the forward pass. Every method defaults to the
/// full-precision behaviour.
pub trait ForwardHooks {
    /// Weight matrix (`[in, out]`) of `layer` as it enters the graph.
    fn weight(&mut self, tape: &mut Tape, layer: &str, w: &Tensor) -> Result<Var> {
        let _ = layer;
        Ok(tape.constant(w.clone()))
    }

    fn bias(&mut self, tape: &mut Tape, layer: &str, b: &Tensor) -> Result<Var> {
        let _ = layer;
        Ok(tape.constant(b.clone()))
    }

    /// Activation entering `site`; `ts[r]` is the timestep of row `r`.
    fn activation(&mut self, tape: &mut Tape, site: &str, x: Var, ts: &[usize]) -> Result<Var> {
        let _ = (tape, site, ts);
        Ok(x)
    }

    /// A stored `[1, hidden]` replacement for the temporal feature of
    /// `block` at timestep `t`. `None` evaluates the time branch instead.
    fn temporal_source(&mut self, block: usize, t: usize) -> Result<Option<Tensor>> {
        let _ = (block, t);
        Ok(None)
    }

    /// Last look at the temporal feature before it is added into `block`.
    /// `feat` has one row per entry of `ts`; a single row is broadcast over
    /// the `batch`.
    fn temporal_feature(
        &mut self,
        tape: &mut Tape,
        block: usize,
        feat: Var,
        batch: usize,
        ts: &[usize],
    ) -> Result<Var> {
        let _ = (tape, block, batch, ts);
        Ok(feat)
    }

    fn block_output(&mut self, tape: &mut Tape, block: usize, out: Var, ts: &[usize]) -> Result<Var> {
        let _ = (tape, block, ts);
        Ok(out)
    }
}

/// Plain full-precision evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct FullPrecision;

impl ForwardHooks for FullPrecision {}

/// Registers every weight and bias as a tape parameter named after the
/// model parameter, so gradients come back keyed by model names.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainableParams;

impl ForwardHooks for TrainableParams {
    fn weight(&mut self, tape: &mut Tape, layer: &str, w: &Tensor) -> Result<Var> {
        Ok(tape.param(&weight_name(layer), w.clone()))
    }

    fn bias(&mut self, tape: &mut Tape, layer: &str, b: &Tensor) -> Result<Var> {
        Ok(tape.param(&bias_name(layer), b.clone()))
    }
}

pub fn weight_name(layer: &str) -> String {
    format!("{layer}/weight")
}

pub fn bias_name(layer: &str) -> String {
    format!("{layer}/bias")
}

/// Layer names of the time embedding.
pub const TIME_EMBED_LAYERS: [&str; 2] = ["time_embed/lin1", "time_embed/lin2"];

pub fn emb_layer(block: usize) -> String {
    format!("block{block}/emb")
}

/// Output site of `g_i`.
pub fn emb_out_site(block: usize) -> String {
    format!("block{block}/emb/out")
}

/// Input site of a linear layer.
pub fn input_site(layer: &str) -> String {
    format!("{layer}/in")
}

#[derive(Debug)]
pub struct DenoiserGraph {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    temporal_calls: AtomicU64,
}

impl Clone for DenoiserGraph {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            params: self.params.clone(),
            temporal_calls: AtomicU64::new(0),
        }
    }
}

impl PartialEq for DenoiserGraph {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl DenoiserGraph {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (layer, fan_in, fan_out) in layer_shapes(&config) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            let b = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            params.insert(weight_name(&layer), Tensor::new(vec![fan_in, fan_out], w)?);
            params.insert(bias_name(&layer), Tensor::new(vec![fan_out], b)?);
        }
        Ok(Self {
            config,
            params,
            temporal_calls: AtomicU64::new(0),
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut expected = 0;
        for (layer, fan_in, fan_out) in layer_shapes(&config) {
            for (name, shape) in [
                (weight_name(&layer), vec![fan_in, fan_out]),
                (bias_name(&layer), vec![fan_out]),
            ] {
                let t = params.get(&name).ok_or_else(|| Error::MissingParameter(name.clone()))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Shape(format!(
                        "{name}: expected {shape:?}, got {:?}",
                        t.shape()
                    )));
                }
                expected += 1;
            }
        }
        if params.len() != expected {
            return Err(Error::Contract("unexpected extra parameters".into()));
        }
        Ok(Self {
            config,
            params,
            temporal_calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::linear(self.config.timesteps, self.config.beta_start, self.config.beta_end)
            .expect("validated at construction")
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    /// All linear layers in forward order.
    pub fn layers(&self) -> Vec<String> {
        layer_shapes(&self.config).into_iter().map(|(l, _, _)| l).collect()
    }

    /// Layers of the time-information block: the time embedding and every
    /// block's embedding layer.
    pub fn tib_layers(&self) -> Vec<String> {
        let mut out: Vec<String> = TIME_EMBED_LAYERS.iter().map(|s| s.to_string()).collect();
        out.extend((0..self.config.blocks).map(emb_layer));
        out
    }

    /// Layers of residual block `i` outside the time branch.
    pub fn block_layers(&self, block: usize) -> Vec<String> {
        ["in_proj", "lin1", "lin2"]
            .iter()
            .map(|l| format!("block{block}/{l}"))
            .collect()
    }

    /// Every activation site, in forward order.
    pub fn activation_sites(&self) -> Vec<String> {
        let mut out = vec![input_site("stem")];
        out.extend(TIME_EMBED_LAYERS.iter().map(|l| input_site(l)));
        for i in 0..self.config.blocks {
            out.push(input_site(&emb_layer(i)));
            out.push(emb_out_site(i));
            out.extend(self.block_layers(i).iter().map(|l| input_site(l)));
        }
        out.push(input_site("head"));
        out
    }

    /// Activation sites belonging to the time-information block.
    pub fn tib_activation_sites(&self) -> Vec<String> {
        let mut out: Vec<String> = TIME_EMBED_LAYERS.iter().map(|l| input_site(l)).collect();
        for i in 0..self.config.blocks {
            out.push(input_site(&emb_layer(i)));
            out.push(emb_out_site(i));
        }
        out
    }

    /// Number of time-embedding and embedding-layer evaluations since the
    /// last reset.
    pub fn temporal_calls(&self) -> u64 {
        self.temporal_calls.load(Ordering::Relaxed)
    }

    pub fn reset_temporal_calls(&self) {
        self.temporal_calls.store(0, Ordering::Relaxed);
    }

    fn check_ts(&self, ts: &[usize]) -> Result<()> {
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > self.config.timesteps) {
            return Err(Error::Index(format!(
                "timestep {t} outside 1..={}",
                self.config.timesteps
            )));
        }
        Ok(())
    }

    fn linear(&self, tape: &mut Tape, layer: &str, x: Var, hooks: &mut dyn ForwardHooks) -> Result<Var> {
        let w = hooks.weight(tape, layer, self.param(&weight_name(layer))?)?;
        let b = hooks.bias(tape, layer, self.param(&bias_name(layer))?)?;
        tape.linear(x, w, b)
    }

    /// Sinusoidal encoding, one row per timestep.
    pub fn encode_timesteps(&self, ts: &[usize]) -> Tensor {
        let dim = self.config.time_dim;
        let half = dim / 2;
        let mut data = Vec::with_capacity(ts.len() * dim);
        for &t in ts {
            let freqs = (0..half).map(|j| (-(10_000f64.ln()) * j as f64 / half as f64).exp());
            let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
            data.extend(args.iter().map(|a| a.sin()));
            data.extend(args.iter().map(|a| a.cos()));
        }
        Tensor::new(vec![ts.len(), dim], data).expect("rows x time_dim")
    }

    /// `h(t)` for each entry of `ts`.
    pub fn time_embedding(&self, tape: &mut Tape, ts: &[usize], hooks: &mut dyn ForwardHooks) -> Result<Var> {
        self.check_ts(ts)?;
        self.temporal_calls.fetch_add(1, Ordering::Relaxed);
        let [l1, l2] = TIME_EMBED_LAYERS;
        let enc = tape.constant(self.encode_timesteps(ts));
        let a = hooks.activation(tape, &input_site(l1), enc, ts)?;
        let u = self.linear(tape, l1, a, hooks)?;
        let u = tape.silu(u);
        let u = hooks.activation(tape, &input_site(l2), u, ts)?;
        self.linear(tape, l2, u, hooks)
    }

    /// `g_i(h)` where `h` has one row per entry of `ts`.
    pub fn block_embedding(
        &self,
        tape: &mut Tape,
        block: usize,
        h: Var,
        ts: &[usize],
        hooks: &mut dyn ForwardHooks,
    ) -> Result<Var> {
        if block >= self.config.blocks {
            return Err(Error::Index(format!("block {block} of {}", self.config.blocks)));
        }
        self.temporal_calls.fetch_add(1, Ordering::Relaxed);
        let layer = emb_layer(block);
        let a = tape.silu(h);
        let a = hooks.activation(tape, &input_site(&layer), a, ts)?;
        let out = self.linear(tape, &layer, a, hooks)?;
        hooks.activation(tape, &emb_out_site(block), out, ts)
    }

    /// Temporal feature of `block` for the feature rows `ts`, taking stored
    /// replacements where the hooks offer them.
    fn temporal_input(
        &self,
        tape: &mut Tape,
        block: usize,
        ts: &[usize],
        h: &mut Option<Var>,
        hooks: &mut dyn ForwardHooks,
    ) -> Result<Var> {
        let sources = ts
            .iter()
            .map(|&t| hooks.temporal_source(block, t))
            .collect::<Result<Vec<_>>>()?;
        if sources.iter().all(Option::is_none) {
            let hv = match *h {
                Some(v) => v,
                None => {
                    let v = self.time_embedding(tape, ts, hooks)?;
                    *h = Some(v);
                    v
                }
            };
            return self.block_embedding(tape, block, hv, ts, hooks);
        }
        let mut rows = Vec::with_capacity(ts.len());
        for (&t, src) in ts.iter().zip(sources) {
            let row = match src {
                Some(f) => {
                    if f.len() != self.config.hidden {
                        return Err(Error::Shape(format!(
                            "stored feature for block {block}, t={t} has {} values",
                            f.len()
                        )));
                    }
                    tape.constant(f.reshape(vec![1, self.config.hidden])?)
                }
                None => {
                    let hv = self.time_embedding(tape, &[t], hooks)?;
                    self.block_embedding(tape, block, hv, &[t], hooks)?
                }
            };
            rows.push(row);
        }
        if rows.len() == 1 {
            Ok(rows[0])
        } else {
            tape.concat(&rows)
        }
    }

    fn check_input(&self, tape: &Tape, x: Var, ts: &[usize], width: usize) -> Result<usize> {
        let xs = tape.value(x).shape();
        if xs.len() != 2 || xs[1] != width {
            return Err(Error::Shape(format!("input must be [batch, {width}], got {xs:?}")));
        }
        if ts.len() != xs[0] {
            return Err(Error::Shape(format!("{} timesteps for batch of {}", ts.len(), xs[0])));
        }
        self.check_ts(ts)?;
        Ok(xs[0])
    }

    /// Timesteps of the temporal-feature rows: one row when the whole batch
    /// shares a timestep.
    fn feature_rows(ts: &[usize]) -> Vec<usize> {
        if !ts.is_empty() && ts.iter().all(|&t| t == ts[0]) {
            vec![ts[0]]
        } else {
            ts.to_vec()
        }
    }

    pub fn stem(&self, tape: &mut Tape, x: Var, ts: &[usize], hooks: &mut dyn ForwardHooks) -> Result<Var> {
        self.check_input(tape, x, ts, self.config.data_dim)?;
        let a = hooks.activation(tape, &input_site("stem"), x, ts)?;
        self.linear(tape, "stem", a, hooks)
    }

    fn block_body(
        &self,
        tape: &mut Tape,
        block: usize,
        hdn: Var,
        feat: Var,
        ts: &[usize],
        hooks: &mut dyn ForwardHooks,
    ) -> Result<Var> {
        let [in_proj, lin1, lin2]: [String; 3] = self.block_layers(block).try_into().expect("three layers");
        let a = hooks.activation(tape, &input_site(&in_proj), hdn, ts)?;
        let u = self.linear(tape, &in_proj, a, hooks)?;
        let u = tape.add(u, feat)?;
        let u = tape.silu(u);
        let u = hooks.activation(tape, &input_site(&lin1), u, ts)?;
        let v = self.linear(tape, &lin1, u, hooks)?;
        let v = tape.silu(v);
        let v = hooks.activation(tape, &input_site(&lin2), v, ts)?;
        let w = self.linear(tape, &lin2, v, hooks)?;
        let out = tape.add(hdn, w)?;
        hooks.block_output(tape, block, out, ts)
    }

    /// Residual block `block` on its own, including its temporal branch.
    pub fn block(
        &self,
        tape: &mut Tape,
        block: usize,
        hdn: Var,
        ts: &[usize],
        hooks: &mut dyn ForwardHooks,
    ) -> Result<Var> {
        let batch = self.check_input(tape, hdn, ts, self.config.hidden)?;
        if block >= self.config.blocks {
            return Err(Error::Index(format!("block {block} of {}", self.config.blocks)));
        }
        let feat_ts = Self::feature_rows(ts);
        let feat = self.temporal_input(tape, block, &feat_ts, &mut None, hooks)?;
        let feat = hooks.temporal_feature(tape, block, feat, batch, &feat_ts)?;
        self.block_body(tape, block, hdn, feat, ts, hooks)
    }

    pub fn head(&self, tape: &mut Tape, hdn: Var, ts: &[usize], hooks: &mut dyn ForwardHooks) -> Result<Var> {
        let z = tape.silu(hdn);
        let z = hooks.activation(tape, &input_site("head"), z, ts)?;
        self.linear(tape, "head", z, hooks)
    }

    /// Predicted noise for the batch `x` (`[batch, data_dim]`), row `r` at
    /// timestep `ts[r]`.
    ///
    /// When every row shares one timestep the temporal branch runs once and
    /// its output is broadcast.
    pub fn forward(&self, tape: &mut Tape, x: Var, ts: &[usize], hooks: &mut dyn ForwardHooks) -> Result<Var> {
        let batch = self.check_input(tape, x, ts, self.config.data_dim)?;
        let feat_ts = Self::feature_rows(ts);
        let mut hdn = self.stem(tape, x, ts, hooks)?;
        let mut h = None;
        for i in 0..self.config.blocks {
            let feat = self.temporal_input(tape, i, &feat_ts, &mut h, hooks)?;
            let feat = hooks.temporal_feature(tape, i, feat, batch, &feat_ts)?;
            hdn = self.block_body(tape, i, hdn, feat, ts, hooks)?;
        }
        self.head(tape, hdn, ts, hooks)
    }

    /// Evaluates `forward` on a fresh tape.
    pub fn predict(&self, x: &Tensor, ts: &[usize], hooks: &mut dyn ForwardHooks) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv, ts, hooks)?;
        Ok(tape.value(out).clone())
    }

    /// Full-precision noise prediction with every row at timestep `t`.
    pub fn eps(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        self.predict(x, &vec![t; x.rows()], &mut FullPrecision)
    }
}

fn layer_shapes(c: &ModelConfig) -> Vec<(String, usize, usize)> {
    let h = c.hidden;
    let mut out = vec![
        ("stem".to_string(), c.data_dim, h),
        (TIME_EMBED_LAYERS[0].to_string(), c.time_dim, h),
        (TIME_EMBED_LAYERS[1].to_string(), h, h),
    ];
    for i in 0..c.blocks {
        out.push((emb_layer(i), h, h));
        for l in ["in_proj", "lin1", "lin2"] {
            out.push((format!("block{i}/{l}"), h, h));
        }
    }
    out.push(("head".to_string(), h, c.data_dim));
    out
}

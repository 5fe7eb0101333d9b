use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::data::ToyDataset;
use super::model::{DenoiserGraph, FullPrecision, TrainableParams};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::optim::sgd_step;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Size of the fixed held-out batch used to report progress.
    pub heldout: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr: 0.05,
            batch: 64,
            seed: 0,
            heldout: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_heldout_mse: f64,
    pub final_heldout_mse: f64,
    pub steps: usize,
}

/// A batch of noised points with the noise that produced them.
pub struct NoisedBatch {
    pub xt: Tensor,
    pub ts: Vec<usize>,
    pub noise: Tensor,
}

/// Draws `count` rows of `(x_t, t, noise)` with `t` uniform over the
/// schedule.
pub fn draw_batch(
    data: &ToyDataset,
    schedule: &NoiseSchedule,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NoisedBatch> {
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let dim = data.points().cols();
    let mut xt = Vec::with_capacity(count * dim);
    let mut noise = Vec::with_capacity(count * dim);
    let mut ts = Vec::with_capacity(count);
    for _ in 0..count {
        let x0 = data.points().row(rng.gen_range(0..data.len()));
        let t = rng.gen_range(1..=schedule.timesteps());
        let ab = schedule.alpha_bar(t)?;
        for &x in x0 {
            let n: f64 = StandardNormal.sample(rng);
            xt.push(ab.sqrt() * x + (1.0 - ab).sqrt() * n);
            noise.push(n);
        }
        ts.push(t);
    }
    Ok(NoisedBatch {
        xt: Tensor::new(vec![count, dim], xt)?,
        ts,
        noise: Tensor::new(vec![count, dim], noise)?,
    })
}

/// Mean squared noise-prediction error of the full-precision model.
pub fn noise_mse(model: &DenoiserGraph, batch: &NoisedBatch) -> Result<f64> {
    let pred = model.predict(&batch.xt, &batch.ts, &mut FullPrecision)?;
    Ok(pred.sq_dist(&batch.noise)? / pred.len().max(1) as f64)
}

/// Plain SGD on the noise-prediction objective.
pub fn train(mut model: DenoiserGraph, data: &ToyDataset, cfg: &TrainConfig) -> Result<(DenoiserGraph, TrainReport)> {
    if cfg.steps == 0 || cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("training needs steps >= 1, batch >= 1 and lr > 0".into()));
    }
    if data.points().cols() != model.config().data_dim {
        return Err(Error::Shape("dataset and model disagree on data dimension".into()));
    }
    let schedule = model.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut heldout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    heldout_rng.set_stream(1);
    let heldout = draw_batch(data, &schedule, cfg.heldout.max(1), &mut heldout_rng)?;
    let initial = noise_mse(&model, &heldout)?;

    let norm = 1.0 / (cfg.batch * model.config().data_dim) as f64;
    for step in 0..cfg.steps {
        let b = draw_batch(data, &schedule, cfg.batch, &mut rng)?;
        let mut tape = Tape::new();
        let x = tape.constant(b.xt);
        let target = tape.constant(b.noise);
        let pred = model.forward(&mut tape, x, &b.ts, &mut TrainableParams)?;
        let sq = tape.sq_dist(pred, target)?;
        let loss = tape.scale(sq, norm);
        let lv = tape.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::Training {
                step,
                detail: format!("loss became {lv}"),
            });
        }
        let grads = tape.backward(loss)?;
        for (name, g) in grads.iter() {
            sgd_step(model.param_mut(name)?, g, cfg.lr);
        }
    }
    let last = noise_mse(&model, &heldout)?;
    Ok((
        model,
        TrainReport {
            initial_heldout_mse: initial,
            final_heldout_mse: last,
            steps: cfg.steps,
        },
    ))
}

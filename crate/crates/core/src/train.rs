//! Denoising pretraining of the base model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Conditioning, DenoiserModel, ParamGroup};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::par;
use crate::rng::{normal_vec, stream};
use crate::schedule::NoiseSchedule;
use crate::world::Record;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Probability of replacing the context by the null condition.
    pub context_drop: f64,
    /// Learning rate is decayed linearly to this fraction at the end.
    pub final_lr_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            iterations: 4000,
            batch_size: 128,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                learning_rate: 2e-3,
                weight_decay: 0.0,
                clip_norm: Some(10.0),
            },
            context_drop: 0.1,
            final_lr_fraction: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean batch MSE per iteration.
    pub losses: Vec<f64>,
}

const CHUNK: usize = 16;

/// Mean squared noise-prediction error and its gradient over one batch.
fn batch_loss(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    data: &[Record],
    opts: &PretrainOptions,
    iteration: usize,
) -> Result<(f64, Vec<f64>)> {
    let n = opts.batch_size;
    let d = model.data_dim();
    let net = model.net();
    let chunks = n.div_ceil(CHUNK);
    let parts = par::map_indexed(chunks, |c| -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; model.params().len()];
        let mut loss = 0.0;
        for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
            let mut rng = stream(opts.seed, &[0x7A1, iteration as u64, i as u64]);
            let r = &data[rng.random_range(0..data.len())];
            let t = rng.random_range(1..=schedule.num_steps());
            let cond = if rng.random::<f64>() < opts.context_drop {
                Conditioning::Null
            } else {
                Conditioning::Context(r.context)
            };
            let noise = normal_vec(&mut rng, d);
            let zt = schedule.forward_diffuse(&r.x0, t, &noise)?;
            let (eps, cache) = net.forward(cond, &zt, t)?;
            let diff: Vec<f64> = eps.iter().zip(&noise).map(|(a, b)| a - b).collect();
            loss += diff.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let g: Vec<f64> = diff.iter().map(|v| 2.0 * v / (d * n) as f64).collect();
            net.backward(&cache, &g, Some((&mut grad, 1.0)));
        }
        Ok((loss, grad))
    });
    let mut grad = vec![0.0; model.params().len()];
    let mut loss = 0.0;
    for p in parts {
        let (l, g) = p?;
        loss += l;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    Ok((loss / n as f64, grad))
}

/// Trains encoder, null embedding and denoiser on the standard noise
/// prediction objective. On a non-finite loss the model is restored to the
/// last finite parameters and a training error is returned.
pub fn pretrain_denoiser(
    model: &mut DenoiserModel,
    schedule: &NoiseSchedule,
    data: &[Record],
    opts: &PretrainOptions,
) -> Result<PretrainReport> {
    if data.is_empty() {
        return Err(Error::Argument(
            "pretraining needs a nonempty dataset".into(),
        ));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if schedule.num_steps() != model.arch().steps {
        return Err(Error::Config(
            "schedule length differs from the model's step count".into(),
        ));
    }
    if let Some(r) = data
        .iter()
        .find(|r| r.context >= model.num_contexts() || r.x0.len() != model.data_dim())
    {
        return Err(Error::Shape(format!(
            "record for context {} does not fit the model",
            r.context
        )));
    }
    let mask = model.mask(&[
        ParamGroup::Encoder,
        ParamGroup::NullEmbedding,
        ParamGroup::Denoiser,
    ]);
    let mut opt = Optimizer::new(opts.optimizer.clone(), mask);
    let mut losses = Vec::with_capacity(opts.iterations);
    let mut last_finite = model.params().to_vec();
    for it in 0..opts.iterations {
        let frac = it as f64 / opts.iterations.max(1) as f64;
        opt.set_learning_rate(
            opts.optimizer.learning_rate * (1.0 - frac * (1.0 - opts.final_lr_fraction)),
        );
        let (loss, grad) = batch_loss(model, schedule, data, opts, it)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            model.params_mut().copy_from_slice(&last_finite);
            return Err(Error::Training(format!(
                "pretraining loss became non-finite at iteration {it}"
            )));
        }
        losses.push(loss);
        last_finite.copy_from_slice(model.params());
        opt.step(model.params_mut(), &grad);
    }
    if model.params().iter().any(|p| !p.is_finite()) {
        model.params_mut().copy_from_slice(&last_finite);
        return Err(Error::Training(
            "pretraining produced non-finite parameters".into(),
        ));
    }
    Ok(PretrainReport { losses })
}

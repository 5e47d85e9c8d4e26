//! Soft-prefix inversion: optimize the prefix so samples for one context
//! match a fixed target sample under the semantics loss, once per gradient
//! mode, to compare how well each mode optimizes.

use serde::{Deserialize, Serialize};

use crate::adjusted::sample_with_grad;
use crate::error::{Error, Result};
use crate::finetune::GradKind;
use crate::losses::{semantics_loss, Extractors};
use crate::model::{Conditioning, DenoiserModel, ParamGroup};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::par;
use crate::rng::{derive_seed, normal_vec, stream};
use crate::sampler::{sample, SamplerConfig};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionSettings {
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub sampler: SamplerConfig,
    /// Context whose prefix-conditioned samples are optimized.
    pub context: usize,
    /// Context the fixed target sample is drawn from.
    pub target_context: usize,
    pub modes: Vec<GradKind>,
    pub seeds: Vec<u64>,
    /// Fixed noise vectors used to measure loss before and after.
    pub eval_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionTrace {
    pub mode: GradKind,
    pub seed: u64,
    /// Mean batch loss at each iteration.
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Variance of consecutive differences of `losses`.
    pub diff_variance: f64,
}

impl InversionTrace {
    pub fn ratio(&self) -> f64 {
        self.final_loss / self.initial_loss
    }
}

/// Variance of the first differences of a series.
pub fn diff_variance(xs: &[f64]) -> f64 {
    if xs.len() < 3 {
        return 0.0;
    }
    let d: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    let m = d.iter().sum::<f64>() / d.len() as f64;
    d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d.len() as f64
}

/// The fixed target: the base model's sample for `target_context`.
pub fn inversion_target(
    base: &DenoiserModel,
    schedule: &NoiseSchedule,
    settings: &InversionSettings,
) -> Result<Vec<f64>> {
    let z = normal_vec(
        &mut stream(0x7A26E7, &[settings.target_context as u64]),
        base.data_dim(),
    );
    sample(
        &base.net(),
        Conditioning::Context(settings.target_context),
        &z,
        schedule,
        &settings.sampler,
        0x7A26E7,
    )
}

fn eval_loss(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    ex: &Extractors,
    s: &InversionSettings,
    target: &[f64],
) -> Result<f64> {
    let net = model.net();
    let losses = par::map_indexed(s.eval_samples, |i| -> Result<f64> {
        let z = normal_vec(&mut stream(0xE7A1, &[i as u64]), model.data_dim());
        let x = sample(
            &net,
            Conditioning::Context(s.context),
            &z,
            schedule,
            &s.sampler,
            derive_seed(0xE7A1, &[i as u64]),
        )?;
        Ok(semantics_loss(&x, target, ex).0)
    });
    let v: Vec<f64> = losses.into_iter().collect::<Result<_>>()?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// One optimization run of the prefix under one gradient mode.
pub fn invert_prefix(
    base: &DenoiserModel,
    schedule: &NoiseSchedule,
    extractors: &Extractors,
    settings: &InversionSettings,
    mode: GradKind,
    seed: u64,
) -> Result<InversionTrace> {
    if settings.batch_size == 0 || settings.eval_samples == 0 {
        return Err(Error::Config(
            "inversion needs positive batch and evaluation sizes".into(),
        ));
    }
    settings.sampler.validate(schedule)?;
    let target = inversion_target(base, schedule, settings)?;
    let mut model = base.clone();
    let mask = model.mask(&[ParamGroup::Prefix]);
    let mut opt = Optimizer::new(settings.optimizer.clone(), mask);
    let grad_mode = mode.mode(schedule, &settings.sampler)?;
    let cond = Conditioning::Context(settings.context);
    let initial_loss = eval_loss(&model, schedule, extractors, settings, &target)?;
    let mut losses = Vec::with_capacity(settings.iterations);
    for it in 0..settings.iterations {
        let n = settings.batch_size;
        let parts = par::map_indexed(n, |i| -> Result<(f64, Vec<f64>)> {
            let mut rng = stream(seed, &[0x1417, it as u64, i as u64]);
            let z = normal_vec(&mut rng, model.data_dim());
            let gs = sample_with_grad(
                &model,
                cond,
                &z,
                schedule,
                &settings.sampler,
                derive_seed(seed, &[it as u64, i as u64]),
                grad_mode.clone(),
            )?;
            let (l, g) = semantics_loss(&gs.x0, &target, extractors);
            let g: Vec<f64> = g.iter().map(|v| v / n as f64).collect();
            Ok((l, gs.backward(&model, schedule, &g)?))
        });
        let mut grad = vec![0.0; model.params().len()];
        let mut loss = 0.0;
        for p in parts {
            let (l, g) = p?;
            loss += l / n as f64;
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        losses.push(loss);
        if grad.iter().all(|g| g.is_finite()) {
            opt.step(model.params_mut(), &grad);
        }
    }
    let final_loss = eval_loss(&model, schedule, extractors, settings, &target)?;
    Ok(InversionTrace {
        mode,
        seed,
        diff_variance: diff_variance(&losses),
        losses,
        initial_loss,
        final_loss,
    })
}

/// Every configured mode under every configured seed.
pub fn run_inversion_benchmark(
    base: &DenoiserModel,
    schedule: &NoiseSchedule,
    extractors: &Extractors,
    settings: &InversionSettings,
) -> Result<Vec<InversionTrace>> {
    let mut out = Vec::new();
    for &mode in &settings.modes {
        for &seed in &settings.seeds {
            out.push(invert_prefix(
                base, schedule, extractors, settings, mode, seed,
            )?);
        }
    }
    Ok(out)
}

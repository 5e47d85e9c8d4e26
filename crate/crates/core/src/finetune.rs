//! Distributional-alignment finetuning through the sampling chain.
//!
//! Each iteration picks one context, generates a batch from the model being
//! finetuned and from the frozen base on the same initial noise, scores the
//! pair with the total loss and backpropagates through the sampler.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjusted::{sample_with_grad, GradCoefficients, GradMode};
use crate::error::{Error, Result};
use crate::losses::{
    semantic_similarity, total_loss, Extractors, LossBreakdown, LossConfig, LossModels,
    RealismModel,
};
use crate::model::{
    hex_digest, AdapterSpec, AdapterTarget, Conditioning, DenoiserModel, FinetuneTarget,
};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::par;
use crate::rng::{derive_seed, normal_vec, stream};
use crate::sampler::{sample, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::world::{AttributeClassifier, Split, ToyWorldSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradKind {
    Adjusted,
    Naive,
    /// Per-step detach with unit coefficients.
    DetachOnly,
}

impl GradKind {
    pub fn mode(self, schedule: &NoiseSchedule, config: &SamplerConfig) -> Result<GradMode> {
        Ok(match self {
            GradKind::Adjusted => {
                GradMode::Adjusted(GradCoefficients::compute(schedule, &config.timesteps)?)
            }
            GradKind::Naive => GradMode::naive(),
            GradKind::DetachOnly => GradMode::DetachOnly,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyWeight {
    pub family: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSettings {
    pub target: FinetuneTarget,
    pub optimizer: OptimizerConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub families: Vec<FamilyWeight>,
    pub sampler: SamplerConfig,
    pub grad: GradKind,
    pub loss: LossConfig,
    /// Samples per validation context at each checkpoint.
    pub validation_samples: usize,
    /// Minimum mean feature cosine to the frozen model for a checkpoint
    /// to be eligible as best.
    pub semantics_floor: f64,
    pub seed: u64,
}

/// Frozen components shared by finetuning runs.
#[derive(Debug, Clone)]
pub struct FinetuneEnv<'a> {
    pub spec: &'a ToyWorldSpec,
    pub schedule: &'a NoiseSchedule,
    pub classifiers: &'a [AttributeClassifier],
    pub extractors: &'a Extractors,
    pub realism: &'a RealismModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub context: usize,
    pub steps: usize,
    pub loss: LossBreakdown,
    /// Digests of the initial noise fed to the finetuned and the frozen
    /// model; equal when the batch was paired.
    pub noise_digest: String,
    pub frozen_noise_digest: String,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub iteration: usize,
    /// Mean over targets and validation contexts of `sum_k |freq_k - p_k|`
    /// measured with the training classifiers.
    pub target_gap: f64,
    /// Same quantity per family.
    pub family_gap: Vec<f64>,
    pub semantics: f64,
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub iteration: usize,
    pub params: Vec<f64>,
    pub validation: ValidationRecord,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: DenoiserModel,
    pub log: Vec<IterationRecord>,
    pub validations: Vec<ValidationRecord>,
    pub best: Option<Snapshot>,
    /// Set when the run stopped on a non-finite loss; `model` then holds
    /// the last finite parameters.
    pub halted: Option<String>,
}

/// Digest of a batch of initial noise vectors.
pub fn noise_digest(zs: &[Vec<f64>]) -> String {
    let mut h = Sha256::new();
    for z in zs {
        for v in z {
            h.update(v.to_le_bytes());
        }
    }
    hex_digest(&h.finalize())
}

/// Model whose `target` parameters are trainable, built from `base`.
pub fn prepare_model(
    base: &DenoiserModel,
    target: &FinetuneTarget,
    seed: u64,
) -> Result<DenoiserModel> {
    match target {
        FinetuneTarget::LowRankAdapter { rank } => base.with_adapter(
            AdapterSpec {
                rank: *rank,
                targets: vec![AdapterTarget::Encoder, AdapterTarget::DenoiserInput],
            },
            &mut stream(seed, &[0xADA]),
        ),
        _ => Ok(base.clone()),
    }
}

impl FinetuneSettings {
    pub fn validate(&self, env: &FinetuneEnv<'_>) -> Result<()> {
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.families.is_empty()
            || self
                .families
                .iter()
                .any(|f| f.family >= env.spec.config.families.len() || !(f.weight > 0.0))
        {
            return Err(Error::Config(
                "families must name existing families with positive weights".into(),
            ));
        }
        self.sampler.validate(env.schedule)?;
        self.loss.validate(env.spec.data_dim(), env.classifiers)
    }

    fn draw_context<R: Rng>(&self, spec: &ToyWorldSpec, rng: &mut R) -> Result<usize> {
        let total: f64 = self.families.iter().map(|f| f.weight).sum();
        let mut u = rng.random::<f64>() * total;
        let mut family = self.families[self.families.len() - 1].family;
        for f in &self.families {
            if u < f.weight {
                family = f.family;
                break;
            }
            u -= f.weight;
        }
        let ctx = spec.contexts_where(Some(family), Split::Train);
        if ctx.is_empty() {
            return Err(Error::Config(format!(
                "family {family} has no training contexts"
            )));
        }
        Ok(ctx[rng.random_range(0..ctx.len())])
    }

    fn sampler_for<R: Rng>(&self, total: usize, rng: &mut R) -> Result<SamplerConfig> {
        match &self.sampler.step_jitter {
            Some(j) => self
                .sampler
                .with_steps(total, j[rng.random_range(0..j.len())]),
            None => Ok(self.sampler.clone()),
        }
    }
}

/// Frequencies of each target's classes on model samples for one context,
/// plus the mean similarity to the frozen model.
fn validate_context(
    model: &DenoiserModel,
    frozen: &DenoiserModel,
    env: &FinetuneEnv<'_>,
    settings: &FinetuneSettings,
    context: usize,
) -> Result<(Vec<f64>, f64)> {
    let d = model.data_dim();
    let (net, fnet) = (model.net(), frozen.net());
    let n = settings.validation_samples;
    let mut counts: Vec<Vec<usize>> = settings
        .loss
        .targets
        .iter()
        .map(|t| vec![0; t.target.num_classes()])
        .collect();
    let mut sem = 0.0;
    for i in 0..n {
        let z = normal_vec(
            &mut stream(settings.seed, &[0x7A11, context as u64, i as u64]),
            d,
        );
        let x = sample(
            &net,
            Conditioning::Context(context),
            &z,
            env.schedule,
            &settings.sampler,
            0,
        )?;
        let o = sample(
            &fnet,
            Conditioning::Context(context),
            &z,
            env.schedule,
            &settings.sampler,
            0,
        )?;
        sem += semantic_similarity(&x, &o, env.extractors);
        let r: Vec<f64> = settings.loss.region.iter().map(|&j| x[j]).collect();
        for (t, c) in settings.loss.targets.iter().zip(counts.iter_mut()) {
            c[env.classifiers[t.classifier].predict(&r)] += 1;
        }
    }
    let gaps = settings
        .loss
        .targets
        .iter()
        .zip(&counts)
        .map(|(t, c)| {
            t.target
                .probs
                .iter()
                .zip(c)
                .map(|(p, k)| (*k as f64 / n as f64 - p).abs())
                .sum::<f64>()
        })
        .collect();
    Ok((gaps, sem / n as f64))
}

pub fn validate_model(
    model: &DenoiserModel,
    frozen: &DenoiserModel,
    env: &FinetuneEnv<'_>,
    settings: &FinetuneSettings,
    iteration: usize,
) -> Result<ValidationRecord> {
    let mut family_gap = Vec::new();
    let mut all = Vec::new();
    let mut sems = Vec::new();
    for f in &settings.families {
        let ctx = env.spec.contexts_where(Some(f.family), Split::Validation);
        let res: Vec<(Vec<f64>, f64)> =
            par::map_slice(&ctx, |&c| validate_context(model, frozen, env, settings, c))
                .into_iter()
                .collect::<Result<_>>()?;
        let gaps: Vec<f64> = res.iter().flat_map(|(g, _)| g.iter().copied()).collect();
        family_gap.push(if gaps.is_empty() {
            0.0
        } else {
            gaps.iter().sum::<f64>() / gaps.len() as f64
        });
        all.extend(gaps);
        sems.extend(res.iter().map(|(_, s)| *s));
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(ValidationRecord {
        iteration,
        target_gap: mean(&all),
        family_gap,
        semantics: if sems.is_empty() { 1.0 } else { mean(&sems) },
    })
}

/// One finetuning iteration: loss breakdown and parameter gradient.
fn iteration_grad(
    model: &DenoiserModel,
    frozen: &DenoiserModel,
    env: &FinetuneEnv<'_>,
    settings: &FinetuneSettings,
    iteration: usize,
) -> Result<(IterationRecord, Vec<f64>)> {
    let mut rng = stream(settings.seed, &[0xF1, iteration as u64]);
    let context = settings.draw_context(env.spec, &mut rng)?;
    let config = settings.sampler_for(env.schedule.num_steps(), &mut rng)?;
    let mode = settings.grad.mode(env.schedule, &config)?;
    let d = model.data_dim();
    let n = settings.batch_size;
    let zs: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            normal_vec(
                &mut stream(settings.seed, &[0xF2, iteration as u64, i as u64]),
                d,
            )
        })
        .collect();
    let noise_seed = |i: usize| derive_seed(settings.seed, &[0xF3, iteration as u64, i as u64]);
    let cond = Conditioning::Context(context);
    let fnet = frozen.net();
    let frozen_inputs: Vec<Vec<f64>> = zs.clone();
    let os: Vec<Vec<f64>> = par::map_indexed(n, |i| {
        sample(
            &fnet,
            cond,
            &frozen_inputs[i],
            env.schedule,
            &config,
            noise_seed(i),
        )
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let gen = par::map_indexed(n, |i| {
        sample_with_grad(
            model,
            cond,
            &zs[i],
            env.schedule,
            &config,
            noise_seed(i),
            mode.clone(),
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let xs: Vec<Vec<f64>> = gen.iter().map(|g| g.x0.clone()).collect();
    let models = LossModels {
        classifiers: env.classifiers,
        extractors: env.extractors,
        realism: env.realism,
    };
    let out = total_loss(&xs, &os, &settings.loss, &models)?;
    let net = model.net();
    let parts = par::map_indexed(n, |i| -> Result<Vec<f64>> {
        let mut g = vec![0.0; model.params().len()];
        if out.grads[i].iter().any(|v| *v != 0.0) {
            gen[i].backward_merged(&net, env.schedule, &out.grads[i], &mut g)?;
        }
        Ok(g)
    });
    let mut grad = vec![0.0; model.params().len()];
    for p in parts {
        grad.iter_mut().zip(p?).for_each(|(a, b)| *a += b);
    }
    model.pull_back(&mut grad);
    let record = IterationRecord {
        iteration,
        context,
        steps: config.num_steps(),
        loss: out.breakdown,
        noise_digest: noise_digest(&zs),
        frozen_noise_digest: noise_digest(&frozen_inputs),
        grad_norm: 0.0,
    };
    Ok((record, grad))
}

/// Runs the finetuning loop from `base`. `on_checkpoint` receives every
/// validated snapshot, in order.
pub fn finetune(
    base: &DenoiserModel,
    env: &FinetuneEnv<'_>,
    settings: &FinetuneSettings,
    mut on_checkpoint: impl FnMut(&Snapshot) -> Result<()>,
) -> Result<FinetuneOutcome> {
    settings.validate(env)?;
    let frozen = base;
    let mut model = prepare_model(base, &settings.target, settings.seed)?;
    let mask = model.mask(settings.target.groups());
    let mut opt = Optimizer::new(settings.optimizer.clone(), mask.clone());
    let mut log = Vec::with_capacity(settings.iterations);
    let mut validations = Vec::new();
    let mut best: Option<Snapshot> = None;
    let mut halted = None;
    let mut consider = |model: &DenoiserModel,
                        it: usize,
                        validations: &mut Vec<ValidationRecord>,
                        best: &mut Option<Snapshot>|
     -> Result<()> {
        let v = validate_model(model, frozen, env, settings, it)?;
        let snap = Snapshot {
            iteration: it,
            params: model.params().to_vec(),
            validation: v.clone(),
        };
        if v.semantics >= settings.semantics_floor
            && best
                .as_ref()
                .is_none_or(|b| v.target_gap < b.validation.target_gap)
        {
            *best = Some(snap.clone());
        }
        validations.push(v);
        on_checkpoint(&snap)
    };
    consider(&model, 0, &mut validations, &mut best)?;
    for it in 0..settings.iterations {
        let (mut record, grad) = iteration_grad(&model, frozen, env, settings, it)?;
        let gn = grad
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|(g, _)| g * g)
            .sum::<f64>()
            .sqrt();
        if !record.loss.total.is_finite() || !gn.is_finite() {
            halted = Some(format!("non-finite loss at iteration {it}"));
            break;
        }
        record.grad_norm = gn;
        log.push(record);
        let keep = model.params().to_vec();
        opt.step(model.params_mut(), &grad);
        if model.params().iter().any(|p| !p.is_finite()) {
            model.params_mut().copy_from_slice(&keep);
            halted = Some(format!("non-finite parameters after iteration {it}"));
            break;
        }
        if (it + 1) % settings.checkpoint_every == 0 {
            consider(&model, it + 1, &mut validations, &mut best)?;
        }
    }
    Ok(FinetuneOutcome {
        model,
        log,
        validations,
        best,
        halted,
    })
}

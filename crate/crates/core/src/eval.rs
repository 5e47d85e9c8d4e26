//! Sample-based evaluation: per-context attribute frequencies, bias and
//! similarity to a frozen reference model on shared noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{semantic_similarity, Extractors};
use crate::model::{Conditioning, DenoiserModel};
use crate::par;
use crate::rng::{normal_vec, stream};
use crate::sampler::{sample, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::world::{bias_metric, AttributeClassifier, ClassifierRole};

/// Initial noise for sample `i` of context `c` under an evaluation seed.
pub fn eval_noise(seed: u64, context: usize, i: usize, dim: usize) -> Vec<f64> {
    normal_vec(&mut stream(seed, &[0xE7A1, context as u64, i as u64]), dim)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextReport {
    pub context: usize,
    pub freqs: Vec<f64>,
    pub bias: f64,
    /// Mean feature cosine to the frozen model's samples, when given.
    pub semantics: Option<f64>,
    /// Fraction of samples where the training classifier disagrees with the
    /// evaluation classifier, when given.
    pub disagreement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub contexts: Vec<ContextReport>,
    pub bias_mean: f64,
    pub bias_std: f64,
    /// Per-class frequency mean and std across contexts.
    pub freq_mean: Vec<f64>,
    pub freq_std: Vec<f64>,
    pub semantics_mean: Option<f64>,
    pub disagreement_mean: Option<f64>,
    pub n_per_context: usize,
    pub seed: u64,
}

impl EvalReport {
    /// Mean and std across contexts of the frequency of `class`.
    pub fn class_frequency(&self, class: usize) -> (f64, f64) {
        (self.freq_mean[class], self.freq_std[class])
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

pub struct EvalSetup<'a> {
    pub schedule: &'a NoiseSchedule,
    pub sampler: &'a SamplerConfig,
    pub classifier: &'a AttributeClassifier,
    pub region: &'a [usize],
    pub n_per_context: usize,
    pub seed: u64,
    /// Frozen reference and the feature maps used for similarity.
    pub frozen: Option<(&'a DenoiserModel, &'a Extractors)>,
    pub training_classifier: Option<&'a AttributeClassifier>,
}

/// Generates `n_per_context` samples per context and scores them with the
/// evaluation classifier.
pub fn evaluate_model(
    model: &DenoiserModel,
    contexts: &[usize],
    setup: &EvalSetup<'_>,
) -> Result<EvalReport> {
    if contexts.is_empty() {
        return Err(Error::Argument(
            "evaluation needs at least one context".into(),
        ));
    }
    if setup.classifier.descriptor.role != ClassifierRole::Evaluation {
        return Err(Error::Argument(
            "evaluation requires an evaluation-role classifier".into(),
        ));
    }
    if setup.n_per_context == 0 {
        return Err(Error::Argument("n_per_context must be positive".into()));
    }
    let d = model.data_dim();
    let k = setup.classifier.num_classes();
    let n = setup.n_per_context;
    let region = |x: &[f64]| -> Vec<f64> { setup.region.iter().map(|&i| x[i]).collect() };
    let results = par::map_slice(contexts, |&c| -> Result<ContextReport> {
        let net = model.net();
        let frozen_net = setup.frozen.map(|(f, _)| f.net());
        let mut counts = vec![0usize; k];
        let mut sem = 0.0;
        let mut dis = 0usize;
        for i in 0..n {
            let z = eval_noise(setup.seed, c, i, d);
            let noise_seed = crate::rng::derive_seed(setup.seed, &[0x5EED, c as u64, i as u64]);
            let x = sample(
                &net,
                Conditioning::Context(c),
                &z,
                setup.schedule,
                setup.sampler,
                noise_seed,
            )?;
            let r = region(&x);
            let cls = setup.classifier.predict(&r);
            counts[cls] += 1;
            if let Some(t) = setup.training_classifier {
                if t.predict(&r) != cls {
                    dis += 1;
                }
            }
            if let (Some(fnet), Some((_, ex))) = (&frozen_net, setup.frozen) {
                let o = sample(
                    fnet,
                    Conditioning::Context(c),
                    &z,
                    setup.schedule,
                    setup.sampler,
                    noise_seed,
                )?;
                sem += semantic_similarity(&x, &o, ex);
            }
        }
        let freqs: Vec<f64> = counts.iter().map(|v| *v as f64 / n as f64).collect();
        Ok(ContextReport {
            context: c,
            bias: bias_metric(&freqs)?,
            freqs,
            semantics: setup.frozen.map(|_| sem / n as f64),
            disagreement: setup.training_classifier.map(|_| dis as f64 / n as f64),
        })
    });
    let contexts: Vec<ContextReport> = results.into_iter().collect::<Result<_>>()?;
    let (bias_mean, bias_std) = mean_std(&contexts.iter().map(|c| c.bias).collect::<Vec<_>>());
    let (freq_mean, freq_std): (Vec<f64>, Vec<f64>) = (0..k)
        .map(|j| mean_std(&contexts.iter().map(|c| c.freqs[j]).collect::<Vec<_>>()))
        .unzip();
    let semantics_mean = setup.frozen.map(|_| {
        contexts.iter().map(|c| c.semantics.unwrap()).sum::<f64>() / contexts.len() as f64
    });
    let disagreement_mean = setup.training_classifier.map(|_| {
        contexts
            .iter()
            .map(|c| c.disagreement.unwrap())
            .sum::<f64>()
            / contexts.len() as f64
    });
    Ok(EvalReport {
        contexts,
        bias_mean,
        bias_std,
        freq_mean,
        freq_std,
        semantics_mean,
        disagreement_mean,
        n_per_context: n,
        seed: setup.seed,
    })
}

//! Synthetic attribute-labelled data with a controllable bias per context.
//!
//! Each context has a descriptor vector ("token"). A sample for context
//! `c` with attribute classes `a` is `center(c, a) + noise`, where the
//! context part of the center is a fixed linear image of the token and the
//! attribute part sets dedicated region coordinates to `+-attribute_scale`
//! (one coordinate per bit of the class index). Attribute signal therefore
//! lives only on the region; context signal lives everywhere else.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax, softmax, Activation, Mlp, MlpCache};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::par;
use crate::rng::{normal_vec, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub classes: usize,
}

/// A group of contexts sharing a token distribution and a bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub name: String,
    pub train: usize,
    pub validation: usize,
    pub heldout: usize,
    /// One class distribution per attribute; the joint is their product.
    pub marginals: Vec<Vec<f64>>,
    /// Shift of this family's token mean along the first token axis.
    #[serde(default)]
    pub token_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub data_dim: usize,
    pub token_dim: usize,
    /// Number of leading coordinates forming the region; `None` means
    /// `ceil(data_dim / 2)`.
    #[serde(default)]
    pub region_dims: Option<usize>,
    pub attributes: Vec<AttributeSpec>,
    pub families: Vec<FamilySpec>,
    pub noise_scale: f64,
    pub attribute_scale: f64,
    pub context_scale: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            data_dim: 8,
            token_dim: 4,
            region_dims: None,
            attributes: vec![AttributeSpec {
                name: "gender".into(),
                classes: 2,
            }],
            families: vec![FamilySpec {
                name: "occupations".into(),
                train: 20,
                validation: 5,
                heldout: 5,
                marginals: vec![vec![0.9, 0.1]],
                token_offset: 0.0,
            }],
            noise_scale: 0.15,
            attribute_scale: 1.0,
            context_scale: 1.0,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextInfo {
    pub family: usize,
    pub split: Split,
    pub token: Vec<f64>,
    /// Joint attribute distribution, row-major over attribute order.
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyWorldSpec {
    pub config: WorldConfig,
    pub contexts: Vec<ContextInfo>,
    pub region_mask: Vec<usize>,
    /// Region coordinates carrying each attribute's bits.
    pub attribute_coords: Vec<Vec<usize>>,
    /// `data_dim x token_dim`, row-major.
    pub context_map: Vec<f64>,
}

fn bits_for(k: usize) -> usize {
    let mut b = 0;
    while (1usize << b) < k {
        b += 1;
    }
    b.max(1)
}

/// Row-major index of a combination of attribute classes.
pub fn joint_index(classes: &[usize], labels: &[usize]) -> usize {
    labels
        .iter()
        .zip(classes)
        .fold(0, |acc, (l, k)| acc * k + l)
}

/// Inverse of [`joint_index`].
pub fn split_index(classes: &[usize], mut idx: usize) -> Vec<usize> {
    let mut out = vec![0; classes.len()];
    for (o, k) in out.iter_mut().zip(classes).rev() {
        *o = idx % k;
        idx /= k;
    }
    out
}

fn check_probs(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|v| !(*v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "{what} is not a probability vector: {p:?}"
        )));
    }
    Ok(())
}

impl ToyWorldSpec {
    pub fn new(config: WorldConfig) -> Result<Self> {
        let d = config.data_dim;
        if d == 0 || config.token_dim == 0 {
            return Err(Error::Config("world dimensions must be positive".into()));
        }
        if config.attributes.is_empty() || config.attributes.iter().any(|a| a.classes < 2) {
            return Err(Error::Config(
                "every attribute needs at least two classes".into(),
            ));
        }
        let region = config.region_dims.unwrap_or(d.div_ceil(2));
        if region == 0 || region > d {
            return Err(Error::Config(format!(
                "region of {region} coordinates does not fit in {d}"
            )));
        }
        let region_mask: Vec<usize> = (0..region).collect();
        let mut attribute_coords = Vec::new();
        let mut at = 0;
        for a in &config.attributes {
            let b = bits_for(a.classes);
            attribute_coords.push((at..at + b).collect::<Vec<_>>());
            at += b;
        }
        if at > region {
            return Err(Error::Config(format!(
                "attributes need {at} region coordinates, region has {region}"
            )));
        }
        if config.noise_scale < 0.0 || 2.0 * config.attribute_scale < 4.0 * config.noise_scale {
            return Err(Error::Config(
                "attribute modes must be separated by at least 4 noise standard deviations".into(),
            ));
        }
        if config.families.is_empty() {
            return Err(Error::Config(
                "world needs at least one context family".into(),
            ));
        }
        let mut rng = stream(config.seed, &[0x3011]);
        let scale = config.context_scale / (config.token_dim as f64).sqrt();
        let mut context_map: Vec<f64> = normal_vec(&mut rng, d * config.token_dim)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        for coords in &attribute_coords {
            for &c in coords {
                context_map[c * config.token_dim..(c + 1) * config.token_dim]
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
            }
        }
        let mut contexts = Vec::new();
        for (f, fam) in config.families.iter().enumerate() {
            if fam.marginals.len() != config.attributes.len() {
                return Err(Error::Config(format!(
                    "family {} needs one marginal per attribute",
                    fam.name
                )));
            }
            for (m, a) in fam.marginals.iter().zip(&config.attributes) {
                if m.len() != a.classes {
                    return Err(Error::Config(format!(
                        "marginal for {} has {} entries",
                        a.name,
                        m.len()
                    )));
                }
                check_probs(m, &format!("marginal for {}", a.name))?;
            }
            let classes: Vec<usize> = config.attributes.iter().map(|a| a.classes).collect();
            let total: usize = classes.iter().product();
            let bias: Vec<f64> = (0..total)
                .map(|j| {
                    split_index(&classes, j)
                        .iter()
                        .zip(&fam.marginals)
                        .map(|(l, m)| m[*l])
                        .product()
                })
                .collect();
            let splits = std::iter::repeat_n(Split::Train, fam.train)
                .chain(std::iter::repeat_n(Split::Validation, fam.validation))
                .chain(std::iter::repeat_n(Split::Heldout, fam.heldout));
            for split in splits {
                let mut token = normal_vec(&mut rng, config.token_dim);
                token[0] += fam.token_offset;
                contexts.push(ContextInfo {
                    family: f,
                    split,
                    token,
                    bias: bias.clone(),
                });
            }
        }
        Ok(Self {
            config,
            contexts,
            region_mask,
            attribute_coords,
            context_map,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    pub fn classes(&self) -> Vec<usize> {
        self.config.attributes.iter().map(|a| a.classes).collect()
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.config
            .attributes
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| Error::Config(format!("unknown attribute {name}")))
    }

    pub fn tokens(&self) -> Vec<Vec<f64>> {
        self.contexts.iter().map(|c| c.token.clone()).collect()
    }

    pub fn contexts_where(&self, family: Option<usize>, split: Split) -> Vec<usize> {
        (0..self.contexts.len())
            .filter(|&i| {
                self.contexts[i].split == split
                    && family.is_none_or(|f| self.contexts[i].family == f)
            })
            .collect()
    }

    pub fn region(&self, x: &[f64]) -> Vec<f64> {
        self.region_mask.iter().map(|&i| x[i]).collect()
    }

    pub fn mode_center(&self, context: usize, labels: &[usize]) -> Vec<f64> {
        let (d, f) = (self.config.data_dim, self.config.token_dim);
        let token = &self.contexts[context].token;
        let mut x: Vec<f64> = (0..d)
            .map(|i| crate::nn::dot(&self.context_map[i * f..(i + 1) * f], token))
            .collect();
        for (coords, &label) in self.attribute_coords.iter().zip(labels) {
            for (b, &c) in coords.iter().enumerate() {
                let bit = (label >> b) & 1;
                x[c] = if bit == 1 {
                    self.config.attribute_scale
                } else {
                    -self.config.attribute_scale
                };
            }
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub x0: Vec<f64>,
    pub context: usize,
    pub labels: Vec<usize>,
}

/// Draws `n` records with contexts uniform over `contexts`.
pub fn make_world(
    spec: &ToyWorldSpec,
    contexts: &[usize],
    n: usize,
    seed: u64,
) -> Result<Vec<Record>> {
    if contexts.is_empty() {
        return Err(Error::Argument("no contexts to sample from".into()));
    }
    if let Some(c) = contexts.iter().find(|c| **c >= spec.contexts.len()) {
        return Err(Error::Index(format!(
            "context {c} of {}",
            spec.contexts.len()
        )));
    }
    let classes = spec.classes();
    Ok(par::map_indexed(n, |i| {
        let mut rng = stream(seed, &[0x4D4B, i as u64]);
        let context = contexts[rng.random_range(0..contexts.len())];
        let u: f64 = rng.random();
        let bias = &spec.contexts[context].bias;
        let mut acc = 0.0;
        let mut joint = bias.len() - 1;
        for (j, p) in bias.iter().enumerate() {
            acc += p;
            if u < acc {
                joint = j;
                break;
            }
        }
        let labels = split_index(&classes, joint);
        let noise = normal_vec(&mut rng, spec.data_dim());
        let x0 = spec
            .mode_center(context, &labels)
            .iter()
            .zip(noise)
            .map(|(c, e)| c + spec.config.noise_scale * e)
            .collect();
        Record {
            x0,
            context,
            labels,
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierRole {
    Training,
    Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierDescriptor {
    pub role: ClassifierRole,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl ClassifierDescriptor {
    pub fn for_role(role: ClassifierRole, seed: u64) -> Self {
        match role {
            ClassifierRole::Training => Self {
                role,
                seed,
                hidden: vec![32],
                activation: Activation::Tanh,
            },
            ClassifierRole::Evaluation => Self {
                role,
                seed: seed ^ 0xE7A1,
                hidden: vec![24, 24],
                activation: Activation::Silu,
            },
        }
    }
}

/// Predicts the class of one attribute, or of the product of several
/// attributes (row-major joint index), from the region slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeClassifier {
    pub attributes: Vec<usize>,
    pub classes: Vec<usize>,
    pub descriptor: ClassifierDescriptor,
    pub net: Mlp,
    pub accuracy: f64,
}

impl AttributeClassifier {
    pub fn num_classes(&self) -> usize {
        self.classes.iter().product()
    }

    pub fn label_of(&self, record: &Record) -> usize {
        let labels: Vec<usize> = self.attributes.iter().map(|&a| record.labels[a]).collect();
        joint_index(&self.classes, &labels)
    }

    pub fn logits(&self, region: &[f64]) -> Vec<f64> {
        self.net.apply(region)
    }

    pub fn forward(&self, region: &[f64]) -> (Vec<f64>, MlpCache) {
        self.net.forward(region)
    }

    pub fn input_grad(&self, cache: &MlpCache, g_logits: &[f64]) -> Vec<f64> {
        self.net.input_grad(cache, g_logits)
    }

    pub fn probs(&self, region: &[f64]) -> Vec<f64> {
        softmax(&self.logits(region))
    }

    pub fn predict(&self, region: &[f64]) -> usize {
        argmax(&self.logits(region))
    }

    pub fn accuracy_on(&self, spec: &ToyWorldSpec, data: &[Record]) -> f64 {
        let hits = data
            .iter()
            .filter(|r| self.predict(&spec.region(&r.x0)) == self.label_of(r))
            .count();
        hits as f64 / data.len() as f64
    }
}

pub const CLASSIFIER_MIN_ACCURACY: f64 = 0.99;

/// Trains a classifier for `attributes` on `data` and checks it on fresh
/// held-out records. Parameters are fixed afterwards.
pub fn train_classifier(
    spec: &ToyWorldSpec,
    data: &[Record],
    attributes: &[usize],
    role: ClassifierRole,
    seed: u64,
) -> Result<AttributeClassifier> {
    if data.is_empty() {
        return Err(Error::Argument("classifier needs labelled data".into()));
    }
    if attributes.is_empty()
        || attributes
            .iter()
            .any(|a| *a >= spec.config.attributes.len())
    {
        return Err(Error::Argument("invalid attribute selection".into()));
    }
    let all = spec.classes();
    let classes: Vec<usize> = attributes.iter().map(|&a| all[a]).collect();
    let k: usize = classes.iter().product();
    let descriptor = ClassifierDescriptor::for_role(role, seed);
    let mut widths = vec![spec.region_mask.len()];
    widths.extend(&descriptor.hidden);
    widths.push(k);
    let mut rng = stream(descriptor.seed, &[0xC1A5]);
    let net = Mlp::random(&widths, descriptor.activation, &mut rng);
    let mut clf = AttributeClassifier {
        attributes: attributes.to_vec(),
        classes,
        descriptor,
        net,
        accuracy: 0.0,
    };
    let mut opt = Optimizer::new(
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            clip_norm: None,
        },
        vec![true; clf.net.params.len()],
    );
    let batch = 64.min(data.len());
    let iters = 1500;
    for it in 0..iters {
        let mut grad = vec![0.0; clf.net.params.len()];
        for _ in 0..batch {
            let r = &data[rng.random_range(0..data.len())];
            // small input jitter widens the margin around each mode
            let mut region = spec.region(&r.x0);
            region
                .iter_mut()
                .for_each(|v| *v += 0.1 * crate::rng::normal_vec(&mut rng, 1)[0]);
            let (logits, cache) = clf.net.forward(&region);
            let mut g = softmax(&logits);
            g[clf.label_of(r)] -= 1.0;
            clf.net.layout.backward(
                &clf.net.params,
                &cache,
                &g,
                Some((&mut grad, 1.0 / batch as f64)),
            );
        }
        let _ = it;
        opt.step(&mut clf.net.params, &grad);
    }
    let heldout_contexts: Vec<usize> = (0..spec.contexts.len()).collect();
    let check = make_world(spec, &heldout_contexts, 2000, seed ^ 0xACC)?;
    clf.accuracy = clf.accuracy_on(spec, &check);
    if clf.accuracy < CLASSIFIER_MIN_ACCURACY {
        return Err(Error::Training(format!(
            "classifier accuracy {} below {}",
            clf.accuracy, CLASSIFIER_MIN_ACCURACY
        )));
    }
    Ok(clf)
}

/// Mean absolute pairwise difference of group frequencies.
pub fn bias_metric(freqs: &[f64]) -> Result<f64> {
    let k = freqs.len();
    if k < 2 {
        return Err(Error::Argument("bias needs at least two groups".into()));
    }
    if freqs.iter().any(|f| !(*f >= 0.0)) || freqs.iter().sum::<f64>() > 1.0 + 1e-9 {
        return Err(Error::Argument(format!(
            "invalid group frequencies {freqs:?}"
        )));
    }
    let mut acc = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            acc += (freqs[i] - freqs[j]).abs();
        }
    }
    Ok(acc / (k * (k - 1) / 2) as f64)
}

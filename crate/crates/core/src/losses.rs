//! Distributional alignment loss, semantics and realism regularizers, and
//! their weighted combination. Every loss returns its gradient with
//! respect to the generated samples so it can be fed to the sampling-chain
//! backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax, dot, norm, softmax, Activation, Mlp};
use crate::ot::{expected_ot_targets, OtMethod, OtTargetBatch, TargetDistribution};
use crate::rng::stream;
use crate::world::AttributeClassifier;

/// `(1/N) sum_i 1[c_i >= C] CE(softmax(logits_i), y_i)` and its gradient
/// with respect to the logits. Targets are constants.
pub fn alignment_loss(
    logits: &[Vec<f64>],
    targets: &OtTargetBatch,
    threshold: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = logits.len();
    if n == 0 || targets.y.len() != n || targets.c.len() != n {
        return Err(Error::Shape(format!(
            "{n} logit rows for {} targets",
            targets.y.len()
        )));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(n);
    for (i, l) in logits.iter().enumerate() {
        if l.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("non-finite logits for sample {i}")));
        }
        if targets.y[i] >= l.len() {
            return Err(Error::Shape(format!(
                "target class {} with {} logits",
                targets.y[i],
                l.len()
            )));
        }
        if targets.c[i] < threshold {
            grads.push(vec![0.0; l.len()]);
            continue;
        }
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - l[targets.y[i]];
        let mut g = softmax(l);
        g[targets.y[i]] -= 1.0;
        g.iter_mut().for_each(|v| *v /= n as f64);
        grads.push(g);
    }
    Ok((loss / n as f64, grads))
}

/// `1 - cos(a, b)` and its gradient with respect to `a`. A zero-norm
/// vector gives dissimilarity 1 with zero gradient.
pub fn cosine_dissimilarity(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return (1.0, vec![0.0; a.len()]);
    }
    let cos = dot(a, b) / (na * nb);
    let g = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| -(bi / (na * nb) - cos * ai / (na * na)))
        .collect();
    // rounding can push |cos| a hair past 1
    (1.0 - cos.clamp(-1.0, 1.0), g)
}

/// Frozen random feature maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extractors {
    pub views: Vec<Mlp>,
}

impl Extractors {
    /// Two independent views of the full sample.
    pub fn semantic(data_dim: usize, seed: u64) -> Self {
        let a = Mlp::random_with_bias(
            &[data_dim, 32, 16],
            Activation::Tanh,
            0.5,
            &mut stream(seed, &[0x5E1]),
        );
        let b = Mlp::random_with_bias(
            &[data_dim, 24, 24, 16],
            Activation::Silu,
            0.5,
            &mut stream(seed, &[0x5E2]),
        );
        Self { views: vec![a, b] }
    }
}

/// `sum_views (1 - cos(f(x), f(o)))` and its gradient with respect to `x`.
pub fn semantics_loss(x: &[f64], o: &[f64], extractors: &Extractors) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; x.len()];
    for f in &extractors.views {
        let (fx, cache) = f.forward(x);
        let fo = f.apply(o);
        let (l, g) = cosine_dissimilarity(&fx, &fo);
        loss += l;
        grad.iter_mut()
            .zip(f.input_grad(&cache, &g))
            .for_each(|(a, b)| *a += b);
    }
    (loss, grad)
}

/// Mean feature cosine between `x` and `o` over the views.
pub fn semantic_similarity(x: &[f64], o: &[f64], extractors: &Extractors) -> f64 {
    1.0 - semantics_loss(x, o, extractors).0 / extractors.views.len() as f64
}

/// Frozen region embedding with a reference set of embedded real regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealismModel {
    pub embed: Mlp,
    pub references: Vec<Vec<f64>>,
}

impl RealismModel {
    pub fn new(embed: Mlp, reference_regions: &[Vec<f64>]) -> Result<Self> {
        if reference_regions.is_empty() {
            return Err(Error::Config("realism reference set is empty".into()));
        }
        let references = reference_regions.iter().map(|r| embed.apply(r)).collect();
        Ok(Self { embed, references })
    }

    pub fn random(region_dim: usize, reference_regions: &[Vec<f64>], seed: u64) -> Result<Self> {
        let embed = Mlp::random_with_bias(
            &[region_dim, 32, 16],
            Activation::Tanh,
            0.5,
            &mut stream(seed, &[0xFACE]),
        );
        Self::new(embed, reference_regions)
    }
}

/// `1 - max_F cos(embed(region), embed(F))` and its gradient with respect
/// to the region slice.
pub fn realism_loss(region: &[f64], realism: &RealismModel) -> (f64, Vec<f64>) {
    let (e, cache) = realism.embed.forward(region);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for r in &realism.references {
        let (l, g) = cosine_dissimilarity(&e, r);
        if best.as_ref().is_none_or(|(b, _)| l < *b) {
            best = Some((l, g));
        }
    }
    let (l, g) = best.expect("reference set is nonempty");
    (l, realism.embed.input_grad(&cache, &g))
}

/// One alignment objective: a classifier, its target distribution and an
/// optional conditioning classifier whose frozen-model predictions
/// partition the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignTarget {
    pub classifier: usize,
    pub target: TargetDistribution,
    #[serde(default)]
    pub conditional_on: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub confidence_threshold: f64,
    pub lambda_face: f64,
    pub lambda_img: [f64; 3],
    pub region: Vec<usize>,
    pub targets: Vec<AlignTarget>,
    pub ot_method: OtMethod,
}

impl LossConfig {
    /// Defaults for a uniform single-attribute target.
    pub fn uniform(classifier: usize, classes: usize, region: Vec<usize>) -> Self {
        Self {
            confidence_threshold: 0.8,
            lambda_face: 1.0,
            lambda_img: [8.0, 1.6, 0.32],
            region,
            targets: vec![AlignTarget {
                classifier,
                target: TargetDistribution::uniform(classes),
                conditional_on: None,
            }],
            ot_method: OtMethod::ExactEnumeration,
        }
    }

    /// Non-fatal configuration remarks.
    pub fn warnings(&self) -> Vec<String> {
        let [a, b, c] = self.lambda_img;
        let mut w = Vec::new();
        if !(a >= b && b >= c && c >= 0.0) {
            w.push(format!(
                "lambda_img weights {:?} are not non-increasing",
                self.lambda_img
            ));
        }
        w
    }

    pub fn validate(&self, data_dim: usize, classifiers: &[AttributeClassifier]) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::Config(
                "confidence_threshold must lie in [0, 1]".into(),
            ));
        }
        if self.lambda_face < 0.0 || self.lambda_img.iter().any(|l| *l < 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.region.iter().any(|r| *r >= data_dim) {
            return Err(Error::Config("region index outside the sample".into()));
        }
        for t in &self.targets {
            let clf = classifiers
                .get(t.classifier)
                .ok_or_else(|| Error::Config("unknown target classifier".into()))?;
            if clf.num_classes() != t.target.num_classes() {
                return Err(Error::Config(format!(
                    "target has {} classes, classifier predicts {}",
                    t.target.num_classes(),
                    clf.num_classes()
                )));
            }
            if t.conditional_on.is_some_and(|c| c >= classifiers.len()) {
                return Err(Error::Config("unknown conditioning classifier".into()));
            }
        }
        Ok(())
    }
}

/// Per-coordinate semantics weights: uniform `lambda_1` when the target
/// class agrees with the frozen sample's class, otherwise `lambda_2` off
/// the region and `lambda_3` on it.
pub fn dynamic_weights(
    agree: bool,
    region: &[usize],
    data_dim: usize,
    lambda_img: [f64; 3],
) -> Vec<f64> {
    if agree {
        return vec![lambda_img[0]; data_dim];
    }
    let mut w = vec![lambda_img[1]; data_dim];
    for &r in region {
        w[r] = lambda_img[2];
    }
    w
}

/// Semantics loss under a weight map: coordinates sharing a weight are
/// compared as one masked view (others zeroed), scaled by that weight.
pub fn weighted_semantics_loss(
    x: &[f64],
    o: &[f64],
    weights: &[f64],
    extractors: &Extractors,
) -> (f64, Vec<f64>) {
    let mut levels: Vec<f64> = Vec::new();
    for w in weights {
        if !levels.contains(w) {
            levels.push(*w);
        }
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; x.len()];
    for lvl in levels {
        if lvl == 0.0 {
            continue;
        }
        let keep: Vec<bool> = weights.iter().map(|w| *w == lvl).collect();
        let mask = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .zip(&keep)
                .map(|(a, k)| if *k { *a } else { 0.0 })
                .collect()
        };
        let (l, g) = if keep.iter().all(|k| *k) {
            semantics_loss(x, o, extractors)
        } else {
            semantics_loss(&mask(x), &mask(o), extractors)
        };
        loss += lvl * l;
        for ((gi, k), v) in grad.iter_mut().zip(&keep).zip(g) {
            if *k {
                *gi += lvl * v;
            }
        }
    }
    (loss, grad)
}

/// Frozen components the loss is evaluated with.
#[derive(Debug, Clone)]
pub struct LossModels<'a> {
    pub classifiers: &'a [AttributeClassifier],
    pub extractors: &'a Extractors,
    pub realism: &'a RealismModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub align: f64,
    pub img: f64,
    pub face: f64,
    /// Samples whose targets all agree with the frozen sample's classes.
    pub agree: usize,
    /// Samples with at least one active alignment term.
    pub active: usize,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    /// `dL/dx_i` for every sample.
    pub grads: Vec<Vec<f64>>,
    pub targets: Vec<OtTargetBatch>,
}

fn region_of(x: &[f64], region: &[usize]) -> Vec<f64> {
    region.iter().map(|&i| x[i]).collect()
}

/// Expected OT targets for one objective, computed independently inside
/// each partition when conditioning is requested.
fn targets_for(
    probs: &[Vec<f64>],
    target: &AlignTarget,
    partition: Option<&[usize]>,
    method: OtMethod,
) -> Result<OtTargetBatch> {
    let Some(groups) = partition else {
        return expected_ot_targets(probs, &target.target, method);
    };
    let n = probs.len();
    let k = target.target.num_classes();
    let mut out = OtTargetBatch {
        q: vec![vec![0.0; k]; n],
        y: vec![0; n],
        c: vec![0.0; n],
        method,
    };
    let mut labels: Vec<usize> = groups.to_vec();
    labels.sort_unstable();
    labels.dedup();
    for g in labels {
        let idx: Vec<usize> = (0..n).filter(|&i| groups[i] == g).collect();
        let sub: Vec<Vec<f64>> = idx.iter().map(|&i| probs[i].clone()).collect();
        let t = expected_ot_targets(&sub, &target.target, method)?;
        for (j, &i) in idx.iter().enumerate() {
            out.q[i] = t.q[j].clone();
            out.y[i] = t.y[j];
            out.c[i] = t.c[j];
        }
    }
    Ok(out)
}

/// `L_align + L_img + lambda_face L_face` over a batch of generated
/// samples `xs` and frozen-model samples `os` from the same noise.
pub fn total_loss(
    xs: &[Vec<f64>],
    os: &[Vec<f64>],
    cfg: &LossConfig,
    models: &LossModels<'_>,
) -> Result<LossOutput> {
    let n = xs.len();
    if n == 0 || os.len() != n {
        return Err(Error::Shape(format!(
            "{n} generated samples with {} frozen samples",
            os.len()
        )));
    }
    let d = xs[0].len();
    cfg.validate(d, models.classifiers)?;
    let has_region = !cfg.region.is_empty();
    let mut grads = vec![vec![0.0; d]; n];
    let mut align = 0.0;
    let mut agree_flags = vec![true; n];
    let mut active = vec![false; n];
    let mut all_targets = Vec::new();
    if has_region {
        let xr: Vec<Vec<f64>> = xs.iter().map(|x| region_of(x, &cfg.region)).collect();
        let or: Vec<Vec<f64>> = os.iter().map(|o| region_of(o, &cfg.region)).collect();
        for t in &cfg.targets {
            let clf = &models.classifiers[t.classifier];
            let fwd: Vec<_> = xr.iter().map(|r| clf.forward(r)).collect();
            let logits: Vec<Vec<f64>> = fwd.iter().map(|(l, _)| l.clone()).collect();
            let probs: Vec<Vec<f64>> = logits.iter().map(|l| softmax(l)).collect();
            let partition: Option<Vec<usize>> = t.conditional_on.map(|c| {
                or.iter()
                    .map(|r| models.classifiers[c].predict(r))
                    .collect()
            });
            let batch = targets_for(&probs, t, partition.as_deref(), cfg.ot_method)?;
            let (l, g) = alignment_loss(&logits, &batch, cfg.confidence_threshold)?;
            align += l;
            for i in 0..n {
                if batch.c[i] >= cfg.confidence_threshold {
                    active[i] = true;
                }
                let frozen_class = clf.predict(&or[i]);
                if frozen_class != batch.y[i] {
                    agree_flags[i] = false;
                }
                if g[i].iter().any(|v| *v != 0.0) {
                    let gr = clf.input_grad(&fwd[i].1, &g[i]);
                    for (&r, v) in cfg.region.iter().zip(gr) {
                        grads[i][r] += v;
                    }
                }
            }
            all_targets.push(batch);
        }
    }
    let mut img = 0.0;
    let mut face = 0.0;
    for i in 0..n {
        let w = dynamic_weights(agree_flags[i], &cfg.region, d, cfg.lambda_img);
        let (l, g) = weighted_semantics_loss(&xs[i], &os[i], &w, models.extractors);
        img += l / n as f64;
        grads[i]
            .iter_mut()
            .zip(g)
            .for_each(|(a, b)| *a += b / n as f64);
        if has_region && cfg.lambda_face > 0.0 {
            let (l, g) = realism_loss(&region_of(&xs[i], &cfg.region), models.realism);
            face += l / n as f64;
            for (&r, v) in cfg.region.iter().zip(g) {
                grads[i][r] += cfg.lambda_face * v / n as f64;
            }
        }
    }
    let breakdown = LossBreakdown {
        total: align + img + cfg.lambda_face * face,
        align,
        img,
        face,
        agree: agree_flags.iter().filter(|a| **a).count(),
        active: active.iter().filter(|a| **a).count(),
    };
    Ok(LossOutput {
        breakdown,
        grads,
        targets: all_targets,
    })
}

/// Class predicted for each sample's region.
pub fn predict_classes(xs: &[Vec<f64>], region: &[usize], clf: &AttributeClassifier) -> Vec<usize> {
    xs.iter()
        .map(|x| argmax(&clf.logits(&region_of(x, region))))
        .collect()
}

//! The conditional noise-prediction network.
//!
//! A context is a fixed descriptor vector ("token"). A linear encoder maps
//! `[token; prefix_1; ...; prefix_P]` to the conditioning embedding, and an
//! MLP maps `[z_t; embedding; time features]` to the predicted noise. The
//! guidance null condition uses its own learnable embedding row instead of
//! the encoder. Optional low-rank adapters add `A * B` to designated weight
//! matrices.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, MlpCache, MlpLayout};
use crate::rng::normal_vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterTarget {
    /// The context encoder weight.
    Encoder,
    /// The first layer of the noise-prediction MLP.
    DenoiserInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub rank: usize,
    pub targets: Vec<AdapterTarget>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub data_dim: usize,
    pub token_dim: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub time_features: usize,
    pub prefix_len: usize,
    pub activation: Activation,
    /// Total diffusion steps `T`, used to normalize time inputs.
    pub steps: usize,
    pub adapter: Option<AdapterSpec>,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self {
            data_dim: 8,
            token_dim: 4,
            embed_dim: 8,
            hidden: vec![64, 64],
            time_features: 16,
            prefix_len: 5,
            activation: Activation::Silu,
            steps: 100,
            adapter: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    NullEmbedding,
    Prefix,
    Denoiser,
    Adapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub group: ParamGroup,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct AdapterLayout {
    base: Dense,
    /// `output x rank`
    a: Range<usize>,
    /// `rank x input`
    b: Range<usize>,
    rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    encoder: Dense,
    null: Range<usize>,
    prefix: Range<usize>,
    mlp: MlpLayout,
    adapters: Vec<AdapterLayout>,
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    fn new(arch: &DenoiserArch) -> Result<Self> {
        if arch.data_dim == 0 || arch.embed_dim == 0 || arch.token_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if arch.time_features % 2 != 0 {
            return Err(Error::Config("time_features must be even".into()));
        }
        if arch.steps == 0 {
            return Err(Error::Config("model needs a positive step count".into()));
        }
        let mut segments = Vec::new();
        let enc_in = arch.token_dim * (1 + arch.prefix_len);
        let encoder = Dense {
            input: enc_in,
            output: arch.embed_dim,
            offset: 0,
        };
        segments.push(Segment {
            name: "encoder".into(),
            group: ParamGroup::Encoder,
            range: 0..encoder.end(),
        });
        let null = encoder.end()..encoder.end() + arch.embed_dim;
        segments.push(Segment {
            name: "null_embedding".into(),
            group: ParamGroup::NullEmbedding,
            range: null.clone(),
        });
        let prefix = null.end..null.end + arch.prefix_len * arch.token_dim;
        segments.push(Segment {
            name: "prefix".into(),
            group: ParamGroup::Prefix,
            range: prefix.clone(),
        });
        let mut widths = vec![arch.data_dim + arch.embed_dim + arch.time_features];
        widths.extend(&arch.hidden);
        widths.push(arch.data_dim);
        let mlp = MlpLayout::new(&widths, arch.activation, prefix.end);
        segments.push(Segment {
            name: "denoiser".into(),
            group: ParamGroup::Denoiser,
            range: mlp.offset()..mlp.end(),
        });
        let mut at = mlp.end();
        let mut adapters = Vec::new();
        if let Some(spec) = &arch.adapter {
            if spec.rank == 0 {
                return Err(Error::Config("adapter rank must be positive".into()));
            }
            let mut seen = Vec::new();
            for target in &spec.targets {
                if seen.contains(target) {
                    continue;
                }
                seen.push(*target);
                let base = match target {
                    AdapterTarget::Encoder => encoder,
                    AdapterTarget::DenoiserInput => mlp.layers[0],
                };
                let a = at..at + base.output * spec.rank;
                let b = a.end..a.end + spec.rank * base.input;
                at = b.end;
                segments.push(Segment {
                    name: format!("adapter_{target:?}").to_lowercase(),
                    group: ParamGroup::Adapter,
                    range: a.start..b.end,
                });
                adapters.push(AdapterLayout {
                    base,
                    a,
                    b,
                    rank: spec.rank,
                });
            }
        }
        Ok(Self {
            encoder,
            null,
            prefix,
            mlp,
            adapters,
            segments,
            total: at,
        })
    }
}

/// What the network is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Conditioning {
    Context(usize),
    Null,
}

/// Which parameters a finetuning run may change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneTarget {
    /// The context encoder (text-encoder analog).
    ContextTable,
    /// Soft prefix vectors fed to the encoder.
    Prefix,
    /// Encoder, null embedding and noise-prediction MLP.
    FullNetwork,
    /// Low-rank adapter factors of the given rank.
    LowRankAdapter { rank: usize },
}

impl FinetuneTarget {
    pub fn groups(&self) -> &'static [ParamGroup] {
        match self {
            FinetuneTarget::ContextTable => &[ParamGroup::Encoder],
            FinetuneTarget::Prefix => &[ParamGroup::Prefix],
            FinetuneTarget::FullNetwork => &[
                ParamGroup::Encoder,
                ParamGroup::NullEmbedding,
                ParamGroup::Denoiser,
            ],
            FinetuneTarget::LowRankAdapter { .. } => &[ParamGroup::Adapter],
        }
    }
}

/// Cached activations of one network evaluation.
#[derive(Debug, Clone)]
pub struct StepCache {
    cond: Conditioning,
    enc_input: Option<Vec<f64>>,
    mlp: MlpCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    arch: DenoiserArch,
    layout: Layout,
    params: Vec<f64>,
    tokens: Vec<Vec<f64>>,
    adapter_enabled: bool,
}

impl DenoiserModel {
    /// Randomly initialized model over the given context descriptors.
    pub fn new<R: Rng + ?Sized>(
        arch: DenoiserArch,
        tokens: Vec<Vec<f64>>,
        rng: &mut R,
    ) -> Result<Self> {
        let layout = Layout::new(&arch)?;
        if let Some(t) = tokens.iter().find(|t| t.len() != arch.token_dim) {
            return Err(Error::Shape(format!(
                "context token has {} dims, expected {}",
                t.len(),
                arch.token_dim
            )));
        }
        let mut params = vec![0.0; layout.total];
        layout.encoder.init(&mut params, rng, 1.0);
        for (p, v) in params[layout.null.clone()]
            .iter_mut()
            .zip(normal_vec(rng, arch.embed_dim))
        {
            *p = 0.5 * v;
        }
        layout.mlp.init(&mut params, rng);
        for ad in &layout.adapters {
            let std = 1.0 / (ad.base.input as f64).sqrt();
            for (p, v) in params[ad.b.clone()]
                .iter_mut()
                .zip(normal_vec(rng, ad.b.len()))
            {
                *p = v * std;
            }
        }
        let adapter_enabled = !layout.adapters.is_empty();
        Ok(Self {
            arch,
            layout,
            params,
            tokens,
            adapter_enabled,
        })
    }

    pub fn from_parts(arch: DenoiserArch, tokens: Vec<Vec<f64>>, params: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(&arch)?;
        if params.len() != layout.total {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        let adapter_enabled = !layout.adapters.is_empty();
        Ok(Self {
            arch,
            layout,
            params,
            tokens,
            adapter_enabled,
        })
    }

    pub fn arch(&self) -> &DenoiserArch {
        &self.arch
    }

    pub fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn tokens(&self) -> &[Vec<f64>] {
        &self.tokens
    }

    pub fn num_contexts(&self) -> usize {
        self.tokens.len()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.layout.segments
    }

    pub fn group_ranges(&self, group: ParamGroup) -> Vec<Range<usize>> {
        self.layout
            .segments
            .iter()
            .filter(|s| s.group == group)
            .map(|s| s.range.clone())
            .collect()
    }

    /// Boolean mask over parameters that belong to any of `groups`.
    pub fn mask(&self, groups: &[ParamGroup]) -> Vec<bool> {
        let mut m = vec![false; self.params.len()];
        for s in self
            .layout
            .segments
            .iter()
            .filter(|s| groups.contains(&s.group))
        {
            m[s.range.clone()].iter_mut().for_each(|b| *b = true);
        }
        m
    }

    pub fn adapter_enabled(&self) -> bool {
        self.adapter_enabled
    }

    pub fn set_adapter_enabled(&mut self, on: bool) {
        self.adapter_enabled = on && !self.layout.adapters.is_empty();
    }

    /// Adds a low-rank adapter to a model that has none, keeping all
    /// existing parameters. The new factors start with `A = 0`.
    pub fn with_adapter<R: Rng + ?Sized>(&self, spec: AdapterSpec, rng: &mut R) -> Result<Self> {
        if self.arch.adapter.is_some() {
            return Err(Error::Config("model already has an adapter".into()));
        }
        let mut arch = self.arch.clone();
        arch.adapter = Some(spec);
        let layout = Layout::new(&arch)?;
        let mut params = self.params.clone();
        params.resize(layout.total, 0.0);
        for ad in &layout.adapters {
            let std = 1.0 / (ad.base.input as f64).sqrt();
            for (p, v) in params[ad.b.clone()]
                .iter_mut()
                .zip(normal_vec(rng, ad.b.len()))
            {
                *p = v * std;
            }
        }
        Ok(Self {
            arch,
            layout,
            params,
            tokens: self.tokens.clone(),
            adapter_enabled: true,
        })
    }

    /// Parameters with adapters merged into their base weights. Kernels
    /// always read this buffer; gradients with respect to it are mapped
    /// back to adapter factors by [`DenoiserModel::pull_back`].
    fn merged(&self) -> std::borrow::Cow<'_, [f64]> {
        if !self.adapter_enabled {
            return std::borrow::Cow::Borrowed(&self.params);
        }
        let mut p = self.params.clone();
        for ad in &self.layout.adapters {
            let (out, inp, r) = (ad.base.output, ad.base.input, ad.rank);
            let a = &self.params[ad.a.clone()];
            let b = &self.params[ad.b.clone()];
            let w = ad.base.weight_range();
            for o in 0..out {
                for i in 0..inp {
                    let mut acc = 0.0;
                    for k in 0..r {
                        acc += a[o * r + k] * b[k * inp + i];
                    }
                    p[w.start + o * inp + i] += acc;
                }
            }
        }
        std::borrow::Cow::Owned(p)
    }

    /// Evaluation handle with adapters merged once.
    pub fn net(&self) -> Net<'_> {
        Net {
            model: self,
            params: self.merged(),
        }
    }

    /// Converts a gradient with respect to merged weights into a gradient
    /// with respect to stored parameters (fills the adapter factors).
    pub fn pull_back(&self, grad: &mut [f64]) {
        if !self.adapter_enabled {
            return;
        }
        for ad in &self.layout.adapters {
            let (out, inp, r) = (ad.base.output, ad.base.input, ad.rank);
            let w = ad.base.weight_range();
            let gw: Vec<f64> = grad[w].to_vec();
            let a = &self.params[ad.a.clone()];
            let b = &self.params[ad.b.clone()];
            let mut ga = vec![0.0; out * r];
            let mut gb = vec![0.0; r * inp];
            for o in 0..out {
                for i in 0..inp {
                    let g = gw[o * inp + i];
                    for k in 0..r {
                        ga[o * r + k] += g * b[k * inp + i];
                        gb[k * inp + i] += a[o * r + k] * g;
                    }
                }
            }
            for (d, s) in grad[ad.a.clone()].iter_mut().zip(ga) {
                *d += s;
            }
            for (d, s) in grad[ad.b.clone()].iter_mut().zip(gb) {
                *d += s;
            }
        }
    }

    /// SHA-256 over architecture, tokens and the parameters of `groups`.
    pub fn content_hash(&self, groups: &[ParamGroup]) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.arch).unwrap_or_default());
        for t in &self.tokens {
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        for s in self
            .layout
            .segments
            .iter()
            .filter(|s| groups.contains(&s.group))
        {
            h.update(s.name.as_bytes());
            for v in &self.params[s.range.clone()] {
                h.update(v.to_le_bytes());
            }
        }
        hex_digest(&h.finalize())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Sinusoidal features of the normalized step `t / T`.
pub fn time_features(t: usize, steps: usize, n: usize) -> Vec<f64> {
    let x = t as f64 / steps as f64;
    let half = n / 2;
    let mut out = Vec::with_capacity(n);
    for k in 0..half {
        let f = if half == 1 {
            1.0
        } else {
            (50f64.ln() * k as f64 / (half - 1) as f64).exp()
        };
        out.push((f * x).sin());
        out.push((f * x).cos());
    }
    out
}

/// A model bound to its merged parameters.
pub struct Net<'a> {
    model: &'a DenoiserModel,
    params: std::borrow::Cow<'a, [f64]>,
}

impl Net<'_> {
    pub fn model(&self) -> &DenoiserModel {
        self.model
    }

    fn embed(&self, cond: Conditioning) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let l = &self.model.layout;
        match cond {
            Conditioning::Null => Ok((self.params[l.null.clone()].to_vec(), None)),
            Conditioning::Context(c) => {
                let token = self.model.tokens.get(c).ok_or_else(|| {
                    Error::Index(format!("context {c} of {}", self.model.tokens.len()))
                })?;
                let mut input = token.clone();
                input.extend_from_slice(&self.params[l.prefix.clone()]);
                let mut e = vec![0.0; l.encoder.output];
                l.encoder.forward(&self.params, &input, &mut e);
                Ok((e, Some(input)))
            }
        }
    }

    /// Predicted noise `eps(cond, z, t)` and the cache for [`Net::backward`].
    pub fn forward(
        &self,
        cond: Conditioning,
        z: &[f64],
        t: usize,
    ) -> Result<(Vec<f64>, StepCache)> {
        let arch = &self.model.arch;
        if z.len() != arch.data_dim {
            return Err(Error::Shape(format!(
                "z has {} dims, model expects {}",
                z.len(),
                arch.data_dim
            )));
        }
        let (e, enc_input) = self.embed(cond)?;
        let mut input = Vec::with_capacity(self.model.layout.mlp.input_dim());
        input.extend_from_slice(z);
        input.extend_from_slice(&e);
        input.extend(time_features(t, arch.steps, arch.time_features));
        let (out, mlp) = self.model.layout.mlp.forward(&self.params, &input);
        Ok((
            out,
            StepCache {
                cond,
                enc_input,
                mlp,
            },
        ))
    }

    pub fn eps(&self, cond: Conditioning, z: &[f64], t: usize) -> Result<Vec<f64>> {
        self.forward(cond, z, t).map(|r| r.0)
    }

    /// Pulls `g_eps` back through one evaluation. Returns the gradient with
    /// respect to `z`; parameter gradients (with respect to the merged
    /// weights) are accumulated times `scale` when a buffer is given.
    pub fn backward(
        &self,
        cache: &StepCache,
        g_eps: &[f64],
        grad: Option<(&mut [f64], f64)>,
    ) -> Vec<f64> {
        let l = &self.model.layout;
        let d = self.model.arch.data_dim;
        let e_dim = self.model.arch.embed_dim;
        match grad {
            None => {
                let g_in = l.mlp.backward(&self.params, &cache.mlp, g_eps, None);
                g_in[..d].to_vec()
            }
            Some((buf, scale)) => {
                let g_in =
                    l.mlp
                        .backward(&self.params, &cache.mlp, g_eps, Some((&mut *buf, scale)));
                let g_e = &g_in[d..d + e_dim];
                match cache.cond {
                    Conditioning::Null => {
                        for (b, g) in buf[l.null.clone()].iter_mut().zip(g_e) {
                            *b += scale * g;
                        }
                    }
                    Conditioning::Context(_) => {
                        let input = cache
                            .enc_input
                            .as_ref()
                            .expect("context cache keeps encoder input");
                        let mut g_input = vec![0.0; input.len()];
                        l.encoder.backward(
                            &self.params,
                            input,
                            g_e,
                            Some((&mut *buf, scale)),
                            Some(&mut g_input),
                        );
                        let tok = self.model.arch.token_dim;
                        for (b, g) in buf[l.prefix.clone()].iter_mut().zip(&g_input[tok..]) {
                            *b += scale * g;
                        }
                    }
                }
                g_in[..d].to_vec()
            }
        }
    }
}

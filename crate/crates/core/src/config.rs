//! Run configuration: one TOML file with a section per stage. Every field
//! has a default, so a file only needs the keys it changes, and `key=value`
//! overrides can be applied on top.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::GradKind;
use crate::model::{DenoiserArch, FinetuneTarget};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::ot::{OtMethod, DEFAULT_MC_DRAWS};
use crate::sampler::SamplerConfig;
use crate::schedule::{BetaKind, NoiseSchedule};
use crate::train::PretrainOptions;
use crate::world::{AttributeSpec, FamilySpec, WorldConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: BetaKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            kind: BetaKind::Linear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.steps, self.beta_start, self.beta_end, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Labelled samples used for pretraining and classifier training.
    pub train_samples: usize,
    /// Real region slices forming the realism reference set.
    pub reference_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_samples: 20_000,
            reference_samples: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSettings {
    pub steps: usize,
    /// Step counts drawn per finetuning iteration.
    pub jitter: Option<Vec<usize>>,
    pub guidance_weight: Option<f64>,
    /// Ancestral sampling over every step; `steps` is then ignored.
    pub stochastic: bool,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            steps: 21,
            jitter: None,
            guidance_weight: None,
            stochastic: false,
        }
    }
}

impl SamplerSettings {
    pub fn build(&self, total: usize) -> Result<SamplerConfig> {
        let mut c = if self.stochastic {
            SamplerConfig::full(total, true)
        } else {
            SamplerConfig::strided(total, self.steps)?
        };
        c.guidance_weight = self.guidance_weight;
        c.step_jitter = self.jitter.clone();
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSettings {
    /// Attribute names; more than one means their product class space.
    pub attributes: Vec<String>,
    /// Target distribution; uniform when absent.
    #[serde(default)]
    pub probs: Option<Vec<f64>>,
    /// Align within each predicted class of this attribute.
    #[serde(default)]
    pub conditional_on: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OtKind {
    Exact,
    MonteCarlo,
    /// Exact when the enumeration fits the budget, Monte Carlo otherwise.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSettings {
    pub confidence_threshold: f64,
    pub lambda_face: f64,
    pub lambda_img: [f64; 3],
    /// Region coordinates; the world's region when absent.
    pub region: Option<Vec<usize>>,
    pub targets: Vec<TargetSettings>,
    pub ot: OtKind,
    pub ot_draws: usize,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.8,
            lambda_face: 1.0,
            lambda_img: [8.0, 1.6, 0.32],
            region: None,
            targets: vec![TargetSettings {
                attributes: vec!["gender".into()],
                probs: None,
                conditional_on: None,
            }],
            ot: OtKind::Auto,
            ot_draws: DEFAULT_MC_DRAWS,
        }
    }
}

impl LossSettings {
    pub fn ot_method(&self, n: usize, k: usize, seed: u64) -> OtMethod {
        let mc = OtMethod::MonteCarlo {
            draws: self.ot_draws,
            seed,
        };
        match self.ot {
            OtKind::Exact => OtMethod::ExactEnumeration,
            OtKind::MonteCarlo => mc,
            OtKind::Auto => {
                if crate::ot::num_compositions(n, k) <= crate::ot::ENUMERATION_BUDGET {
                    OtMethod::ExactEnumeration
                } else {
                    mc
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyWeightSettings {
    pub family: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub target: FinetuneTarget,
    pub optimizer: OptimizerConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    /// Families sampled during finetuning; every family, equally weighted,
    /// when empty.
    pub families: Vec<FamilyWeightSettings>,
    pub sampler: SamplerSettings,
    pub grad: GradKind,
    pub loss: LossSettings,
    pub validation_samples: usize,
    pub semantics_floor: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            target: FinetuneTarget::ContextTable,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::AdamW,
                learning_rate: 1e-2,
                weight_decay: 0.0,
                clip_norm: None,
            },
            iterations: 300,
            batch_size: 24,
            checkpoint_every: 50,
            families: Vec::new(),
            sampler: SamplerSettings {
                jitter: Some(vec![19, 20, 21, 22, 23]),
                ..SamplerSettings::default()
            },
            grad: GradKind::Adjusted,
            loss: LossSettings::default(),
            validation_samples: 48,
            semantics_floor: 0.7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_per_context: usize,
    pub sampler: SamplerSettings,
    /// Attribute sets to report; every single attribute when empty.
    pub attributes: Vec<Vec<String>>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_per_context: 200,
            sampler: SamplerSettings::default(),
            attributes: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InvertConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub sampler: SamplerSettings,
    pub context: usize,
    pub target_context: usize,
    pub modes: Vec<GradKind>,
    pub seeds: Vec<u64>,
    pub eval_samples: usize,
}

impl Default for InvertConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            batch_size: 8,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                learning_rate: 1e-2,
                weight_decay: 0.0,
                clip_norm: None,
            },
            sampler: SamplerSettings {
                stochastic: true,
                ..SamplerSettings::default()
            },
            context: 0,
            target_context: 7,
            modes: vec![GradKind::Naive, GradKind::Adjusted, GradKind::DetachOnly],
            seeds: vec![1, 2, 3],
            eval_samples: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnoseConfig {
    pub runs: usize,
    pub context: usize,
    pub guidance_weight: Option<f64>,
    pub plot: bool,
    pub seed: u64,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            runs: 20,
            context: 0,
            guidance_weight: None,
            plot: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub model: DenoiserArch,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub pretrain: PretrainOptions,
    pub finetune: FinetuneConfig,
    pub evaluate: EvalConfig,
    pub invert: InvertConfig,
    pub diagnose: DiagnoseConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            model: DenoiserArch::default(),
            schedule: ScheduleConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainOptions {
                iterations: 12_000,
                ..PretrainOptions::default()
            },
            finetune: FinetuneConfig::default(),
            evaluate: EvalConfig::default(),
            invert: InvertConfig::default(),
            diagnose: DiagnoseConfig::default(),
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Recursively overlays `over` onto `base`; non-table values replace.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Rejects keys in `given` that did not survive deserialization, which is
/// how serde's defaults would otherwise swallow a misspelled key.
fn check_known(given: &toml::Table, known: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in given {
        let path = format!("{prefix}{k}");
        match (v, known.get(k)) {
            (_, None) => return Err(Error::Config(format!("unknown configuration key {path:?}"))),
            (toml::Value::Table(g), Some(toml::Value::Table(kn))) => {
                check_known(g, kn, &format!("{path}."))?
            }
            _ => {}
        }
    }
    Ok(())
}

/// Sets `a.b.c = value` inside `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Argument(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Argument(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            Error::Argument(format!("override key {key:?} crosses a non-table value"))
        })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        Self::default().layered(text, overrides)
    }

    /// This configuration with `text` merged on top, then `overrides`.
    pub fn layered(&self, text: &str, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Serde(e.to_string()))?;
        let mut given: toml::Table = text.parse()?;
        for o in overrides {
            apply_override(&mut given, o)?;
        }
        merge(&mut table, given.clone());
        let cfg: RunConfig = toml::Value::Table(table).try_into()?;
        let known = toml::Table::try_from(&cfg).map_err(|e| Error::Serde(e.to_string()))?;
        check_known(&given, &known, "")?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    fn check(&self) -> Result<()> {
        if self.model.data_dim != self.world.data_dim
            || self.model.token_dim != self.world.token_dim
        {
            return Err(Error::Config("model and world dimensions differ".into()));
        }
        if self.model.steps != self.schedule.steps {
            return Err(Error::Config(
                "model.steps must equal schedule.steps".into(),
            ));
        }
        if self.finetune.checkpoint_every == 0 {
            return Err(Error::Config(
                "finetune.checkpoint_every must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Two-attribute world for non-uniform targets: a biased 75/25 goal on
    /// the second attribute while the first is debiased.
    pub fn two_attribute_preset() -> Self {
        let mut c = Self::default();
        c.world.attributes.push(AttributeSpec {
            name: "age".into(),
            classes: 2,
        });
        c.world.families[0].marginals = vec![vec![0.9, 0.1], vec![0.95, 0.05]];
        c.finetune.loss.targets = vec![
            TargetSettings {
                attributes: vec!["gender".into()],
                probs: None,
                conditional_on: None,
            },
            TargetSettings {
                attributes: vec!["age".into()],
                probs: Some(vec![0.75, 0.25]),
                conditional_on: Some("gender".into()),
            },
        ];
        c.finetune.target = FinetuneTarget::LowRankAdapter { rank: 2 };
        c.finetune.iterations = 600;
        c.finetune.batch_size = 40;
        c.finetune.loss.confidence_threshold = 0.7;
        c
    }

    /// Two context families with opposite biases.
    pub fn multi_family_preset() -> Self {
        let mut c = Self::default();
        c.world.families = vec![
            FamilySpec {
                name: "occupations".into(),
                train: 20,
                validation: 5,
                heldout: 5,
                marginals: vec![vec![0.9, 0.1]],
                token_offset: 2.5,
            },
            FamilySpec {
                name: "sports".into(),
                train: 20,
                validation: 5,
                heldout: 5,
                marginals: vec![vec![0.15, 0.85]],
                token_offset: -2.5,
            },
        ];
        c
    }
}

//! End-to-end runs behind the CLI subcommands. Each run takes a resolved
//! configuration, writes its artifacts into an output directory (resolved
//! config, checkpoints, JSONL records, plots) and returns a summary.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adjusted::{diagnose_gradients, GradDiagnostics};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalReport, EvalSetup};
use crate::finetune::{
    finetune, FamilyWeight, FinetuneEnv, FinetuneSettings, IterationRecord, ValidationRecord,
};
use crate::invert::{run_inversion_benchmark, InversionSettings, InversionTrace};
use crate::losses::{AlignTarget, Extractors, LossConfig, RealismModel};
use crate::model::{Conditioning, DenoiserModel};
use crate::ot::TargetDistribution;
use crate::plot::{line_chart, Series};
use crate::rng::{derive_seed, stream};
use crate::sampler::SamplerConfig;
use crate::schedule::NoiseSchedule;
use crate::train::{pretrain_denoiser, PretrainReport};
use crate::world::{
    make_world, train_classifier, AttributeClassifier, ClassifierRole, Record, Split, ToyWorldSpec,
};

/// Everything derived deterministically from a configuration before any
/// model is involved: world, data, schedule and frozen auxiliary networks.
pub struct Bench {
    pub config: RunConfig,
    pub spec: ToyWorldSpec,
    pub schedule: NoiseSchedule,
    pub data: Vec<Record>,
    /// Feature maps used by the training loss.
    pub extractors: Extractors,
    /// Independent feature maps used only for reporting similarity.
    pub eval_extractors: Extractors,
    pub realism: RealismModel,
}

impl Bench {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let spec = ToyWorldSpec::new(config.world.clone())?;
        let schedule = config.schedule.build()?;
        let all: Vec<usize> = (0..spec.contexts.len()).collect();
        let data = make_world(
            &spec,
            &all,
            config.data.train_samples,
            derive_seed(config.seed, &[0xDA7A]),
        )?;
        let refs: Vec<Vec<f64>> = make_world(
            &spec,
            &all,
            config.data.reference_samples,
            derive_seed(config.seed, &[0x2EF]),
        )?
        .iter()
        .map(|r| spec.region(&r.x0))
        .collect();
        let realism = RealismModel::random(
            spec.region_mask.len(),
            &refs,
            derive_seed(config.seed, &[0xFACE]),
        )?;
        let extractors = Extractors::semantic(spec.data_dim(), derive_seed(config.seed, &[0x5E]));
        let eval_extractors =
            Extractors::semantic(spec.data_dim(), derive_seed(config.seed, &[0xE5]));
        Ok(Self {
            config: config.clone(),
            spec,
            schedule,
            data,
            extractors,
            eval_extractors,
            realism,
        })
    }

    pub fn attribute_set(&self, names: &[String]) -> Result<Vec<usize>> {
        if names.is_empty() {
            return Err(Error::Config("empty attribute list".into()));
        }
        names.iter().map(|n| self.spec.attribute_index(n)).collect()
    }

    pub fn classifier(
        &self,
        attributes: &[usize],
        role: ClassifierRole,
    ) -> Result<AttributeClassifier> {
        let mut tags = vec![0xC1A5, role as u64];
        tags.extend(attributes.iter().map(|a| *a as u64));
        train_classifier(
            &self.spec,
            &self.data,
            attributes,
            role,
            derive_seed(self.config.seed, &tags),
        )
    }

    pub fn family_index(&self, name: &str) -> Result<usize> {
        self.spec
            .config
            .families
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| Error::Config(format!("unknown family {name}")))
    }

    /// Training classifiers and the loss configuration they index into.
    pub fn loss_setup(&self) -> Result<(Vec<AttributeClassifier>, LossConfig)> {
        let ls = &self.config.finetune.loss;
        let mut sets: Vec<Vec<usize>> = Vec::new();
        let mut index_of = |set: Vec<usize>| match sets.iter().position(|s| *s == set) {
            Some(i) => i,
            None => {
                sets.push(set);
                sets.len() - 1
            }
        };
        let mut targets = Vec::new();
        for t in &ls.targets {
            let attrs = self.attribute_set(&t.attributes)?;
            let k: usize = attrs
                .iter()
                .map(|&a| self.spec.config.attributes[a].classes)
                .product();
            let target = match &t.probs {
                Some(p) => TargetDistribution::new(p.clone())?,
                None => TargetDistribution::uniform(k),
            };
            let classifier = index_of(attrs);
            let conditional_on = match &t.conditional_on {
                Some(name) => Some(index_of(vec![self.spec.attribute_index(name)?])),
                None => None,
            };
            targets.push(AlignTarget {
                classifier,
                target,
                conditional_on,
            });
        }
        let classifiers = sets
            .iter()
            .map(|s| self.classifier(s, ClassifierRole::Training))
            .collect::<Result<Vec<_>>>()?;
        let n = self.config.finetune.batch_size;
        let k_max = targets
            .iter()
            .map(|t| t.target.num_classes())
            .max()
            .unwrap_or(2);
        let loss = LossConfig {
            confidence_threshold: ls.confidence_threshold,
            lambda_face: ls.lambda_face,
            lambda_img: ls.lambda_img,
            region: ls
                .region
                .clone()
                .unwrap_or_else(|| self.spec.region_mask.clone()),
            targets,
            ot_method: ls.ot_method(n, k_max, derive_seed(self.config.seed, &[0x07])),
        };
        Ok((classifiers, loss))
    }

    pub fn finetune_families(&self) -> Result<Vec<FamilyWeight>> {
        let f = &self.config.finetune.families;
        if f.is_empty() {
            return Ok((0..self.spec.config.families.len())
                .map(|family| FamilyWeight {
                    family,
                    weight: 1.0,
                })
                .collect());
        }
        f.iter()
            .map(|w| {
                Ok(FamilyWeight {
                    family: self.family_index(&w.family)?,
                    weight: w.weight,
                })
            })
            .collect()
    }

    pub fn finetune_settings(&self, loss: LossConfig) -> Result<FinetuneSettings> {
        let c = &self.config.finetune;
        Ok(FinetuneSettings {
            target: c.target.clone(),
            optimizer: c.optimizer.clone(),
            iterations: c.iterations,
            batch_size: c.batch_size,
            checkpoint_every: c.checkpoint_every,
            families: self.finetune_families()?,
            sampler: c.sampler.build(self.schedule.num_steps())?,
            grad: c.grad,
            loss,
            validation_samples: c.validation_samples,
            semantics_floor: c.semantics_floor,
            seed: derive_seed(self.config.seed, &[0xF17E, c.seed]),
        })
    }

    pub fn eval_sampler(&self) -> Result<SamplerConfig> {
        let mut s = self
            .config
            .evaluate
            .sampler
            .build(self.schedule.num_steps())?;
        s.step_jitter = None;
        Ok(s)
    }

    /// Attribute sets reported by evaluation.
    pub fn eval_attribute_sets(&self) -> Result<Vec<Vec<usize>>> {
        let sets = &self.config.evaluate.attributes;
        if sets.is_empty() {
            return Ok((0..self.spec.config.attributes.len())
                .map(|a| vec![a])
                .collect());
        }
        sets.iter().map(|s| self.attribute_set(s)).collect()
    }

    /// Checks that a checkpoint was produced for the same world and model.
    pub fn check_compatible(&self, ckpt: &Checkpoint) -> Result<()> {
        let c = &ckpt.header.config;
        if c.world != self.config.world
            || c.schedule != self.config.schedule
            || c.data != self.config.data
            || c.seed != self.config.seed
        {
            return Err(Error::Config(
                "checkpoint was produced under a different world, schedule, data or seed".into(),
            ));
        }
        Ok(())
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn prepare_out(out: &Path, config: &RunConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.resolved.toml"), config.to_toml()?)?;
    Ok(())
}

/// Evaluation of one attribute set over one family's contexts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyEval {
    pub family: String,
    pub split: Split,
    pub attributes: Vec<String>,
    pub report: EvalReport,
}

/// Evaluates `model` on every family for every reported attribute set.
pub fn evaluate_families(
    bench: &Bench,
    model: &DenoiserModel,
    frozen: Option<&DenoiserModel>,
    split: Split,
    n_per_context: usize,
) -> Result<Vec<FamilyEval>> {
    let sampler = bench.eval_sampler()?;
    let mut out = Vec::new();
    for set in bench.eval_attribute_sets()? {
        let eval_clf = bench.classifier(&set, ClassifierRole::Evaluation)?;
        let train_clf = bench.classifier(&set, ClassifierRole::Training)?;
        for (f, fam) in bench.spec.config.families.iter().enumerate() {
            let contexts = bench.spec.contexts_where(Some(f), split);
            if contexts.is_empty() {
                continue;
            }
            let setup = EvalSetup {
                schedule: &bench.schedule,
                sampler: &sampler,
                classifier: &eval_clf,
                region: &bench.spec.region_mask,
                n_per_context,
                seed: derive_seed(
                    bench.config.seed,
                    &[0xE7A1, f as u64, bench.config.evaluate.seed],
                ),
                frozen: frozen.map(|m| (m, &bench.eval_extractors)),
                training_classifier: Some(&train_clf),
            };
            let report = evaluate_model(model, &contexts, &setup)?;
            let attributes = set
                .iter()
                .map(|&a| bench.spec.config.attributes[a].name.clone())
                .collect();
            out.push(FamilyEval {
                family: fam.name.clone(),
                split,
                attributes,
                report,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub final_loss: f64,
    pub evaluation: Vec<FamilyEval>,
}

/// Trains the base model for `bench` from its seeded initialization.
pub fn pretrain_base(bench: &Bench) -> Result<(DenoiserModel, PretrainReport)> {
    let cfg = &bench.config;
    let mut model = DenoiserModel::new(
        cfg.model.clone(),
        bench.spec.tokens(),
        &mut stream(cfg.seed, &[0x1417]),
    )?;
    let mut opts = cfg.pretrain.clone();
    opts.seed = derive_seed(cfg.seed, &[0x7A1]);
    let report = pretrain_denoiser(&mut model, &bench.schedule, &bench.data, &opts)?;
    Ok((model, report))
}

pub fn run_pretrain(config: &RunConfig, out: &Path) -> Result<PretrainSummary> {
    prepare_out(out, config)?;
    let bench = Bench::new(config)?;
    let (model, report) = pretrain_base(&bench)?;
    #[derive(Serialize)]
    struct LossRow {
        iteration: usize,
        loss: f64,
    }
    let rows: Vec<LossRow> = report
        .losses
        .iter()
        .enumerate()
        .map(|(iteration, &loss)| LossRow { iteration, loss })
        .collect();
    write_jsonl(&out.join("pretrain_log.jsonl"), &rows)?;
    let evaluation = evaluate_families(
        &bench,
        &model,
        None,
        Split::Heldout,
        config.evaluate.n_per_context,
    )?;
    write_jsonl(&out.join("pretrain_eval.jsonl"), &evaluation)?;
    let tail = &report.losses[report.losses.len().saturating_sub(100)..];
    let final_loss = if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    let metrics = serde_json::json!({
        "final_loss": if final_loss.is_finite() { Some(final_loss) } else { None },
        "heldout_bias": evaluation.iter().map(|e| (e.family.clone(), e.attributes.clone(), e.report.bias_mean)).collect::<Vec<_>>(),
    });
    let path = out.join("base.ckpt");
    Checkpoint::capture(
        &model,
        &[],
        None,
        config,
        config.pretrain.iterations,
        metrics,
    )
    .write(&path)?;
    Ok(PretrainSummary {
        checkpoint: path,
        final_loss,
        evaluation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Iteration(IterationRecord),
    Validation(ValidationRecord),
    Checkpoint {
        iteration: usize,
        path: PathBuf,
    },
    Best {
        iteration: usize,
        target_gap: f64,
        semantics: f64,
        rule: String,
    },
    Halted {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub best: Option<PathBuf>,
    pub best_iteration: Option<usize>,
    pub last: PathBuf,
    pub halted: Option<String>,
    pub frozen_hash_before: String,
    pub frozen_hash_after: String,
    /// Held-out evaluation of the base and of the selected checkpoint.
    pub base_eval: Vec<FamilyEval>,
    pub tuned_eval: Vec<FamilyEval>,
}

pub const BEST_RULE: &str =
    "minimum validation target gap with semantics >= floor; earliest on ties";

pub fn run_finetune(config: &RunConfig, base_path: &Path, out: &Path) -> Result<FinetuneSummary> {
    prepare_out(out, config)?;
    let bench = Bench::new(config)?;
    let base_ckpt = Checkpoint::read(base_path)?;
    bench.check_compatible(&base_ckpt)?;
    let base = base_ckpt.model()?;
    let all = [
        crate::model::ParamGroup::Encoder,
        crate::model::ParamGroup::NullEmbedding,
        crate::model::ParamGroup::Prefix,
        crate::model::ParamGroup::Denoiser,
        crate::model::ParamGroup::Adapter,
    ];
    let frozen_hash_before = base.content_hash(&all);
    let (classifiers, loss) = bench.loss_setup()?;
    for w in loss.warnings() {
        eprintln!("warning: {w}");
    }
    let settings = bench.finetune_settings(loss)?;
    let env = FinetuneEnv {
        spec: &bench.spec,
        schedule: &bench.schedule,
        classifiers: &classifiers,
        extractors: &bench.extractors,
        realism: &bench.realism,
    };
    let groups = settings.target.groups();
    let base_abs = fs::canonicalize(base_path)?;
    let mut log: Vec<LogRecord> = Vec::new();
    let mut template = crate::finetune::prepare_model(&base, &settings.target, settings.seed)?;
    let outcome = finetune(&base, &env, &settings, |snap| {
        template.params_mut().copy_from_slice(&snap.params);
        let path = out.join(format!("iter_{:06}.ckpt", snap.iteration));
        let metrics = serde_json::to_value(&snap.validation)?;
        Checkpoint::capture(
            &template,
            groups,
            Some((&base_abs, &base)),
            config,
            snap.iteration,
            metrics,
        )
        .write(&path)?;
        log.push(LogRecord::Checkpoint {
            iteration: snap.iteration,
            path,
        });
        Ok(())
    })?;
    let mut records: Vec<LogRecord> = outcome
        .log
        .iter()
        .cloned()
        .map(LogRecord::Iteration)
        .collect();
    records.extend(
        outcome
            .validations
            .iter()
            .cloned()
            .map(LogRecord::Validation),
    );
    records.extend(log);
    let last = out.join("last.ckpt");
    let last_iter = outcome.log.last().map(|r| r.iteration + 1).unwrap_or(0);
    Checkpoint::capture(
        &outcome.model,
        groups,
        Some((&base_abs, &base)),
        config,
        last_iter,
        serde_json::Value::Null,
    )
    .write(&last)?;
    let mut best_path = None;
    let mut tuned = outcome.model.clone();
    if let Some(b) = &outcome.best {
        records.push(LogRecord::Best {
            iteration: b.iteration,
            target_gap: b.validation.target_gap,
            semantics: b.validation.semantics,
            rule: BEST_RULE.into(),
        });
        tuned.params_mut().copy_from_slice(&b.params);
        let p = out.join("best.ckpt");
        Checkpoint::capture(
            &tuned,
            groups,
            Some((&base_abs, &base)),
            config,
            b.iteration,
            serde_json::to_value(&b.validation)?,
        )
        .write(&p)?;
        best_path = Some(p);
    }
    if let Some(reason) = &outcome.halted {
        records.push(LogRecord::Halted {
            reason: reason.clone(),
        });
    }
    write_jsonl(&out.join("log.jsonl"), &records)?;
    write_finetune_plot(out, &outcome.log)?;
    let n = config.evaluate.n_per_context;
    let base_eval = evaluate_families(&bench, &base, None, Split::Heldout, n)?;
    let tuned_eval = evaluate_families(&bench, &tuned, Some(&base), Split::Heldout, n)?;
    let summary = FinetuneSummary {
        best: best_path,
        best_iteration: outcome.best.as_ref().map(|b| b.iteration),
        last,
        halted: outcome.halted.clone(),
        frozen_hash_before,
        frozen_hash_after: base.content_hash(&all),
        base_eval,
        tuned_eval,
    };
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

fn write_finetune_plot(out: &Path, log: &[IterationRecord]) -> Result<()> {
    if log.is_empty() {
        return Ok(());
    }
    let pts = |f: &dyn Fn(&IterationRecord) -> f64| {
        log.iter()
            .map(|r| (r.iteration as f64, f(r)))
            .collect::<Vec<_>>()
    };
    let series = [
        Series {
            name: "total",
            points: pts(&|r| r.loss.total),
            band: None,
        },
        Series {
            name: "align",
            points: pts(&|r| r.loss.align),
            band: None,
        },
        Series {
            name: "img",
            points: pts(&|r| r.loss.img),
            band: None,
        },
        Series {
            name: "face",
            points: pts(&|r| r.loss.face),
            band: None,
        },
    ];
    fs::write(
        out.join("loss.svg"),
        line_chart("finetuning loss", "iteration", "loss", &series, false),
    )?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionSummary {
    pub traces: Vec<InversionTrace>,
}

pub fn inversion_settings(
    config: &RunConfig,
    schedule: &NoiseSchedule,
) -> Result<InversionSettings> {
    let c = &config.invert;
    Ok(InversionSettings {
        iterations: c.iterations,
        batch_size: c.batch_size,
        optimizer: c.optimizer.clone(),
        sampler: c.sampler.build(schedule.num_steps())?,
        context: c.context,
        target_context: c.target_context,
        modes: c.modes.clone(),
        seeds: c.seeds.clone(),
        eval_samples: c.eval_samples,
    })
}

pub fn run_invert(config: &RunConfig, base_path: &Path, out: &Path) -> Result<InversionSummary> {
    prepare_out(out, config)?;
    let bench = Bench::new(config)?;
    let ckpt = Checkpoint::read(base_path)?;
    bench.check_compatible(&ckpt)?;
    let base = ckpt.model()?;
    let settings = inversion_settings(config, &bench.schedule)?;
    if settings.context >= base.num_contexts() || settings.target_context >= base.num_contexts() {
        return Err(Error::Index("inversion context out of range".into()));
    }
    let traces = run_inversion_benchmark(&base, &bench.schedule, &bench.extractors, &settings)?;
    write_jsonl(&out.join("traces.jsonl"), &traces)?;
    let series: Vec<(String, Vec<(f64, f64)>)> = traces
        .iter()
        .map(|t| {
            (
                format!("{:?} seed {}", t.mode, t.seed),
                t.losses
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| (i as f64, l))
                    .collect(),
            )
        })
        .collect();
    let s: Vec<Series<'_>> = series
        .iter()
        .map(|(n, p)| Series {
            name: n,
            points: p.clone(),
            band: None,
        })
        .collect();
    fs::write(
        out.join("inversion.svg"),
        line_chart("prefix inversion loss", "iteration", "loss", &s, true),
    )?;
    Ok(InversionSummary { traces })
}

/// One line of an evaluation report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportRecord {
    Summary {
        family: String,
        attributes: Vec<String>,
        bias_mean: f64,
        bias_std: f64,
        freq_mean: Vec<f64>,
        freq_std: Vec<f64>,
        /// Class with the smallest target probability (or class 1 for
        /// uniform targets) and its frequency statistics.
        minority_class: usize,
        minority_freq_mean: f64,
        minority_freq_std: f64,
        semantics_mean: Option<f64>,
        disagreement_mean: Option<f64>,
    },
    Context {
        family: String,
        attributes: Vec<String>,
        context: usize,
        freqs: Vec<f64>,
        bias: f64,
        semantics: Option<f64>,
        disagreement: Option<f64>,
    },
}

pub fn render_report(records: &[ReportRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn parse_report(text: &str) -> Result<Vec<ReportRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn minority_class(config: &RunConfig, attributes: &[String], k: usize) -> usize {
    config
        .finetune
        .loss
        .targets
        .iter()
        .find(|t| t.attributes == attributes)
        .and_then(|t| t.probs.as_ref())
        .map(|p| {
            let mut best = 0;
            for (i, v) in p.iter().enumerate() {
                if *v < p[best] {
                    best = i;
                }
            }
            best
        })
        .unwrap_or(k.saturating_sub(1))
}

pub fn report_records(config: &RunConfig, evals: &[FamilyEval]) -> Vec<ReportRecord> {
    let mut out = Vec::new();
    for e in evals {
        let r = &e.report;
        let m = minority_class(config, &e.attributes, r.freq_mean.len());
        out.push(ReportRecord::Summary {
            family: e.family.clone(),
            attributes: e.attributes.clone(),
            bias_mean: r.bias_mean,
            bias_std: r.bias_std,
            freq_mean: r.freq_mean.clone(),
            freq_std: r.freq_std.clone(),
            minority_class: m,
            minority_freq_mean: r.freq_mean[m],
            minority_freq_std: r.freq_std[m],
            semantics_mean: r.semantics_mean,
            disagreement_mean: r.disagreement_mean,
        });
        for c in &r.contexts {
            out.push(ReportRecord::Context {
                family: e.family.clone(),
                attributes: e.attributes.clone(),
                context: c.context,
                freqs: c.freqs.clone(),
                bias: c.bias,
                semantics: c.semantics,
                disagreement: c.disagreement,
            });
        }
    }
    out
}

/// Evaluates a checkpoint on held-out contexts. Finetuned checkpoints are
/// compared against their base for similarity.
pub fn run_evaluate(config: &RunConfig, ckpt_path: &Path, out: &Path) -> Result<Vec<ReportRecord>> {
    prepare_out(out, config)?;
    let bench = Bench::new(config)?;
    let ckpt = Checkpoint::read(ckpt_path)?;
    bench.check_compatible(&ckpt)?;
    let model = ckpt.model()?;
    let frozen = match &ckpt.header.base {
        Some(b) => Some(Checkpoint::read(&b.path)?.model()?),
        None => None,
    };
    let evals = evaluate_families(
        &bench,
        &model,
        frozen.as_ref(),
        Split::Heldout,
        config.evaluate.n_per_context,
    )?;
    let records = report_records(config, &evals);
    fs::write(out.join("report.jsonl"), render_report(&records)?)?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub t: usize,
    pub naive_mean: f64,
    pub naive_lo: f64,
    pub naive_hi: f64,
    pub scaled_mean: f64,
    pub scaled_lo: f64,
    pub scaled_hi: f64,
    pub plain_mean: f64,
    pub plain_lo: f64,
    pub plain_hi: f64,
}

/// Gradient magnitude diagnostic over the full ancestral chain.
pub fn diagnose_model(bench: &Bench, model: &DenoiserModel) -> Result<GradDiagnostics> {
    let c = &bench.config.diagnose;
    let mut sampler = SamplerConfig::full(bench.schedule.num_steps(), true);
    sampler.guidance_weight = c.guidance_weight;
    if c.context >= model.num_contexts() {
        return Err(Error::Index(format!(
            "context {} of {}",
            c.context,
            model.num_contexts()
        )));
    }
    diagnose_gradients(
        model,
        Conditioning::Context(c.context),
        &bench.schedule,
        &sampler,
        c.runs,
        derive_seed(bench.config.seed, &[0xD1A6, c.seed]),
    )
}

pub fn run_diagnose(config: &RunConfig, ckpt_path: &Path, out: &Path) -> Result<GradDiagnostics> {
    prepare_out(out, config)?;
    let bench = Bench::new(config)?;
    let ckpt = Checkpoint::read(ckpt_path)?;
    bench.check_compatible(&ckpt)?;
    let model = ckpt.model()?;
    let diag = diagnose_model(&bench, &model)?;
    let rows: Vec<DiagnosticRow> = diag
        .summary
        .iter()
        .map(|s| DiagnosticRow {
            t: s.t,
            naive_mean: s.naive.mean,
            naive_lo: s.naive.lo,
            naive_hi: s.naive.hi,
            scaled_mean: s.scaled.mean,
            scaled_lo: s.scaled.lo,
            scaled_hi: s.scaled.hi,
            plain_mean: s.plain.mean,
            plain_lo: s.plain.lo,
            plain_hi: s.plain.hi,
        })
        .collect();
    write_jsonl(&out.join("diagnostics.jsonl"), &rows)?;
    let meta = serde_json::json!({ "runs": diag.runs, "norm": diag.norm, "r_variance": diag.r_variance, "context": config.diagnose.context });
    fs::write(
        out.join("diagnostics_meta.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    if config.diagnose.plot {
        let mk =
            |f: &dyn Fn(&DiagnosticRow) -> (f64, f64, f64)| -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
                rows.iter()
                    .map(|r| {
                        let (m, lo, hi) = f(r);
                        ((r.t as f64, m), (lo, hi))
                    })
                    .unzip()
            };
        let (np, nb) = mk(&|r| (r.naive_mean, r.naive_lo, r.naive_hi));
        let (sp, sb) = mk(&|r| (r.scaled_mean, r.scaled_lo, r.scaled_hi));
        let (pp, pb) = mk(&|r| (r.plain_mean, r.plain_lo, r.plain_hi));
        let series = [
            Series {
                name: "|R A B deps/dtheta|",
                points: np,
                band: Some(nb),
            },
            Series {
                name: "|R A deps/dtheta|",
                points: sp,
                band: Some(sb),
            },
            Series {
                name: "|R deps/dtheta|",
                points: pp,
                band: Some(pb),
            },
        ];
        fs::write(
            out.join("diagnostics.svg"),
            line_chart(
                "gradient magnitude per step",
                "t",
                "magnitude",
                &series,
                true,
            ),
        )?;
    }
    Ok(diag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FinetuneTarget, ParamGroup};

    /// Small enough that a full pretrain-finetune-evaluate cycle takes
    /// about a second.
    pub(crate) fn quick() -> RunConfig {
        let mut c = RunConfig::default();
        c.data.train_samples = 512;
        c.data.reference_samples = 64;
        c.pretrain.iterations = 40;
        c.finetune.iterations = 4;
        c.finetune.batch_size = 6;
        c.finetune.checkpoint_every = 2;
        c.finetune.validation_samples = 6;
        c.evaluate.n_per_context = 6;
        c.invert.iterations = 2;
        c.invert.batch_size = 2;
        c.invert.seeds = vec![1];
        c.invert.eval_samples = 2;
        c.diagnose.runs = 2;
        c.diagnose.plot = false;
        c
    }

    fn base(dir: &Path) -> PathBuf {
        run_pretrain(&quick(), dir).unwrap().checkpoint
    }

    #[test]
    fn pretraining_is_reproducible() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (pa, pb) = (base(a.path()), base(b.path()));
        assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = base(dir.path());
        let ckpt = Checkpoint::read(&path).unwrap();
        let copy = dir.path().join("copy.ckpt");
        ckpt.write(&copy).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&copy).unwrap());
        let (m1, m2) = (
            ckpt.model().unwrap(),
            Checkpoint::read(&copy).unwrap().model().unwrap(),
        );
        assert!(m1
            .params()
            .iter()
            .zip(m2.params())
            .all(|(a, b)| a.to_bits() == b.to_bits()));

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&copy, &bytes).unwrap();
        assert!(matches!(Checkpoint::read(&copy), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn finetuning_touches_only_the_target_group() {
        let dir = tempfile::tempdir().unwrap();
        let base_path = base(&dir.path().join("base"));
        let base_model = Checkpoint::read(&base_path).unwrap().model().unwrap();
        for (i, target) in [
            FinetuneTarget::ContextTable,
            FinetuneTarget::Prefix,
            FinetuneTarget::FullNetwork,
            FinetuneTarget::LowRankAdapter { rank: 2 },
        ]
        .into_iter()
        .enumerate()
        {
            let mut cfg = quick();
            cfg.finetune.target = target.clone();
            let s = run_finetune(&cfg, &base_path, &dir.path().join(format!("ft{i}"))).unwrap();
            assert_eq!(s.frozen_hash_before, s.frozen_hash_after, "{target:?}");
            let tuned = Checkpoint::read(&s.last).unwrap().model().unwrap();
            for g in [
                ParamGroup::Encoder,
                ParamGroup::NullEmbedding,
                ParamGroup::Prefix,
                ParamGroup::Denoiser,
            ] {
                if target.groups().contains(&g) {
                    continue;
                }
                for (rb, rt) in base_model.group_ranges(g).iter().zip(tuned.group_ranges(g)) {
                    let (b, t) = (&base_model.params()[rb.clone()], &tuned.params()[rt]);
                    assert!(
                        b.iter().zip(t).all(|(x, y)| x.to_bits() == y.to_bits()),
                        "{target:?} changed {g:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_loss_leaves_parameters_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let base_path = base(&dir.path().join("base"));
        let mut cfg = quick();
        cfg.finetune.loss.lambda_face = 0.0;
        cfg.finetune.loss.lambda_img = [0.0; 3];
        cfg.finetune.loss.confidence_threshold = 1.0;
        let s = run_finetune(&cfg, &base_path, &dir.path().join("ft")).unwrap();
        let a = Checkpoint::read(&base_path).unwrap().model().unwrap();
        let b = Checkpoint::read(&s.last).unwrap().model().unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn finetune_batches_pair_noise_with_the_frozen_model() {
        let dir = tempfile::tempdir().unwrap();
        let base_path = base(&dir.path().join("base"));
        let out = dir.path().join("ft");
        run_finetune(&quick(), &base_path, &out).unwrap();
        let rows: Vec<serde_json::Value> = read_jsonl(&out.join("log.jsonl")).unwrap();
        let digests: Vec<_> = rows
            .iter()
            .filter_map(|r| Some((r.get("noise_digest")?, r.get("frozen_noise_digest")?)))
            .collect();
        assert_eq!(digests.len(), quick().finetune.iterations);
        assert!(digests.iter().all(|(a, b)| a == b));
        assert!(digests.windows(2).all(|w| w[0].0 != w[1].0));
    }

    #[test]
    fn evaluation_reports_reproduce_and_rerender() {
        let dir = tempfile::tempdir().unwrap();
        let base_path = base(&dir.path().join("base"));
        let a = run_evaluate(&quick(), &base_path, &dir.path().join("e1")).unwrap();
        let b = run_evaluate(&quick(), &base_path, &dir.path().join("e2")).unwrap();
        assert_eq!(a, b);
        let text = fs::read_to_string(dir.path().join("e1/report.jsonl")).unwrap();
        assert_eq!(render_report(&parse_report(&text).unwrap()).unwrap(), text);
    }

    #[test]
    fn presets_match_shipped_configs() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
        let two = RunConfig::load(Some(&dir.join("two_attribute.toml")), &[]).unwrap();
        assert_eq!(two, RunConfig::two_attribute_preset());
        let multi = RunConfig::load(Some(&dir.join("multi_family.toml")), &[]).unwrap();
        assert_eq!(multi, RunConfig::multi_family_preset());
    }
}

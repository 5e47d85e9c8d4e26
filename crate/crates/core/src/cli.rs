//! Command-line front end. The binary is a thin wrapper around
//! [`main_with`] so the whole command surface is testable in-process.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::pipeline::{self, ReportRecord};
use crate::Result;

#[derive(Parser)]
#[command(
    name = "fairdiff",
    version,
    about = "Distributional alignment finetuning of toy diffusion models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; for commands that read a checkpoint it is
    /// layered over the configuration recorded in the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for this stage's randomness.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a configuration key, e.g. `--set finetune.iterations=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the biased base model.
    Pretrain(Common),
    /// Finetune a base checkpoint with the alignment loss.
    Finetune {
        #[arg(long)]
        base: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare gradient modes on soft-prefix inversion.
    Invert {
        #[arg(long)]
        base: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Measure bias and similarity of a checkpoint on held-out contexts.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Export per-step gradient magnitudes.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common, from: Option<&Path>, seed_key: Option<&str>) -> Result<RunConfig> {
    let base = match from {
        Some(p) => Checkpoint::read(p)?.header.config,
        None => RunConfig::default(),
    };
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    let mut overrides = common.overrides.clone();
    if let (Some(s), Some(key)) = (common.seed, seed_key) {
        overrides.push(format!("{key}={s}"));
    }
    base.layered(&text, &overrides)
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Pretrain(c) => {
            let cfg = resolve(&c, None, Some("seed"))?;
            let s = pipeline::run_pretrain(&cfg, &c.out)?;
            writeln!(out, "checkpoint {}", s.checkpoint.display())?;
            writeln!(out, "final loss {:.5}", s.final_loss)?;
            for e in &s.evaluation {
                writeln!(
                    out,
                    "{} {:?} held-out bias {:.3} +- {:.3}",
                    e.family, e.attributes, e.report.bias_mean, e.report.bias_std
                )?;
            }
        }
        Command::Finetune { base, common } => {
            let cfg = resolve(&common, Some(&base), Some("finetune.seed"))?;
            let s = pipeline::run_finetune(&cfg, &base, &common.out)?;
            if let Some(h) = &s.halted {
                eprintln!("halted: {h}");
            }
            match (&s.best, s.best_iteration) {
                (Some(p), Some(i)) => {
                    writeln!(out, "best checkpoint {} (iteration {i})", p.display())
                }
                _ => writeln!(
                    out,
                    "no checkpoint met the semantics floor; last is {}",
                    s.last.display()
                ),
            }?;
            for (b, t) in s.base_eval.iter().zip(&s.tuned_eval) {
                writeln!(
                    out,
                    "{} {:?} held-out bias {:.3} -> {:.3}, semantics {:.3}",
                    t.family,
                    t.attributes,
                    b.report.bias_mean,
                    t.report.bias_mean,
                    t.report.semantics_mean.unwrap_or(f64::NAN)
                )?;
            }
        }
        Command::Invert { base, common } => {
            let mut cfg = resolve(&common, Some(&base), None)?;
            if let Some(s) = common.seed {
                cfg.invert.seeds = vec![s, s + 1, s + 2];
            }
            let s = pipeline::run_invert(&cfg, &base, &common.out)?;
            for t in &s.traces {
                writeln!(
                    out,
                    "{:?} seed {} loss {:.4} -> {:.4} (ratio {:.3})",
                    t.mode,
                    t.seed,
                    t.initial_loss,
                    t.final_loss,
                    t.ratio()
                )?;
            }
        }
        Command::Evaluate { checkpoint, common } => {
            let cfg = resolve(&common, Some(&checkpoint), Some("evaluate.seed"))?;
            for r in pipeline::run_evaluate(&cfg, &checkpoint, &common.out)? {
                if let ReportRecord::Summary {
                    family,
                    attributes,
                    bias_mean,
                    bias_std,
                    minority_class,
                    minority_freq_mean,
                    minority_freq_std,
                    semantics_mean,
                    ..
                } = r
                {
                    write!(out, "{family} {attributes:?} bias {bias_mean:.3} +- {bias_std:.3}, class {minority_class} freq {minority_freq_mean:.3} +- {minority_freq_std:.3}")?;
                    if let Some(s) = semantics_mean {
                        write!(out, ", semantics {s:.3}")?;
                    }
                    writeln!(out)?;
                }
            }
        }
        Command::Diagnose { checkpoint, common } => {
            let cfg = resolve(&common, Some(&checkpoint), Some("diagnose.seed"))?;
            let d = pipeline::run_diagnose(&cfg, &checkpoint, &common.out)?;
            writeln!(
                out,
                "top/bottom decile ratio: naive {:.3}, scaled {:.3}, plain {:.3}",
                d.decile_ratio(|s| s.naive.mean),
                d.decile_ratio(|s| s.scaled.mean),
                d.decile_ratio(|s| s.plain.mean)
            )?;
        }
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Errors go to stderr.
pub fn main_with<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

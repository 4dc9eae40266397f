use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use jova_harness::ablate::Axis;
use jova_harness::commands::{
    ablate_cmd, grad_check_cmd, mask_check_cmd, report_cmd, sample_cmd, train_cmd,
    GradCheckOptions, MIN_MASK_SCENES,
};
use jova_harness::config::resolve_output;
use jova_harness::ExperimentConfig;

#[derive(Parser)]
#[command(name = "jova", version, about = "Joint video-audio flow matching on a toy world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-stage training followed by held-out evaluation.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate scenes from a checkpoint and score them.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Refuse unless this config's hash matches the checkpoint's.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one or more axes over several training seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// lambda, rope, or fusion; repeatable. Defaults to all three.
        #[arg(long = "axis")]
        axes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Defaults to the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Zero-mask locality of the video codec on random avatar scenes.
    MaskCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = MIN_MASK_SCENES)]
        scenes: usize,
        #[arg(long, default_value = "mask_check.csv")]
        out: PathBuf,
    },
    /// Finite-difference check of the training loss gradient.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        entries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rebuild report.md from a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn load(path: Option<&PathBuf>) -> anyhow::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train { config } => {
            let cfg = load(Some(&config))?;
            let report = train_cmd(&cfg)?;
            println!(
                "{}: mean sync_score {:.4}, mean transcript_error {:.4}",
                cfg.output_dir().display(),
                report.eval.mean_sync_score,
                report.eval.mean_transcript_error
            );
        }
        Command::Sample {
            checkpoint,
            config,
            count,
            seed,
            out,
        } => {
            let expected = config.as_ref().map(|p| load(Some(p))).transpose()?;
            let out = resolve_output(&out);
            let outcome = sample_cmd(&checkpoint, expected.as_ref(), count, seed, &out)?;
            println!("wrote {} scenes to {}", outcome.rows.len(), out.display());
        }
        Command::Ablate {
            config,
            axes,
            seeds,
            out,
        } => {
            let cfg = load(Some(&config))?;
            let axes = if axes.is_empty() {
                Axis::ALL.to_vec()
            } else {
                axes.iter()
                    .map(|a| Axis::parse(a).with_context(|| format!("unknown axis {a:?}")))
                    .collect::<anyhow::Result<_>>()?
            };
            let out = out.map(|p| resolve_output(&p));
            let result = ablate_cmd(&cfg, &axes, &seeds, out.as_deref())?;
            print!("{}", result.to_markdown());
        }
        Command::MaskCheck {
            config,
            scenes,
            out,
        } => {
            let cfg = load(config.as_ref())?;
            let out = resolve_output(&out);
            let outcome = mask_check_cmd(&cfg, scenes, Some(&out))?;
            print!("{}", outcome.render());
            if outcome.failures() > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::GradCheck {
            config,
            entries,
            seed,
        } => {
            let cfg = load(config.as_ref())?;
            let opts = GradCheckOptions {
                entries,
                seed,
                ..GradCheckOptions::default()
            };
            let report = grad_check_cmd(&cfg, &opts)?;
            for (name, idx, a, n, e) in &report.probes {
                println!("{name}[{idx}]: analytic {a:.6e} numeric {n:.6e} rel {e:.3e}");
            }
            println!(
                "max relative error {:.3e} (threshold {:.0e})",
                report.max_rel_error, report.threshold
            );
            if !report.passed() {
                bail!("gradient check failed");
            }
        }
        Command::Report { run } => print!("{}", report_cmd(&resolve_output(&run))?),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

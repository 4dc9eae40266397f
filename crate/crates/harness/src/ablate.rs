//! One-axis ablation sweeps over a shared dataset.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use jova_core::model::{Fusion, RopeMode};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::run::{execute, run_dir_for, RunReport};
use crate::{HarnessError, Result};

/// Mouth-loss weights compared on the lambda axis.
pub const LAMBDA_SWEEP: [f64; 4] = [0.0, 2.0, 5.0, 8.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Lambda,
    Rope,
    Fusion,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Lambda, Axis::Rope, Axis::Fusion];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Lambda => "lambda",
            Axis::Rope => "rope",
            Axis::Fusion => "fusion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// The single config key this axis varies.
    pub fn key(self) -> &'static str {
        match self {
            Axis::Lambda => "train.lambda",
            Axis::Rope => "model.rope_mode",
            Axis::Fusion => "model.fusion",
        }
    }

    /// One config per arm, everything else copied from `base`.
    pub fn arms(self, base: &ExperimentConfig) -> Vec<Arm> {
        let arm = |label: &str, f: &dyn Fn(&mut ExperimentConfig)| {
            let mut config = base.clone();
            f(&mut config);
            Arm {
                axis: self,
                label: label.to_string(),
                config,
            }
        };
        match self {
            Axis::Lambda => LAMBDA_SWEEP
                .iter()
                .map(|&l| arm(&format!("{l:.1}"), &|c| c.train.lambda = l))
                .collect(),
            Axis::Rope => vec![
                arm("aligned", &|c| c.model.rope_mode = RopeMode::TemporalAligned),
                arm("per_modality", &|c| c.model.rope_mode = RopeMode::PerModality),
            ],
            Axis::Fusion => vec![
                arm("joint", &|c| c.model.fusion = Fusion::Joint),
                arm("cross_linear", &|c| c.model.fusion = Fusion::CrossLinear),
                arm("cross_plain", &|c| c.model.fusion = Fusion::CrossPlain),
            ],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Arm {
    pub axis: Axis,
    pub label: String,
    pub config: ExperimentConfig,
}

/// Every pair of arms must differ in exactly the axis key.
pub fn check_arms(arms: &[Arm]) -> Result<()> {
    for (i, a) in arms.iter().enumerate() {
        for b in &arms[i + 1..] {
            let diff = a.config.diff(&b.config);
            let ok = diff.len() == 1 && diff[0].starts_with(&format!("{}:", a.axis.key()));
            if !ok {
                return Err(HarnessError::Refused(format!(
                    "arms {} and {} must differ only in {}; found {:?}",
                    a.label,
                    b.label,
                    a.axis.key(),
                    diff
                )));
            }
        }
    }
    Ok(())
}

/// Held-out result of one arm at one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub axis: Axis,
    pub arm: String,
    pub seed: u64,
    pub config_hash: String,
    pub manifest: String,
    pub sync_score: f64,
    pub transcript_error: f64,
    pub recon_mse_video: f64,
    pub recon_mse_audio: f64,
    pub run_dir: PathBuf,
}

/// Seed medians of one arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub axis: Axis,
    pub arm: String,
    pub median_sync_score: f64,
    pub median_transcript_error: f64,
    pub sync_by_seed: Vec<f64>,
    pub transcript_error_by_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub manifest: String,
    pub runs: Vec<ArmRun>,
    /// Per axis, ranked by median sync score, best first.
    pub summaries: Vec<ArmSummary>,
}

impl AblationResult {
    pub fn summary(&self, axis: Axis, arm: &str) -> Option<&ArmSummary> {
        self.summaries.iter().find(|s| s.axis == axis && s.arm == arm)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Ablation\n");
        let _ = writeln!(s, "Data manifest `{}`. Medians over seeds.\n", self.manifest);
        for axis in Axis::ALL {
            let rows: Vec<&ArmSummary> = self.summaries.iter().filter(|r| r.axis == axis).collect();
            if rows.is_empty() {
                continue;
            }
            let _ = writeln!(s, "## {} ({})\n", axis.name(), axis.key());
            let _ = writeln!(s, "| rank | arm | sync_score | transcript_error | sync by seed |");
            let _ = writeln!(s, "|---:|---|---:|---:|---|");
            for (rank, r) in rows.iter().enumerate() {
                let seeds: Vec<String> = r.sync_by_seed.iter().map(|v| format!("{v:.3}")).collect();
                let _ = writeln!(
                    s,
                    "| {} | {} | {:.4} | {:.4} | {} |",
                    rank + 1,
                    r.arm,
                    r.median_sync_score,
                    r.median_transcript_error,
                    seeds.join(", ")
                );
            }
            let _ = writeln!(s);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "axis",
            "arm",
            "seed",
            "sync_score",
            "transcript_error",
            "recon_mse_video",
            "recon_mse_audio",
            "config_hash",
        ])?;
        for r in &self.runs {
            w.write_record([
                r.axis.name().to_string(),
                r.arm.clone(),
                r.seed.to_string(),
                r.sync_score.to_string(),
                r.transcript_error.to_string(),
                r.recon_mse_video.to_string(),
                r.recon_mse_audio.to_string(),
                r.config_hash.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains and evaluates every arm of every axis at every seed. Runs live in
/// `<root>/runs/<hash>`; a directory holding a complete run with the same
/// config hash is reused. Writes `table.md`, `table.csv`, and
/// `ablation.json` into `root`.
pub fn run_ablation(
    base: &ExperimentConfig,
    axes: &[Axis],
    seeds: &[u64],
    root: &Path,
    threads: usize,
) -> Result<AblationResult> {
    base.validate()?;
    if seeds.is_empty() {
        return Err(HarnessError::Config("ablation needs at least one seed".into()));
    }
    fs::create_dir_all(root)?;
    let data = Dataset::build(base)?;

    let mut jobs: Vec<(Axis, String, u64, ExperimentConfig)> = Vec::new();
    for &axis in axes {
        let arms = axis.arms(base);
        check_arms(&arms)?;
        for arm in arms {
            for &seed in seeds {
                let mut cfg = arm.config.clone();
                cfg.train.seed = seed;
                cfg.run.output_dir = run_dir_for(root, &cfg);
                jobs.push((axis, arm.label.clone(), seed, cfg));
            }
        }
    }

    // Identical configs (the base arm shows up on every axis) run once.
    let mut unique: BTreeMap<String, ExperimentConfig> = BTreeMap::new();
    for (_, _, _, cfg) in &jobs {
        unique.entry(cfg.hash()).or_insert_with(|| cfg.clone());
    }
    let unique: Vec<ExperimentConfig> = unique.into_values().collect();
    let reports = run_all(&unique, &data, threads)?;

    let mut runs = Vec::with_capacity(jobs.len());
    for (axis, arm, seed, cfg) in jobs {
        let r = &reports[&cfg.hash()];
        if r.meta.manifest != data.manifest {
            return Err(HarnessError::Refused(format!(
                "arm {arm} seed {seed} used data manifest {} instead of {}",
                r.meta.manifest, data.manifest
            )));
        }
        runs.push(ArmRun {
            axis,
            arm,
            seed,
            config_hash: r.meta.config_hash.clone(),
            manifest: r.meta.manifest.clone(),
            sync_score: r.eval.mean_sync_score,
            transcript_error: r.eval.mean_transcript_error,
            recon_mse_video: r.eval.recon_mse_video,
            recon_mse_audio: r.eval.recon_mse_audio,
            run_dir: cfg.run.output_dir.clone(),
        });
    }

    let mut summaries = Vec::new();
    for &axis in axes {
        let mut rows: Vec<ArmSummary> = axis
            .arms(base)
            .into_iter()
            .map(|arm| {
                let mine: Vec<&ArmRun> = runs
                    .iter()
                    .filter(|r| r.axis == axis && r.arm == arm.label)
                    .collect();
                let sync: Vec<f64> = mine.iter().map(|r| r.sync_score).collect();
                let te: Vec<f64> = mine.iter().map(|r| r.transcript_error).collect();
                ArmSummary {
                    axis,
                    arm: arm.label,
                    median_sync_score: median(&sync),
                    median_transcript_error: median(&te),
                    sync_by_seed: sync,
                    transcript_error_by_seed: te,
                }
            })
            .collect();
        rows.sort_by(|a, b| b.median_sync_score.total_cmp(&a.median_sync_score));
        summaries.extend(rows);
    }

    let result = AblationResult {
        manifest: data.manifest.clone(),
        runs,
        summaries,
    };
    fs::write(root.join("table.md"), result.to_markdown())?;
    result.write_csv(&root.join("table.csv"))?;
    fs::write(root.join("ablation.json"), serde_json::to_string_pretty(&result)?)?;
    Ok(result)
}

fn cached(cfg: &ExperimentConfig) -> Option<RunReport> {
    let dir = &cfg.run.output_dir;
    if !dir.join("report.md").exists() {
        return None;
    }
    RunReport::load(dir).ok().filter(|r| r.meta.config_hash == cfg.hash())
}

/// Runs configs on up to `threads` worker threads; each run owns its
/// directory, so workers share nothing mutable but the result map.
fn run_all(
    configs: &[ExperimentConfig],
    data: &Dataset,
    threads: usize,
) -> Result<BTreeMap<String, RunReport>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<BTreeMap<String, Result<RunReport>>> = Mutex::new(BTreeMap::new());
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, configs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = configs.get(i) else { break };
                let report = match cached(cfg) {
                    Some(r) => {
                        log::info!("reusing {}", cfg.run.output_dir.display());
                        Ok(r)
                    }
                    None => {
                        log::info!("training {}", cfg.run.output_dir.display());
                        execute(cfg, data, &cfg.run.output_dir)
                    }
                };
                results.lock().expect("no panics while holding the lock").insert(cfg.hash(), report);
            });
        }
    });
    results
        .into_inner()
        .expect("workers have joined")
        .into_iter()
        .map(|(k, v)| v.map(|r| (k, r)))
        .collect()
}

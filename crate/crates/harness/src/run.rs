//! Run directories: what a run writes and how it is read back.
//!
//! ```text
//! <dir>/config.toml            exact config of the run
//! <dir>/checkpoint_stage1.jova parameters after stage 1
//! <dir>/checkpoint.jova        final parameters
//! <dir>/metrics.csv            step,l_video,l_audio,l_mouth,l_total
//! <dir>/eval.csv               scene_id,sync_score,transcript_error
//! <dir>/run.json               hashes, wall-clock, reconstruction errors
//! <dir>/report.md              rendered from the files above
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use jova_core::model::JovaModel;
use jova_tensor::Checkpoint;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::eval::{evaluate, EvalRow, EvalSummary};
use crate::train::{init_model, train, StepRecord};
use crate::{HarnessError, Result};

pub const METRICS_HEADER: [&str; 5] = ["step", "l_video", "l_audio", "l_mouth", "l_total"];
pub const EVAL_HEADER: [&str; 3] = ["scene_id", "sync_score", "transcript_error"];

const META_HASH: &str = "__meta__/config_hash";
const META_CONFIG: &str = "__meta__/config";
const PARAM_PREFIX: &str = "params/";

/// Per-step losses with the weight that was in force.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub stage: u8,
    pub lambda: f64,
    pub l_video: f64,
    pub l_audio: f64,
    pub l_mouth: f64,
    pub l_total: f64,
}

/// Scalars that do not fit the CSV files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_hash: String,
    pub manifest: String,
    pub wall_clock_secs: f64,
    pub recon_mse_video: f64,
    pub recon_mse_audio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub meta: RunMeta,
    pub series: Vec<LossRow>,
    pub eval: EvalSummary,
}

impl RunReport {
    /// Rebuilds the report from a run directory alone.
    pub fn load(dir: &Path) -> Result<Self> {
        let config = ExperimentConfig::load(dir.join("config.toml"))?;
        let meta: RunMeta = serde_json::from_str(&fs::read_to_string(dir.join("run.json"))?)?;
        if meta.config_hash != config.hash() {
            return Err(HarnessError::Refused(format!(
                "{}: run.json hash {} does not match config.toml hash {}",
                dir.display(),
                meta.config_hash,
                config.hash()
            )));
        }
        let series = read_metrics(&dir.join("metrics.csv"))?
            .into_iter()
            .map(|[step, l_video, l_audio, l_mouth, l_total]| {
                let step = step as usize;
                let stage1 = step < config.train.stage1_steps;
                LossRow {
                    step,
                    stage: if stage1 { 1 } else { 2 },
                    lambda: if stage1 { 0.0 } else { config.train.lambda },
                    l_video,
                    l_audio,
                    l_mouth,
                    l_total,
                }
            })
            .collect();
        let rows = read_eval(&dir.join("eval.csv"))?;
        let n = rows.len().max(1) as f64;
        let eval = EvalSummary {
            mean_sync_score: rows.iter().map(|r| r.sync_score).sum::<f64>() / n,
            mean_transcript_error: rows.iter().map(|r| r.transcript_error).sum::<f64>() / n,
            rows,
            recon_mse_video: meta.recon_mse_video,
            recon_mse_audio: meta.recon_mse_audio,
        };
        Ok(Self {
            config,
            meta,
            series,
            eval,
        })
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let c = &self.config;
        let _ = writeln!(s, "# Run report\n");
        let _ = writeln!(s, "- config hash: `{}`", self.meta.config_hash);
        let _ = writeln!(s, "- data manifest: `{}`", self.meta.manifest);
        let _ = writeln!(
            s,
            "- fusion `{:?}`, rope `{:?}`, lambda {}",
            c.model.fusion, c.model.rope_mode, c.train.lambda
        );
        let _ = writeln!(
            s,
            "- schedule: {} + {} steps, batch {}, seed {}",
            c.train.stage1_steps, c.train.stage2_steps, c.train.batch_size, c.train.seed
        );
        let _ = writeln!(s, "- wall-clock: {:.1} s\n", self.meta.wall_clock_secs);

        let _ = writeln!(s, "## Losses\n");
        let _ = writeln!(s, "| step | stage | l_video | l_audio | l_mouth | l_total |");
        let _ = writeln!(s, "|---:|---:|---:|---:|---:|---:|");
        for r in thin(&self.series, 12) {
            let _ = writeln!(
                s,
                "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |",
                r.step, r.stage, r.l_video, r.l_audio, r.l_mouth, r.l_total
            );
        }

        let e = &self.eval;
        let _ = writeln!(s, "\n## Held-out evaluation ({} scenes)\n", e.rows.len());
        let _ = writeln!(s, "| metric | value |");
        let _ = writeln!(s, "|---|---:|");
        let _ = writeln!(s, "| mean sync_score | {:.4} |", e.mean_sync_score);
        let _ = writeln!(s, "| mean transcript_error | {:.4} |", e.mean_transcript_error);
        let _ = writeln!(s, "| recon MSE video | {:.5} |", e.recon_mse_video);
        let _ = writeln!(s, "| recon MSE audio | {:.5} |", e.recon_mse_audio);
        s
    }
}

/// First, last, and evenly spaced rows in between.
fn thin(rows: &[LossRow], n: usize) -> Vec<LossRow> {
    if rows.len() <= n {
        return rows.to_vec();
    }
    let mut idx: Vec<usize> = (0..n).map(|k| k * (rows.len() - 1) / (n - 1)).collect();
    idx.dedup();
    idx.into_iter().map(|i| rows[i]).collect()
}

/// Trains, evaluates, and writes every artifact into `dir`.
pub fn execute(cfg: &ExperimentConfig, data: &Dataset, dir: &Path) -> Result<RunReport> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let started = Instant::now();
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let outcome = train(cfg, data, |stage, model| {
        let name = if stage == 1 {
            "checkpoint_stage1.jova"
        } else {
            "checkpoint.jova"
        };
        save_model(&dir.join(name), model, cfg)
    })?;
    write_metrics(&dir.join("metrics.csv"), &outcome.records)?;
    let eval = evaluate(&outcome.model, cfg, &data.heldout)?;
    write_eval(&dir.join("eval.csv"), &eval.rows)?;
    let meta = RunMeta {
        config_hash: cfg.hash(),
        manifest: data.manifest.clone(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        recon_mse_video: eval.recon_mse_video,
        recon_mse_audio: eval.recon_mse_audio,
    };
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&meta)?)?;
    let report = RunReport::load(dir)?;
    fs::write(dir.join("report.md"), report.to_markdown())?;
    Ok(report)
}

pub fn save_model(path: &Path, model: &JovaModel, cfg: &ExperimentConfig) -> Result<()> {
    let mut ckpt = Checkpoint::new();
    ckpt.push_text(META_HASH, &cfg.hash())?;
    ckpt.push_text(META_CONFIG, &cfg.to_toml())?;
    model.params().write_into(&mut ckpt, PARAM_PREFIX)?;
    ckpt.save(path)?;
    Ok(())
}

/// A checkpoint with the config it was trained under.
pub struct LoadedModel {
    pub model: JovaModel,
    pub config: ExperimentConfig,
    pub config_hash: String,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let ckpt = Checkpoint::load(path)?;
    let config = ExperimentConfig::from_toml(&ckpt.text(META_CONFIG)?)?;
    let config_hash = ckpt.text(META_HASH)?;
    if config_hash != config.hash() {
        return Err(HarnessError::Refused(format!(
            "{}: stored hash {config_hash} does not match its embedded config",
            path.display()
        )));
    }
    let mut model = init_model(&config)?;
    model.params_mut().read_from(&ckpt, PARAM_PREFIX)?;
    Ok(LoadedModel {
        model,
        config,
        config_hash,
    })
}

pub fn write_metrics(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in records {
        let l = &r.losses;
        w.write_record([
            r.step.to_string(),
            l.l_video.to_string(),
            l.l_audio.to_string(),
            l.l_mouth.to_string(),
            l.l_total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<[f64; 5]>> {
    let mut r = csv::Reader::from_path(path)?;
    check_header(r.headers()?, &METRICS_HEADER, path)?;
    r.deserialize::<[f64; 5]>()
        .map(|row| row.map_err(HarnessError::from))
        .collect()
}

pub fn write_eval(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(EVAL_HEADER)?;
    for r in rows {
        w.write_record([
            r.scene_id.to_string(),
            r.sync_score.to_string(),
            r.transcript_error.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_eval(path: &Path) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_path(path)?;
    check_header(r.headers()?, &EVAL_HEADER, path)?;
    r.deserialize::<EvalRow>()
        .map(|row| row.map_err(HarnessError::from))
        .collect()
}

fn check_header(found: &csv::StringRecord, want: &[&str], path: &Path) -> Result<()> {
    if found.iter().ne(want.iter().copied()) {
        return Err(HarnessError::Refused(format!(
            "{}: header {:?} differs from {:?}",
            path.display(),
            found.iter().collect::<Vec<_>>(),
            want
        )));
    }
    Ok(())
}

/// `dir` joined with the first 16 hex digits of the config hash.
pub fn run_dir_for(root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    root.join("runs").join(&cfg.hash()[..16])
}

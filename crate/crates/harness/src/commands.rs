//! The work behind each `jova` subcommand, callable without the CLI.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use jova_core::flow::{total_loss, FlowSample};
use jova_core::model::{JovaModel, Stage};
use jova_core::mouthmask::{zero_mask_validate, Locality, LocalityReport, MouthMask};
use jova_core::toyworld::{generate_scene, Family};
use jova_tensor::{Checkpoint, DType, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{stream_rng, Codecs, Dataset};
use crate::eval::{generate, score, EvalRow};
use crate::run::{execute, load_model, write_eval, RunReport};
use crate::train::init_model;
use crate::{HarnessError, Result};

pub fn train_cmd(cfg: &ExperimentConfig) -> Result<RunReport> {
    let data = Dataset::build(cfg)?;
    execute(cfg, &data, &cfg.output_dir())
}

/// Regenerates `report.md` from the other files of a run directory.
pub fn report_cmd(dir: &Path) -> Result<String> {
    let md = RunReport::load(dir)?.to_markdown();
    fs::write(dir.join("report.md"), &md)?;
    Ok(md)
}

/// What `sample` records next to its scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub config_hash: String,
    pub checkpoint: PathBuf,
    pub seed: u64,
    pub count: usize,
    pub steps: usize,
    pub guidance_video: f64,
    pub guidance_audio: f64,
}

pub struct SampleOutcome {
    pub meta: SampleMeta,
    pub rows: Vec<EvalRow>,
}

const PROMPT_STREAM: u64 = 3;
const NOISE_STREAM: u64 = 4;

/// Draws `count` avatar prompts from `seed`, samples each with the
/// checkpoint's sampler settings, and writes `scene_NNN.jova`,
/// `samples.csv`, and `meta.json` into `out`. When `expected` is given its
/// hash must match the checkpoint's.
pub fn sample_cmd(
    checkpoint: &Path,
    expected: Option<&ExperimentConfig>,
    count: usize,
    seed: u64,
    out: &Path,
) -> Result<SampleOutcome> {
    let loaded = load_model(checkpoint)?;
    if let Some(want) = expected {
        if want.hash() != loaded.config_hash {
            return Err(HarnessError::HashMismatch {
                expected: want.hash(),
                found: loaded.config_hash,
                diff: want.diff(&loaded.config),
            });
        }
    }
    let cfg = &loaded.config;
    let codecs = Codecs::new(cfg)?;
    fs::create_dir_all(out)?;
    let mut prompts = stream_rng(seed, PROMPT_STREAM);
    let mut noise = stream_rng(seed, NOISE_STREAM);
    let mut rows = Vec::with_capacity(count);
    for i in 0..count {
        let scene = generate_scene(Family::AvatarSpeech, &mut prompts, &cfg.world)?;
        let gen = generate(&loaded.model, cfg, &codecs, &scene, &mut noise)?;
        rows.push(score(cfg, &scene, &gen, i)?);
        let mut ckpt = Checkpoint::new();
        ckpt.push_text("config_hash", &loaded.config_hash)?;
        ckpt.push_tensor("video", &gen.video)?;
        ckpt.push_tensor("audio", &gen.audio)?;
        ckpt.push_tensor(
            "prompt_transcript",
            &Tensor::from_fn([scene.transcript.len()], |k| scene.transcript[k] as f64),
        )?;
        ckpt.save(out.join(format!("scene_{i:03}.jova")))?;
    }
    write_eval(&out.join("samples.csv"), &rows)?;
    let meta = SampleMeta {
        config_hash: loaded.config_hash.clone(),
        checkpoint: checkpoint.to_path_buf(),
        seed,
        count,
        steps: cfg.sampler.steps,
        guidance_video: cfg.sampler.guidance_video,
        guidance_audio: cfg.sampler.guidance_audio,
    };
    fs::write(out.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(SampleOutcome { meta, rows })
}

/// Fewest random scenes `mask-check` accepts.
pub const MIN_MASK_SCENES: usize = 20;
const MASK_STREAM: u64 = 6;

#[derive(Clone, Debug)]
pub struct MaskCheckRow {
    pub label: String,
    pub report: LocalityReport,
}

#[derive(Clone, Debug)]
pub struct MaskCheckOutcome {
    pub rows: Vec<MaskCheckRow>,
}

impl MaskCheckOutcome {
    pub fn failures(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.report.status == Locality::Fail)
            .count()
    }

    pub fn render(&self) -> String {
        let mut s = String::from("scene,masked_cells,footprint_pixels,changed_pixels,changed_outside,status\n");
        for r in &self.rows {
            let status = match r.report.status {
                Locality::Pass => "PASS".to_string(),
                Locality::Fail => "FAIL".to_string(),
                Locality::Advisory { coverage } => format!("ADVISORY({coverage:.4})"),
            };
            let p = &r.report;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{status}",
                r.label, p.masked_cells, p.footprint_pixels, p.changed_pixels, p.changed_outside
            );
        }
        let passed = self.rows.iter().filter(|r| r.report.status == Locality::Pass).count();
        let verdict = if self.failures() == 0 { "PASS" } else { "FAIL" };
        let _ = writeln!(s, "aggregate,{passed}/{} passed,,,,{verdict}", self.rows.len());
        s
    }
}

/// Zero-mask locality over `scenes` random avatar scenes plus an
/// empty-mask and a full-frame case. Writes the report to `out` when given.
pub fn mask_check_cmd(
    cfg: &ExperimentConfig,
    scenes: usize,
    out: Option<&Path>,
) -> Result<MaskCheckOutcome> {
    if scenes < MIN_MASK_SCENES {
        return Err(HarnessError::Refused(format!(
            "mask-check needs at least {MIN_MASK_SCENES} scenes, got {scenes}"
        )));
    }
    let codecs = Codecs::new(cfg)?;
    let [lt, lh, lw] = cfg.video_latent_dims();
    let mut rng = stream_rng(cfg.data.seed, MASK_STREAM);
    let mut rows = Vec::with_capacity(scenes + 2);
    let first = generate_scene(Family::AvatarSpeech, &mut rng, &cfg.world)?;
    for (label, mask) in [
        ("empty", MouthMask::empty(lt, lh, lw)),
        ("full", MouthMask::full(lt, lh, lw)),
    ] {
        let report = zero_mask_validate(&first.video, &codecs.video, &mask)?;
        rows.push(MaskCheckRow {
            label: label.into(),
            report,
        });
    }
    for i in 0..scenes {
        let scene = if i == 0 {
            first.clone()
        } else {
            generate_scene(Family::AvatarSpeech, &mut rng, &cfg.world)?
        };
        let item = codecs.encode(&scene)?;
        let report = zero_mask_validate(&scene.video, &codecs.video, &item.mask)?;
        rows.push(MaskCheckRow {
            label: format!("scene_{i:03}"),
            report,
        });
    }
    let outcome = MaskCheckOutcome { rows };
    if let Some(path) = out {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, outcome.render())?;
    }
    Ok(outcome)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    /// Parameter entries probed.
    pub entries: usize,
    /// Central-difference step. Near the cube root of f64 epsilon, where
    /// truncation and rounding error balance for unit-scale losses.
    pub step: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            entries: 20,
            step: 1e-5,
            threshold: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `(parameter name, flat index, analytic, numeric, relative error)`
    pub probes: Vec<(String, usize, f64, f64, f64)>,
    pub max_rel_error: f64,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.threshold
    }
}

/// Relative error with a floor on the denominator, so entries whose true
/// gradient is zero are judged by absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

const GRAD_STREAM: u64 = 7;

/// Central differences of the fused-stage total loss against the tape
/// gradient, on the config's model and one avatar scene. Refused in 32-bit
/// mode, where differences of nearby losses are mostly rounding.
pub fn grad_check_cmd(cfg: &ExperimentConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if cfg.train.precision.dtype() != DType::F64 {
        return Err(HarnessError::Refused(
            "grad-check needs 64-bit precision; set train.precision = \"f64\"".into(),
        ));
    }
    cfg.validate()?;
    let mut rng = stream_rng(opts.seed, GRAD_STREAM);
    let mut model = init_model(cfg)?;
    // Zero-initialized layers would make many probes trivially exact.
    for v in model.params_mut().values_mut() {
        if v.data().iter().all(|&x| x == 0.0) {
            *v = Tensor::randn(v.shape().to_vec(), &mut rng).map(|x| 0.02 * x);
        }
    }
    let scene = generate_scene(Family::AvatarSpeech, &mut rng, &cfg.world)?;
    let item = Codecs::new(cfg)?.encode(&scene)?;
    let t = 0.4;
    let sv = FlowSample::draw_at(item.video.clone(), t, &mut rng)?;
    let sa = FlowSample::draw_at(item.audio.clone(), t, &mut rng)?;
    let lambda = cfg.train.lambda;

    let loss_of = |m: &JovaModel, grads: bool| -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let p = if grads {
            m.params().bind(&tape)
        } else {
            m.params().bind_frozen(&tape)
        };
        let (pv, pa) = m.forward(
            &p,
            &tape.constant(sv.xt.clone()),
            &tape.constant(sa.xt.clone()),
            &item.cond,
            t,
            Stage::Fused,
        )?;
        let l = total_loss(&pv, &pa, &sv, &sa, &item.mask, lambda)?;
        if !grads {
            return Ok((l.breakdown.l_total, Vec::new()));
        }
        let g = tape.backward(&l.total)?;
        Ok((l.breakdown.l_total, p.iter().map(|v| g.get_or_zeros(v)).collect()))
    };

    let (_, grads) = loss_of(&model, true)?;
    let sizes: Vec<usize> = model.params().values().iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let mut probes = Vec::with_capacity(opts.entries);
    for _ in 0..opts.entries {
        let (pi, flat) = locate(&sizes, rng.gen_range(0..total));
        let original = model.params().values()[pi].data()[flat];
        model.params_mut().values_mut()[pi].data_mut()[flat] = original + opts.step;
        let plus = loss_of(&model, false)?.0;
        model.params_mut().values_mut()[pi].data_mut()[flat] = original - opts.step;
        let minus = loss_of(&model, false)?.0;
        model.params_mut().values_mut()[pi].data_mut()[flat] = original;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let analytic = grads[pi].data()[flat];
        probes.push((
            model.params().names()[pi].clone(),
            flat,
            analytic,
            numeric,
            relative_error(analytic, numeric),
        ));
    }
    let max_rel_error = probes.iter().map(|p| p.4).fold(0.0, f64::max);
    Ok(GradCheckReport {
        probes,
        max_rel_error,
        threshold: opts.threshold,
    })
}

fn locate(sizes: &[usize], mut flat: usize) -> (usize, usize) {
    let mut pi = 0;
    while flat >= sizes[pi] {
        flat -= sizes[pi];
        pi += 1;
    }
    (pi, flat)
}

pub fn ablate_cmd(
    base: &ExperimentConfig,
    axes: &[crate::ablate::Axis],
    seeds: &[u64],
    root: Option<&Path>,
) -> Result<crate::ablate::AblationResult> {
    let root = root.map(Path::to_path_buf).unwrap_or_else(|| base.output_dir());
    crate::ablate::run_ablation(base, axes, seeds, &root, crate::config::thread_count())
}

//! Held-out scoring of a trained model.

use jova_core::flow::{euler_from, FlowSample, VelocityField};
use jova_core::model::JovaModel;
use jova_core::toyworld::{sync_score, transcript_error, ToyScene};
use jova_tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{stream_rng, Codecs};
use crate::Result;

const SAMPLE_STREAM: u64 = 1000;
const RECON_STREAM: u64 = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scene_id: usize,
    pub sync_score: f64,
    pub transcript_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rows: Vec<EvalRow>,
    pub mean_sync_score: f64,
    pub mean_transcript_error: f64,
    /// Latent MSE of a single denoising step from `t = 0.5`.
    pub recon_mse_video: f64,
    pub recon_mse_audio: f64,
}

/// A generated scene in pixel and sample space.
#[derive(Clone, Debug)]
pub struct Generated {
    /// `[T, H, W, 1]`
    pub video: Tensor,
    /// `[L, 1]`
    pub audio: Tensor,
}

/// Samples with guidance from the scene's prompt and reference, then
/// decodes both latents.
pub fn generate(
    model: &JovaModel,
    cfg: &ExperimentConfig,
    codecs: &Codecs,
    scene: &ToyScene,
    rng: &mut ChaCha8Rng,
) -> Result<Generated> {
    let cond = codecs.condition(scene)?;
    let [lt, lh, lw] = cfg.video_latent_dims();
    let video = Tensor::randn([lt, lh, lw, 1], rng);
    let audio = Tensor::randn([cfg.audio_latent_len(), 1], rng);
    let (zv, za) = euler_from(model, &cond, video, audio, &cfg.sampler.to_sampler())?;
    Ok(Generated {
        video: codecs.video.decode_video(&zv)?,
        audio: codecs.audio.decode(&za)?,
    })
}

/// Scores one generated scene: lip sync between the generated mouth and
/// the generated audio envelope, and the generated audio's transcript
/// against the prompt.
pub fn score(cfg: &ExperimentConfig, scene: &ToyScene, gen: &Generated, scene_id: usize) -> Result<EvalRow> {
    let envelope = gen.audio.data();
    Ok(EvalRow {
        scene_id,
        sync_score: sync_score(&gen.video, envelope, &scene.boxes, cfg.eval.max_offset)?,
        transcript_error: transcript_error(envelope, &scene.transcript, &cfg.eval.transcript)?,
    })
}

/// Noise for scene `i` comes from its own stream of `data.seed`, so every
/// arm of an ablation starts each scene from the same point.
pub fn scene_rng(cfg: &ExperimentConfig, i: usize) -> ChaCha8Rng {
    stream_rng(cfg.data.seed, SAMPLE_STREAM + i as u64)
}

pub fn evaluate(model: &JovaModel, cfg: &ExperimentConfig, scenes: &[ToyScene]) -> Result<EvalSummary> {
    let codecs = Codecs::new(cfg)?;
    let mut rows = Vec::with_capacity(scenes.len());
    let (mut mse_v, mut mse_a) = (0.0, 0.0);
    for (i, scene) in scenes.iter().enumerate() {
        let gen = generate(model, cfg, &codecs, scene, &mut scene_rng(cfg, i))?;
        rows.push(score(cfg, scene, &gen, i)?);

        let item = codecs.encode(scene)?;
        let mut rng = stream_rng(cfg.data.seed, RECON_STREAM + i as u64);
        let sv = FlowSample::draw_at(item.video, 0.5, &mut rng)?;
        let sa = FlowSample::draw_at(item.audio, 0.5, &mut rng)?;
        let (vv, va) = model.velocity(&sv.xt, &sa.xt, 0.5, &item.cond)?;
        mse_v += one_step_mse(&sv, &vv);
        mse_a += one_step_mse(&sa, &va);
    }
    let n = scenes.len().max(1) as f64;
    Ok(EvalSummary {
        mean_sync_score: rows.iter().map(|r| r.sync_score).sum::<f64>() / n,
        mean_transcript_error: rows.iter().map(|r| r.transcript_error).sum::<f64>() / n,
        rows,
        recon_mse_video: mse_v / n,
        recon_mse_audio: mse_a / n,
    })
}

/// `x̂1 = x_t + (1 − t)·v` against the true `x1`.
fn one_step_mse(s: &FlowSample, v: &Tensor) -> f64 {
    let k = 1.0 - s.t;
    let sq: f64 = s
        .xt
        .data()
        .iter()
        .zip(v.data())
        .zip(s.x1.data())
        .map(|((x, v), x1)| (x + k * v - x1).powi(2))
        .sum();
    sq / s.x1.numel() as f64
}

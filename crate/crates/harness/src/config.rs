use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use jova_core::model::ModelConfig;
use jova_core::toyworld::{SceneParams, TranscriptParams, PHONEME_TOKEN_OFFSET};
use jova_tensor::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{HarnessError, Result};

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "JOVA_OUTPUT_ROOT";
/// Environment variable bounding concurrent ablation runs.
pub const THREADS_ENV: &str = "JOVA_THREADS";

/// Everything one run depends on. Loaded from a sectioned TOML file; any
/// key left out takes the default shown in `configs/default.toml`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub codec: CodecConfig,
    pub world: SceneParams,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub sampler: SamplerSection,
    pub eval: EvalConfig,
    pub run: RunConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    /// Spatial downsampling of the video codec.
    pub s: usize,
    /// Temporal downsampling of the video codec.
    pub t_s: usize,
    /// Audio samples per audio latent frame.
    pub audio_hop: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            s: 4,
            t_s: 2,
            audio_hop: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub train_scenes: usize,
    /// Avatar scenes used for evaluation; never seen in training.
    pub heldout_scenes: usize,
    /// Sampling weights of avatar_speech, video_audio, audio_only.
    pub mixture: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train_scenes: 256,
            heldout_scenes: 16,
            mixture: [0.4, 0.3, 0.3],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F64 => DType::F64,
            Precision::F32 => DType::F32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Weight of the mouth-region term in stage 2.
    pub lambda: f64,
    pub stage1_steps: usize,
    pub stage1_lr: f64,
    pub stage2_steps: usize,
    pub stage2_lr: f64,
    pub batch_size: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lambda: 5.0,
            stage1_steps: 300,
            stage1_lr: 1e-3,
            stage2_steps: 700,
            stage2_lr: 5e-4,
            batch_size: 8,
            precision: Precision::F64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub steps: usize,
    pub guidance_video: f64,
    pub guidance_audio: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = jova_core::flow::SamplerConfig::default();
        Self {
            steps: d.steps,
            guidance_video: d.w_video,
            guidance_audio: d.w_audio,
        }
    }
}

impl SamplerSection {
    pub fn to_sampler(self) -> jova_core::flow::SamplerConfig {
        jova_core::flow::SamplerConfig {
            steps: self.steps,
            w_video: self.guidance_video,
            w_audio: self.guidance_audio,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Largest frame lag searched by the sync score.
    pub max_offset: usize,
    pub transcript: TranscriptParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_offset: 1,
            transcript: TranscriptParams::default(),
        }
    }
}

/// Where artifacts go. Excluded from the config hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Checks that every factor agrees with every other.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HarnessError::Config(m));
        self.model.validate()?;
        self.world.validate()?;
        let (c, w, m) = (&self.codec, &self.world, &self.model);
        if c.s == 0 || c.t_s == 0 || c.audio_hop == 0 {
            return fail("codec factors must be positive".into());
        }
        if w.frames % c.t_s != 0 || w.height % c.s != 0 || w.width % c.s != 0 {
            return fail(format!(
                "video {}x{}x{} is not divisible by codec factors t_s = {}, s = {}",
                w.frames, w.height, w.width, c.t_s, c.s
            ));
        }
        if w.audio_len % c.audio_hop != 0 {
            return fail(format!(
                "audio_len {} is not divisible by audio_hop {}",
                w.audio_len, c.audio_hop
            ));
        }
        let [lt, lh, lw] = self.video_latent_dims();
        let [ph, pw] = m.video_patch;
        if lh % ph != 0 || lw % pw != 0 {
            return fail(format!("video latent {lh}x{lw} is not divisible by patch {ph}x{pw}"));
        }
        let video_secs = lt as f64 / m.fps_latent;
        let audio_secs = self.audio_latent_len() as f64 / m.audio_rate_latent;
        if (video_secs - audio_secs).abs() > 1e-9 {
            return fail(format!(
                "latent durations differ: video {video_secs} s, audio {audio_secs} s"
            ));
        }
        if m.video_channels != 1 || m.audio_channels != 1 {
            return fail("toy latents have exactly one channel per modality".into());
        }
        if m.text_vocab_size < PHONEME_TOKEN_OFFSET + w.phoneme_vocab {
            return fail(format!(
                "text_vocab_size {} cannot hold {} phoneme ids",
                m.text_vocab_size, w.phoneme_vocab
            ));
        }
        if self.eval.transcript.phoneme_vocab != w.phoneme_vocab {
            return fail("eval.transcript.phoneme_vocab must equal world.phoneme_vocab".into());
        }
        let d = &self.data;
        if d.train_scenes == 0 || d.heldout_scenes == 0 {
            return fail("dataset sizes must be positive".into());
        }
        if d.mixture.iter().any(|p| !(*p >= 0.0)) || d.mixture.iter().sum::<f64>() <= 0.0 {
            return fail("mixture weights must be non-negative with a positive sum".into());
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(t.lambda >= 0.0) {
            return fail(format!("lambda = {} must be >= 0", t.lambda));
        }
        if !(t.stage1_lr > 0.0 && t.stage2_lr > 0.0) {
            return fail("learning rates must be positive".into());
        }
        let s = &self.sampler;
        if s.steps == 0 || !(s.guidance_video >= 0.0 && s.guidance_audio >= 0.0) {
            return fail("sampler needs steps >= 1 and non-negative guidance".into());
        }
        Ok(())
    }

    /// `[frames, height, width]` of the video latent.
    pub fn video_latent_dims(&self) -> [usize; 3] {
        [
            self.world.frames / self.codec.t_s,
            self.world.height / self.codec.s,
            self.world.width / self.codec.s,
        ]
    }

    pub fn audio_latent_len(&self) -> usize {
        self.world.audio_len / self.codec.audio_hop
    }

    /// SHA-256 of the serialized config with `[run]` reset, so relocating a
    /// run does not change its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run = RunConfig::default();
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    /// Every leaf as `section.key = value`, `[run]` excluded.
    pub fn flatten(&self) -> BTreeMap<String, String> {
        let mut c = self.clone();
        c.run = RunConfig::default();
        let value = toml::Value::try_from(&c).expect("config is always representable as TOML");
        let mut out = BTreeMap::new();
        flatten_into(&value, String::new(), &mut out);
        out.retain(|k, _| !k.starts_with("run."));
        out
    }

    /// Keys whose values differ, formatted `key: a -> b`.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        let (a, b) = (self.flatten(), other.flatten());
        let missing = "<absent>".to_string();
        let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .filter(|k| a.get(*k) != b.get(*k))
            .map(|k| {
                format!(
                    "{k}: {} -> {}",
                    a.get(k).unwrap_or(&missing),
                    b.get(k).unwrap_or(&missing)
                )
            })
            .collect()
    }

    /// Output directory, placed under `$JOVA_OUTPUT_ROOT` when that is set
    /// and the configured path is relative.
    pub fn output_dir(&self) -> PathBuf {
        resolve_output(&self.run.output_dir)
    }
}

pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Concurrency from `$JOVA_THREADS`, default 1.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

fn flatten_into(v: &toml::Value, prefix: String, out: &mut BTreeMap<String, String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(child, key, out);
            }
        }
        leaf => {
            out.insert(prefix, leaf.to_string());
        }
    }
}

use serde::{Deserialize, Serialize};

use super::ModelError;

/// How rotary phases are assigned to timed tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopeMode {
    /// Phase from absolute time in seconds, shared by both modalities.
    TemporalAligned,
    /// Phase from each modality's own frame index.
    PerModality,
}

/// How video and audio tokens exchange information once fusion is enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Joint,
    CrossLinear,
    CrossPlain,
}

impl Fusion {
    pub fn is_cross(self) -> bool {
        !matches!(self, Fusion::Joint)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub token_dim: usize,
    pub num_heads: usize,
    pub multi_stream_depth: usize,
    pub single_stream_depth: usize,
    /// Patch extent `[height, width]` in latent cells.
    pub video_patch: [usize; 2],
    pub text_vocab_size: usize,
    pub rope_mode: RopeMode,
    pub fusion: Fusion,
    /// Video latent frames per second.
    pub fps_latent: f64,
    /// Audio latent frames per second.
    pub audio_rate_latent: f64,
    pub condition_dropout_prob: f64,
    pub video_channels: usize,
    pub audio_channels: usize,
    /// Hidden width of each feed-forward layer as a multiple of `token_dim`.
    pub ffn_mult: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            token_dim: 128,
            num_heads: 4,
            multi_stream_depth: 2,
            single_stream_depth: 2,
            video_patch: [2, 2],
            text_vocab_size: 16,
            rope_mode: RopeMode::TemporalAligned,
            fusion: Fusion::Joint,
            fps_latent: 4.0,
            audio_rate_latent: 16.0,
            condition_dropout_prob: 0.1,
            video_channels: 1,
            audio_channels: 1,
            ffn_mult: 4,
            rope_base: 100.0,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.token_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.num_heads == 0 || self.token_dim % (2 * self.num_heads) != 0 {
            return fail(format!(
                "token_dim {} must be divisible by 2 * num_heads ({})",
                self.token_dim, self.num_heads
            ));
        }
        if self.multi_stream_depth == 0 || self.single_stream_depth == 0 {
            return fail("both stream depths must be at least 1".into());
        }
        if !(self.fps_latent > 0.0 && self.audio_rate_latent > 0.0) {
            return fail("latent rates must be positive".into());
        }
        if self.video_patch.contains(&0) {
            return fail("video_patch extents must be positive".into());
        }
        if self.text_vocab_size < 2 {
            return fail("text_vocab_size must leave room for the null token".into());
        }
        if !(0.0..=1.0).contains(&self.condition_dropout_prob) {
            return fail("condition_dropout_prob must lie in [0, 1]".into());
        }
        if self.video_channels == 0 || self.audio_channels == 0 || self.ffn_mult == 0 {
            return fail("channel counts and ffn_mult must be positive".into());
        }
        if !(self.rope_base > 1.0) || !(self.norm_eps > 0.0) {
            return fail("rope_base must exceed 1 and norm_eps must be positive".into());
        }
        Ok(())
    }
}

//! Rotary phases on a dedicated temporal axis.

use std::rc::Rc;

use super::config::{ModelConfig, RopeMode};
use super::Modality;

/// Per-pair angular frequency. In temporal-aligned mode positions are in
/// seconds, so frequencies are scaled by the audio latent rate to keep
/// neighbouring audio frames one radian apart on the fastest pair.
pub fn rope_frequency(cfg: &ModelConfig, pair: usize) -> f64 {
    let dh = cfg.head_dim() as f64;
    let base = cfg.rope_base.powf(-2.0 * pair as f64 / dh);
    match cfg.rope_mode {
        RopeMode::TemporalAligned => cfg.audio_rate_latent * base,
        RopeMode::PerModality => base,
    }
}

/// Rotary position of one token: seconds or frame index depending on mode.
/// Text is never rotated, which is encoded as position 0.
pub fn rope_position(cfg: &ModelConfig, modality: Modality, time: f64, frame: usize) -> f64 {
    match (modality, cfg.rope_mode) {
        (Modality::Text, _) => 0.0,
        (_, RopeMode::TemporalAligned) => time,
        (_, RopeMode::PerModality) => frame as f64,
    }
}

/// `cos`/`sin` tables of shape `[tokens, head_dim / 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeTables {
    pub cos: Rc<[f64]>,
    pub sin: Rc<[f64]>,
}

impl RopeTables {
    pub fn new(cfg: &ModelConfig, positions: &[f64]) -> Self {
        let pairs = cfg.head_dim() / 2;
        let freqs: Vec<f64> = (0..pairs).map(|j| rope_frequency(cfg, j)).collect();
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        for &p in positions {
            for &w in &freqs {
                let (s, c) = (p * w).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        Self {
            cos: cos.into(),
            sin: sin.into(),
        }
    }
}

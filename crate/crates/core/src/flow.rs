//! Straight-path flow matching: interpolation, losses, and a guided Euler
//! sampler.

use std::rc::Rc;

use jova_tensor::{Tensor, TensorError, Var};
use rand::Rng;
use thiserror::Error;

use crate::model::{ConditionSet, JovaModel, ModelError, Stage};
use crate::mouthmask::MouthMask;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid flow input: {0}")]
    Invalid(String),
    #[error("non-finite latent at sampling step {step}")]
    NonFinite { step: usize },
}

pub type Result<T> = std::result::Result<T, FlowError>;

/// One point on the straight path from noise `x0` to data `x1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub t: f64,
    pub x0: Tensor,
    pub x1: Tensor,
    /// `t·x1 + (1−t)·x0`
    pub xt: Tensor,
    /// `x1 − x0`
    pub u: Tensor,
}

impl FlowSample {
    pub fn new(x1: Tensor, x0: Tensor, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(FlowError::Invalid(format!("t = {t} outside [0, 1]")));
        }
        if x0.shape() != x1.shape() {
            return Err(FlowError::Invalid(format!(
                "noise shape {:?} differs from data shape {:?}",
                x0.shape(),
                x1.shape()
            )));
        }
        let xt = x1.zip_map(&x0, |a, b| t * a + (1.0 - t) * b)?;
        let u = x1.zip_map(&x0, |a, b| a - b)?;
        Ok(Self { t, x0, x1, xt, u })
    }

    /// Standard-normal noise at a given `t`. Used to share one `t` across
    /// both modalities of an item.
    pub fn draw_at<R: Rng + ?Sized>(x1: Tensor, t: f64, rng: &mut R) -> Result<Self> {
        if !x1.is_finite() {
            return Err(FlowError::Invalid("data latent is not finite".into()));
        }
        let x0 = Tensor::randn(x1.shape().to_vec(), rng).with_dtype(x1.dtype());
        Self::new(x1, x0, t)
    }

    /// `t ∼ U[0, 1]` and standard-normal noise.
    pub fn draw<R: Rng + ?Sized>(x1: Tensor, rng: &mut R) -> Result<Self> {
        let t = rng.gen_range(0.0..=1.0);
        Self::draw_at(x1, t, rng)
    }
}

/// Mean squared error between predicted and target velocity.
pub fn fm_loss(pred: &Var, sample: &FlowSample) -> Result<Var> {
    check_shape(pred, sample)?;
    let u = pred.tape().constant(sample.u.clone());
    Ok(pred.sub(&u)?.square()?.mean()?)
}

/// Squared velocity error averaged over the masked latent cells only; the
/// mask is broadcast over channels. Zero with zero gradient when empty.
pub fn mouth_loss(pred: &Var, sample: &FlowSample, mask: &MouthMask) -> Result<Var> {
    check_shape(pred, sample)?;
    let shape = pred.shape();
    if shape.len() != 4 || shape[..3] != [mask.frames(), mask.height(), mask.width()] {
        return Err(FlowError::Invalid(format!(
            "mask {}x{}x{} does not cover video latent {shape:?}",
            mask.frames(),
            mask.height(),
            mask.width()
        )));
    }
    let cells: Rc<[bool]> = mask.broadcast_channels(shape[3]).into();
    let u = pred.tape().constant(sample.u.clone());
    Ok(pred.sub(&u)?.square()?.masked_mean(cells)?)
}

fn check_shape(pred: &Var, sample: &FlowSample) -> Result<()> {
    if pred.shape() != sample.u.shape() {
        return Err(FlowError::Invalid(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            sample.u.shape()
        )));
    }
    Ok(())
}

/// Scalar values of the three loss terms and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_video: f64,
    pub l_audio: f64,
    pub l_mouth: f64,
    pub l_total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    /// Absolute gap between `l_total` and `l_video + l_audio + λ·l_mouth`.
    pub fn decomposition_error(&self) -> f64 {
        (self.l_total - (self.l_video + self.l_audio + self.lambda * self.l_mouth)).abs()
    }
}

pub struct Losses {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// `L = L_video + L_audio + λ·L_mouth`. The video term covers every cell,
/// mouth cells included, so the mouth region is weighted additively.
pub fn total_loss(
    pred_video: &Var,
    pred_audio: &Var,
    video: &FlowSample,
    audio: &FlowSample,
    mask: &MouthMask,
    lambda: f64,
) -> Result<Losses> {
    let lv = fm_loss(pred_video, video)?;
    let la = fm_loss(pred_audio, audio)?;
    let lm = mouth_loss(pred_video, video, mask)?;
    combine(&lv, &la, &lm, lambda)
}

/// Weighted total of already-reduced terms, e.g. batch means.
pub fn combine(l_video: &Var, l_audio: &Var, l_mouth: &Var, lambda: f64) -> Result<Losses> {
    if !(lambda >= 0.0) {
        return Err(FlowError::Invalid(format!("lambda = {lambda} must be >= 0")));
    }
    let total = l_video.add(l_audio)?.add(&l_mouth.scale(lambda)?)?;
    let breakdown = LossBreakdown {
        l_video: l_video.value().item()?,
        l_audio: l_audio.value().item()?,
        l_mouth: l_mouth.value().item()?,
        l_total: total.value().item()?,
        lambda,
    };
    Ok(Losses { total, breakdown })
}

/// Anything that predicts `(v_video, v_audio)` at a point of the path.
pub trait VelocityField {
    fn velocity(
        &self,
        video: &Tensor,
        audio: &Tensor,
        t: f64,
        cond: &ConditionSet,
    ) -> Result<(Tensor, Tensor)>;
}

impl VelocityField for JovaModel {
    fn velocity(
        &self,
        video: &Tensor,
        audio: &Tensor,
        t: f64,
        cond: &ConditionSet,
    ) -> Result<(Tensor, Tensor)> {
        Ok(self.predict(video, audio, cond, t, Stage::Fused)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub w_video: f64,
    pub w_audio: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 32,
            w_video: 10.0,
            w_audio: 10.0,
        }
    }
}

/// `v_u + w·(v_c − v_u)`; exactly `v_c` when `w == 1`.
pub fn guide(cond: &Tensor, uncond: &Tensor, w: f64) -> Result<Tensor> {
    if w == 1.0 {
        return Ok(cond.clone());
    }
    Ok(uncond.zip_map(cond, |u, c| u + w * (c - u))?)
}

/// Integrates from the given noise at `t = 0` to `t = 1` on a uniform grid.
pub fn euler_from<F: VelocityField + ?Sized>(
    field: &F,
    cond: &ConditionSet,
    mut video: Tensor,
    mut audio: Tensor,
    cfg: &SamplerConfig,
) -> Result<(Tensor, Tensor)> {
    if cfg.steps == 0 {
        return Err(FlowError::Invalid("sampler needs at least one step".into()));
    }
    if !(cfg.w_video >= 0.0 && cfg.w_audio >= 0.0) {
        return Err(FlowError::Invalid("guidance weights must be >= 0".into()));
    }
    let needs_uncond = cfg.w_video != 1.0 || cfg.w_audio != 1.0;
    let null = cond.nulled();
    let dt = 1.0 / cfg.steps as f64;
    for step in 0..cfg.steps {
        let t = step as f64 * dt;
        let (cv, ca) = field.velocity(&video, &audio, t, cond)?;
        let (vv, va) = if needs_uncond {
            let (uv, ua) = field.velocity(&video, &audio, t, &null)?;
            (guide(&cv, &uv, cfg.w_video)?, guide(&ca, &ua, cfg.w_audio)?)
        } else {
            (cv, ca)
        };
        video.axpy(dt, &vv)?;
        audio.axpy(dt, &va)?;
        if !video.is_finite() || !audio.is_finite() {
            return Err(FlowError::NonFinite { step });
        }
    }
    Ok((video, audio))
}

/// Draws standard-normal starting noise of the given shapes, then
/// integrates with [`euler_from`].
pub fn sample_euler<F: VelocityField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    cond: &ConditionSet,
    video_shape: &[usize],
    audio_shape: &[usize],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let video = Tensor::randn(video_shape.to_vec(), rng);
    let audio = Tensor::randn(audio_shape.to_vec(), rng);
    euler_from(field, cond, video, audio, cfg)
}

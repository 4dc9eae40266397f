//! Two-stage training: isolated branches first, then the configured fusion.

use jova_core::flow::{combine, fm_loss, mouth_loss, FlowSample, LossBreakdown};
use jova_core::model::{JovaModel, Stage};
use jova_tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::data::{stream_rng, Dataset};
use crate::{HarnessError, Result};

const INIT_STREAM: u64 = 10;
const STEP_STREAM: u64 = 11;

/// One logged optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// Global step index, counted across both stages from 0.
    pub step: usize,
    /// 1 or 2.
    pub stage: u8,
    pub losses: LossBreakdown,
}

pub struct TrainOutcome {
    pub model: JovaModel,
    pub records: Vec<StepRecord>,
}

/// The model a config starts from.
pub fn init_model(cfg: &ExperimentConfig) -> Result<JovaModel> {
    let mut rng = stream_rng(cfg.train.seed, INIT_STREAM);
    let mut model = JovaModel::new(cfg.model.clone(), &mut rng)?;
    model.set_dtype(cfg.train.precision.dtype());
    Ok(model)
}

/// Runs both stages. `on_stage_end` sees the model after each stage, which
/// is where checkpoints get written. Deterministic given the config.
pub fn train(
    cfg: &ExperimentConfig,
    data: &Dataset,
    mut on_stage_end: impl FnMut(u8, &JovaModel) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(HarnessError::Config("training pool is empty".into()));
    }
    let mut model = init_model(cfg)?;
    let mut rng = stream_rng(cfg.train.seed, STEP_STREAM);
    let mut records = Vec::with_capacity(cfg.train.stage1_steps + cfg.train.stage2_steps);
    let schedule = [
        (1u8, Stage::Isolated, cfg.train.stage1_steps, cfg.train.stage1_lr, 0.0),
        (2u8, Stage::Fused, cfg.train.stage2_steps, cfg.train.stage2_lr, cfg.train.lambda),
    ];
    for (stage_id, stage, steps, lr, lambda) in schedule {
        let adam = AdamConfig::with_lr(lr);
        let mut state = AdamState::new(model.params().values());
        for _ in 0..steps {
            let step = records.len();
            let (losses, grads) = batch_step(&model, cfg, data, stage, lambda, &mut rng)?;
            if !losses.l_total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(non_finite(step, &model));
            }
            adam_step(model.params_mut().values_mut(), &grads, &mut state, &adam)?;
            log::debug!("step {step} stage {stage_id}: {losses:?}");
            records.push(StepRecord {
                step,
                stage: stage_id,
                losses,
            });
        }
        log::info!("stage {stage_id} finished after {steps} steps");
        on_stage_end(stage_id, &model)?;
    }
    Ok(TrainOutcome { model, records })
}

/// Loss and parameter gradients for one batch. Each item draws its own
/// `t`, shared by its video and audio, and its own noise; conditions are
/// nulled with the configured dropout probability.
pub fn batch_step(
    model: &JovaModel,
    cfg: &ExperimentConfig,
    data: &Dataset,
    stage: Stage,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let tape = Tape::with_dtype(model.dtype());
    let p = model.params().bind(&tape);
    let b = cfg.train.batch_size;
    let (mut lv, mut la, mut lm): (Vec<Var>, Vec<Var>, Vec<Var>) = Default::default();
    for _ in 0..b {
        let item = &data.train[rng.gen_range(0..data.train.len())];
        let t: f64 = rng.gen_range(0.0..=1.0);
        let sv = FlowSample::draw_at(item.video.clone(), t, rng)?;
        let sa = FlowSample::draw_at(item.audio.clone(), t, rng)?;
        let dropped = rng.gen_bool(model.config().condition_dropout_prob);
        let cond = if dropped {
            item.cond.nulled()
        } else {
            item.cond.clone()
        };
        let (pv, pa) = model.forward(
            &p,
            &tape.constant(sv.xt.clone()),
            &tape.constant(sa.xt.clone()),
            &cond,
            t,
            stage,
        )?;
        lv.push(fm_loss(&pv, &sv)?);
        la.push(fm_loss(&pa, &sa)?);
        lm.push(mouth_loss(&pv, &sv, &item.mask)?);
    }
    let losses = combine(&batch_mean(&lv)?, &batch_mean(&la)?, &batch_mean(&lm)?, lambda)?;
    let grads = tape.backward(&losses.total)?;
    Ok((
        losses.breakdown,
        p.iter().map(|v| grads.get_or_zeros(v)).collect(),
    ))
}

fn batch_mean(terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = acc.add(t)?;
    }
    Ok(acc.scale(1.0 / terms.len() as f64)?)
}

fn non_finite(step: usize, model: &JovaModel) -> HarnessError {
    let norms = model
        .params()
        .names()
        .iter()
        .zip(model.params().values())
        .map(|(n, v)| (n.clone(), v.sq_norm().sqrt()))
        .collect();
    HarnessError::NonFinite { step, norms }
}

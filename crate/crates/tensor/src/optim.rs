use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("non-finite gradient for parameter {param} at step {step}")]
    NonFiniteGradient { step: u64, param: usize },
    #[error("parameter {param}: shape {param_shape:?} does not match gradient/state {other_shape:?}")]
    ShapeMismatch {
        param: usize,
        param_shape: Vec<usize>,
        other_shape: Vec<usize>,
    },
    #[error("{params} parameters but {grads} gradients")]
    CountMismatch { params: usize, grads: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }
}

/// One bias-corrected Adam update. Parameters are left untouched if any
/// gradient is non-finite.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), OptimError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(OptimError::CountMismatch {
            params: params.len(),
            grads: grads.len(),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        for other in [g, &state.m[i], &state.v[i]] {
            if p.shape() != other.shape() {
                return Err(OptimError::ShapeMismatch {
                    param: i,
                    param_shape: p.shape().to_vec(),
                    other_shape: other.shape().to_vec(),
                });
            }
        }
        if !g.is_finite() {
            return Err(OptimError::NonFiniteGradient {
                step: state.step,
                param: i,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, &gj) in m.iter_mut().zip(g) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, &gj) in v.iter_mut().zip(g) {
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((pj, &mj), &vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            let mhat = mj / bc1;
            let vhat = vj / bc2;
            *pj -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_fresh_params_unchanged() {
        let mut params = vec![Tensor::new([2], vec![1.0, -2.0]).unwrap()];
        let mut state = AdamState::new(&params);
        let grads = vec![Tensor::zeros([2])];
        adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut params = vec![Tensor::scalar(0.0)];
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig::default();
        adam_step(&mut params, &[Tensor::scalar(1.0)], &mut state, &cfg).unwrap();
        let (m1, v1) = (state.m[0].data()[0], state.v[0].data()[0]);
        adam_step(&mut params, &[Tensor::scalar(0.0)], &mut state, &cfg).unwrap();
        assert!((state.m[0].data()[0] - cfg.beta1 * m1).abs() < 1e-15);
        assert!((state.v[0].data()[0] - cfg.beta2 * v1).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.0, -0.25, 1e-3] {
            let mut params = vec![Tensor::scalar(0.5)];
            let mut state = AdamState::new(&params);
            let cfg = AdamConfig::with_lr(0.01);
            adam_step(&mut params, &[Tensor::scalar(g)], &mut state, &cfg).unwrap();
            let moved = (params[0].data()[0] - 0.5).abs();
            assert!((moved - 0.01).abs() < 1e-6, "g={g}: moved {moved}");
        }
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        let cfg = AdamConfig::with_lr(0.1);
        let mut params = vec![Tensor::scalar(0.0)];
        let mut state = AdamState::new(&params);
        let mut prev = 3.0f64;
        for _ in 0..10 {
            let w = params[0].data()[0];
            let grad = Tensor::scalar(2.0 * (w - 3.0));
            adam_step(&mut params, &[grad], &mut state, &cfg).unwrap();
            let dist = (params[0].data()[0] - 3.0).abs();
            assert!(dist < prev);
            prev = dist;
        }
    }

    #[test]
    fn nan_gradient_reports_step() {
        let mut params = vec![Tensor::scalar(0.0), Tensor::scalar(1.0)];
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig::default();
        adam_step(&mut params, &[Tensor::scalar(1.0), Tensor::scalar(1.0)], &mut state, &cfg)
            .unwrap();
        let before = params.clone();
        let err = adam_step(
            &mut params,
            &[Tensor::scalar(1.0), Tensor::scalar(f64::NAN)],
            &mut state,
            &cfg,
        )
        .unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGradient { step: 1, param: 1 });
        assert_eq!(params, before);
    }
}

//! Adam with bias correction.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("parameter {index}: expected {expected} values, got {got}")]
    ShapeMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("parameter {0} has no gradient")]
    MissingGradient(usize),
    #[error("parameter {0} has a non-finite gradient; step refused")]
    PoisonedGradient(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for one network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    /// Zero moments shaped like `sizes` (element count per parameter).
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::numel).collect();
        Self::new(config, &sizes)
    }
}

/// One Adam update of `params` from their gradient buffers.
///
/// The whole step is refused, leaving parameters and state untouched, if any
/// gradient is missing, mis-sized or non-finite.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState) -> Result<(), OptimError> {
    if params.len() != state.m.len() {
        return Err(OptimError::ParamCount {
            expected: state.m.len(),
            got: params.len(),
        });
    }
    for (i, p) in params.iter().enumerate() {
        if p.numel() != state.m[i].len() {
            return Err(OptimError::ShapeMismatch {
                index: i,
                expected: state.m[i].len(),
                got: p.numel(),
            });
        }
        let g = p.grad().ok_or(OptimError::MissingGradient(i))?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(OptimError::PoisonedGradient(i));
        }
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = p.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((theta, &g), m), v) in p.data_mut().iter_mut().zip(&g).zip(m).zip(v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

pub fn zero_grads(params: &mut [&mut Tensor]) {
    for p in params {
        p.zero_grad();
    }
}

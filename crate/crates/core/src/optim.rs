use serde::{Deserialize, Serialize};

use crate::error::{IcdError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(IcdError::Dimension {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), state.m.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(IcdError::Dimension {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut params = vec![Tensor::new(vec![2], vec![1.0, -3.0]).unwrap()];
        let mut state = AdamState::new(&params);
        state.m[0] = Tensor::new(vec![2], vec![0.5, 0.5]).unwrap();
        state.v[0] = Tensor::new(vec![2], vec![0.2, 0.2]).unwrap();
        let before = params.clone();
        let cfg = AdamConfig::default();
        // Non-zero moments still move params, so isolate the zero-moment case.
        let mut fresh = AdamState::new(&params);
        adam_step(&mut params, &[Tensor::zeros(&[2])], &mut fresh, &cfg).unwrap();
        assert_eq!(params, before);
        let mut p2 = before.clone();
        adam_step(&mut p2, &[Tensor::zeros(&[2])], &mut state, &cfg).unwrap();
        assert!((state.m[0].data()[0] - 0.45).abs() < 1e-15);
        assert!((state.v[0].data()[0] - 0.2 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn descends_on_a_parabola() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let g = vec![Tensor::scalar(2.0 * p[0].data()[0])];
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        assert!(p[0].data()[0] < 1.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &[Tensor::zeros(&[3])], &mut st, &AdamConfig::default());
        assert!(err.is_err());
    }
}

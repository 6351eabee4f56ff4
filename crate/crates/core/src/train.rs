//! Shared regression machinery for every training loop in the crate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::denoiser::Denoiser;
use crate::error::{IcdError, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::Tensor;

/// Inputs and target for one squared-L2 regression step on a denoiser.
///
/// Without `ddim` the network output itself is regressed. With
/// `ddim = (a, b)` the regressed quantity is the DDIM-form jump
/// `a[i]·x[i] + b[i]·ε_θ(x[i])`.
#[derive(Debug, Clone)]
pub struct RegressionBatch {
    pub x: Tensor,
    pub t: Vec<f64>,
    pub labels: Vec<Option<usize>>,
    pub guidance: Option<Vec<f64>>,
    pub ddim: Option<(Vec<f64>, Vec<f64>)>,
    pub target: Tensor,
}

/// Mean over rows of the squared L2 distance, and its parameter gradients.
pub fn regression_grads(den: &Denoiser, batch: &RegressionBatch) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let params = den.bind(&mut g, true);
    let x = g.constant(batch.x.clone());
    let eps = den.forward(
        &mut g,
        &params,
        x,
        &batch.t,
        &batch.labels,
        batch.guidance.as_deref(),
    )?;
    let pred = match &batch.ddim {
        None => eps,
        Some((a, b)) => {
            let ax = g.constant(batch.x.scale_rows(a)?);
            let be = g.scale_rows(eps, b.clone())?;
            g.add(ax, be)?
        }
    };
    let target = g.constant(batch.target.clone());
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff);
    let total = g.sum(sq);
    let rows = batch.x.rows().max(1);
    let loss = g.scale(total, 1.0 / rows as f64);
    g.backward(loss)?;
    let grads = params.iter().map(|&p| g.grad_or_zeros(p)).collect();
    Ok((g.value(loss).data()[0], grads))
}

/// Accumulates `acc += k·grads`.
pub fn add_scaled(acc: &mut [Tensor], grads: &[Tensor], k: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (ai, gi) in a.data_mut().iter_mut().zip(g.data()) {
            *ai += k * gi;
        }
    }
}

pub fn zeros_like(params: &[Tensor]) -> Vec<Tensor> {
    params.iter().map(|p| Tensor::zeros(p.shape())).collect()
}

/// Optimizer settings shared by the training loops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub adam: AdamConfig,
    /// Learning rate at the last step as a fraction of the initial one,
    /// reached by cosine annealing. `1.0` keeps it constant.
    pub final_lr_fraction: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            final_lr_fraction: 1.0,
        }
    }
}

/// Adam with an optional cosine learning-rate decay.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: OptimConfig,
    total_steps: usize,
    state: AdamState,
}

impl Trainer {
    pub fn new(den: &Denoiser, cfg: OptimConfig, total_steps: usize) -> Self {
        Self {
            cfg,
            total_steps,
            state: AdamState::new(den.params()),
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let base = self.cfg.adam.lr;
        if self.total_steps <= 1 || self.cfg.final_lr_fraction == 1.0 {
            return base;
        }
        let p = (step as f64 / (self.total_steps - 1) as f64).min(1.0);
        let f = self.cfg.final_lr_fraction;
        base * (f + (1.0 - f) * 0.5 * (1.0 + (PI * p).cos()))
    }

    pub fn apply(&mut self, den: &mut Denoiser, grads: &[Tensor], step: usize) -> Result<()> {
        let adam = AdamConfig {
            lr: self.lr_at(step),
            ..self.cfg.adam
        };
        adam_step(den.params_mut(), grads, &mut self.state, &adam)
    }
}

pub fn check_loss(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(IcdError::Training {
            step,
            reason: format!("loss became {loss}"),
        })
    }
}

/// Mean of consecutive windows; used to judge noisy loss curves.
pub fn window_means(values: &[f64], window: usize) -> Vec<f64> {
    values
        .chunks(window.max(1))
        .filter(|c| c.len() == window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

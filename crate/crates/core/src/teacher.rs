//! ε-prediction training of the diffusion teacher.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::denoiser::{Denoiser, DenoiserConfig, EpsilonModel};
use crate::error::{contract, Result};
use crate::rng::{normal_tensor, stream};
use crate::schedule::NoiseSchedule;
use crate::train::{check_loss, regression_grads, OptimConfig, RegressionBatch, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub steps: usize,
    pub batch: usize,
    pub optim: OptimConfig,
    /// Probability of replacing the label by ∅.
    pub cond_drop: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch: 256,
            optim: OptimConfig {
                final_lr_fraction: 0.05,
                ..Default::default()
            },
            cond_drop: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedTeacher {
    pub denoiser: Denoiser,
    /// Minibatch loss per step.
    pub losses: Vec<f64>,
}

/// Draws a noise-prediction batch: uniform continuous `t`, label dropout.
pub fn teacher_batch(
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    batch: usize,
    cond_drop: f64,
    rng: &mut impl Rng,
) -> Result<RegressionBatch> {
    let (x0, labels) = dataset.minibatch(batch, rng);
    let last = (schedule.t_max() - 1) as f64;
    let t: Vec<f64> = (0..batch).map(|_| rng.random::<f64>() * last).collect();
    let labels = labels
        .into_iter()
        .map(|c| (rng.random::<f64>() >= cond_drop).then_some(c))
        .collect();
    let eps = normal_tensor(rng, x0.shape());
    let x = schedule.q_sample(&x0, &t, &eps)?;
    Ok(RegressionBatch {
        x,
        t,
        labels,
        guidance: None,
        ddim: None,
        target: eps,
    })
}

/// Monte-Carlo estimate of `E‖ε − ε_θ(x_t, t, c)‖²`.
pub fn teacher_loss<M: EpsilonModel>(
    model: &M,
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = stream(seed, "teacher-eval");
    let b = teacher_batch(dataset, schedule, n, 0.0, &mut rng)?;
    let pred = model.predict(&b.x, &b.t, &b.labels, None)?;
    Ok(pred.mse(&b.target)? * crate::data::DIM as f64)
}

pub fn train_teacher(
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    den_config: DenoiserConfig,
    cfg: &TeacherConfig,
) -> Result<TrainedTeacher> {
    if dataset.is_empty() {
        return Err(contract("teacher training needs data"));
    }
    if den_config.num_classes != dataset.num_classes {
        return Err(contract(format!(
            "denoiser has {} classes, dataset {}",
            den_config.num_classes, dataset.num_classes
        )));
    }
    let mut den = Denoiser::new(den_config, schedule.t_max(), &mut stream(cfg.seed, "teacher-init"))?;
    let mut trainer = Trainer::new(&den, cfg.optim, cfg.steps);
    let mut rng = stream(cfg.seed, "teacher-batches");
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = teacher_batch(dataset, schedule, cfg.batch, cfg.cond_drop, &mut rng)?;
        let (loss, grads) = regression_grads(&den, &batch)?;
        check_loss(loss, step)?;
        trainer.apply(&mut den, &grads, step)?;
        losses.push(loss);
    }
    Ok(TrainedTeacher {
        denoiser: den,
        losses,
    })
}

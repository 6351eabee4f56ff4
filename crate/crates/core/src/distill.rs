//! Guidance distillation and invertible multi-boundary consistency
//! distillation.
//!
//! A consistency student never outputs a state directly. It predicts ε and
//! takes one DDIM-form jump from `t` to the boundary of its segment, so at
//! `s = t` it is the identity for any parameters.
//!
//! Training of the two students minimizes
//!
//! ```text
//! L_CD(θ+) + L_CD(θ−) + λ_f·L_f(θ−; θ+) + λ_r·L_r(θ+; θ−)
//! ```
//!
//! where θ+ is the reverse (decoding) student and θ− the forward (encoding)
//! one. In each consistency term the online student sees the point farther
//! from the boundary and the stop-gradient target sees the teacher's
//! adjacent step.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::boundaries::BoundaryPlan;
use crate::checkpoint::{pack_denoiser, unpack_denoiser, Checkpoint};
use crate::data::Dataset;
use crate::denoiser::{Denoiser, EpsilonModel};
use crate::error::{contract, IcdError, Result};
use crate::rng::{normal_tensor, stream};
use crate::schedule::NoiseSchedule;
use crate::solver::{cfg_epsilon, ddim_row_coefficients, ddim_step, ddim_update, OdeDirection};
use crate::tensor::Tensor;
use crate::train::{add_scaled, check_loss, regression_grads, OptimConfig, RegressionBatch, Trainer};

/// Guidance scales embedded during guidance distillation.
pub const DEFAULT_W_SET: [f64; 5] = [1.0, 8.0, 12.0, 16.0, 20.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfgDistillConfig {
    pub steps: usize,
    pub batch: usize,
    pub optim: OptimConfig,
    /// Share of rows queried with the null condition.
    pub null_fraction: f64,
    /// Draw `t` from the schedule grid rather than the continuum.
    pub grid_t: bool,
    pub seed: u64,
}

impl Default for CfgDistillConfig {
    fn default() -> Self {
        Self {
            steps: 20000,
            batch: 256,
            optim: OptimConfig {
                adam: crate::optim::AdamConfig {
                    lr: 3e-3,
                    ..Default::default()
                },
                final_lr_fraction: 0.01,
            },
            null_fraction: 0.0,
            grid_t: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CfgDistilled {
    pub student: Denoiser,
    pub losses: Vec<f64>,
}

fn cfg_batch(
    teacher: &Denoiser,
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    w_set: &[f64],
    cfg: &CfgDistillConfig,
    rng: &mut impl Rng,
) -> Result<RegressionBatch> {
    let batch = cfg.batch;
    let (x0, labels) = dataset.minibatch(batch, rng);
    let last = (schedule.t_max() - 1) as f64;
    let grid = schedule.grid();
    let t: Vec<f64> = (0..batch)
        .map(|_| {
            if cfg.grid_t {
                grid[rng.random_range(0..grid.len())]
            } else {
                rng.random::<f64>() * last
            }
        })
        .collect();
    let null_fraction = cfg.null_fraction;
    let labels: Vec<Option<usize>> = labels
        .into_iter()
        .map(|c| (rng.random::<f64>() >= null_fraction).then_some(c))
        .collect();
    let w: Vec<f64> = (0..batch)
        .map(|_| w_set[rng.random_range(0..w_set.len())])
        .collect();
    let eps = normal_tensor(rng, x0.shape());
    let x = schedule.q_sample(&x0, &t, &eps)?;
    let target = cfg_epsilon(teacher, &x, &t, &labels, &w)?;
    Ok(RegressionBatch {
        x,
        t,
        labels,
        guidance: Some(w),
        ddim: None,
        target,
    })
}

/// Trains a guidance-embedded copy of `teacher` to reproduce the two-call
/// guided prediction in a single call, for every scale in `w_set`.
pub fn distill_cfg(
    teacher: &Denoiser,
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    w_set: &[f64],
    cfg: &CfgDistillConfig,
) -> Result<CfgDistilled> {
    if !w_set.contains(&1.0) {
        return Err(contract("the guidance set must contain w = 1"));
    }
    if w_set.iter().any(|&w| !(w >= 0.0)) {
        return Err(contract(format!("negative guidance scale in {w_set:?}")));
    }
    if teacher.embeds_guidance() {
        return Err(contract("teacher already embeds guidance"));
    }
    if dataset.is_empty() {
        return Err(contract("guidance distillation needs data"));
    }
    let mut student = teacher.with_guidance_embedding(w_set, &mut stream(cfg.seed, "cfg-init"))?;
    let mut trainer = Trainer::new(&student, cfg.optim, cfg.steps);
    let mut rng = stream(cfg.seed, "cfg-batches");
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let b = cfg_batch(teacher, dataset, schedule, w_set, cfg, &mut rng)?;
        let (loss, grads) = regression_grads(&student, &b)?;
        check_loss(loss, step)?;
        trainer.apply(&mut student, &grads, step)?;
        losses.push(loss);
    }
    Ok(CfgDistilled { student, losses })
}

/// Per-element mean squared difference between the student at scale `w`
/// and the explicit guided teacher, over noised data at grid timesteps.
pub fn cfg_fidelity<S: EpsilonModel + ?Sized, T: EpsilonModel + ?Sized>(
    student: &S,
    teacher: &T,
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    w: f64,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = stream(seed, "cfg-fidelity");
    let (x0, labels) = dataset.minibatch(n, &mut rng);
    let grid = schedule.grid();
    let t: Vec<f64> = (0..n).map(|_| grid[rng.random_range(0..grid.len())]).collect();
    let eps = normal_tensor(&mut rng, x0.shape());
    let x = schedule.q_sample(&x0, &t, &eps)?;
    let labels: Vec<Option<usize>> = labels.into_iter().map(Some).collect();
    let ws = vec![w; n];
    let got = cfg_epsilon(student, &x, &t, &labels, &ws)?;
    let want = cfg_epsilon(teacher, &x, &t, &labels, &ws)?;
    got.mse(&want)
}

/// A single-jump student `f^m(x_t, t, s^m_t, w) = DDIM(x_t, t, s^m_t, w)`
/// built on an ε-model.
#[derive(Debug, Clone)]
pub struct ConsistencyModel<M = Denoiser> {
    pub den: M,
    pub plan: BoundaryPlan,
    pub direction: OdeDirection,
    pub schedule: NoiseSchedule,
}

impl<M: EpsilonModel> ConsistencyModel<M> {
    pub fn new(den: M, plan: BoundaryPlan, direction: OdeDirection, schedule: NoiseSchedule) -> Result<Self> {
        if plan.grid() != schedule.grid() {
            return Err(contract("plan and schedule use different grids"));
        }
        Ok(Self {
            den,
            plan,
            direction,
            schedule,
        })
    }

    /// DDIM-form jump from `t[i]` to `s[i]` with the student's own guided ε.
    pub fn jump_to(
        &self,
        x: &Tensor,
        t: &[f64],
        s: &[f64],
        labels: &[Option<usize>],
        w: &[f64],
    ) -> Result<Tensor> {
        let eps = cfg_epsilon(&self.den, x, t, labels, w)?;
        ddim_update(&self.schedule, x, &eps, t, s)
    }

    /// One jump from grid timestep `t` to its boundary `s^m_t`.
    pub fn step(&self, x: &Tensor, t: f64, labels: &[Option<usize>], w: &[f64]) -> Result<Tensor> {
        let s = self.plan.boundary_for(t, self.direction)?;
        let n = x.rows();
        self.jump_to(x, &vec![t; n], &vec![s; n], labels, w)
    }

    /// Evaluation at a boundary timestep `s` of this direction, `f(x, s, s)`.
    pub fn at_boundary(&self, x: &Tensor, s: f64, labels: &[Option<usize>], w: &[f64]) -> Result<Tensor> {
        if !self.plan.targets(self.direction).contains(&s) {
            return Err(IcdError::Range(format!(
                "{s} is not a {:?} boundary of the plan",
                self.direction
            )));
        }
        let n = x.rows();
        self.jump_to(x, &vec![s; n], &vec![s; n], labels, w)
    }
}

/// Alias matching the operation name used across the docs.
pub fn consistency_student_step<M: EpsilonModel>(
    cm: &ConsistencyModel<M>,
    x: &Tensor,
    t: f64,
    labels: &[Option<usize>],
    w: &[f64],
) -> Result<Tensor> {
    cm.step(x, t, labels, w)
}

/// Distance between student outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Distance {
    SquaredL2,
    /// `sqrt(‖a − b‖² + c²) − c`.
    PseudoHuber(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// Both students update on every step.
    Joint,
    /// The reverse student trains first with its consistency loss, then the
    /// forward student with its consistency loss and `L_f` against the
    /// finished reverse student. `L_r` needs both and is not used.
    Sequential,
}

/// Per-row weight of the reverse consistency loss as a function of the
/// row's guidance scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuidanceWeighting {
    Uniform,
    /// `1 / w²`: guided trajectories grow roughly linearly in `w`.
    InverseSquare,
}

impl GuidanceWeighting {
    fn weights(self, w: &[f64]) -> Option<Vec<f64>> {
        match self {
            GuidanceWeighting::Uniform => None,
            GuidanceWeighting::InverseSquare => Some(w.iter().map(|w| 1.0 / (w * w)).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub lambda_f: f64,
    pub lambda_r: f64,
    pub w_set: Vec<f64>,
    pub batch: usize,
    pub steps: usize,
    pub distance: Distance,
    pub guidance_weighting: GuidanceWeighting,
    pub optim: OptimConfig,
    pub mode: TrainMode,
    /// When false the forward student learns from `L_f` alone.
    pub forward_cd: bool,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_f: 1.5,
            lambda_r: 1.5,
            w_set: DEFAULT_W_SET.to_vec(),
            batch: 256,
            steps: 5000,
            distance: Distance::SquaredL2,
            guidance_weighting: GuidanceWeighting::Uniform,
            optim: OptimConfig {
                adam: crate::optim::AdamConfig {
                    lr: 1e-3,
                    ..Default::default()
                },
                final_lr_fraction: 0.01,
            },
            mode: TrainMode::Joint,
            forward_cd: true,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_f >= 0.0 && self.lambda_r >= 0.0) {
            return Err(contract("preservation weights must be >= 0"));
        }
        if self.w_set.is_empty() || self.batch == 0 {
            return Err(contract("need a guidance set and a positive batch"));
        }
        if let Distance::PseudoHuber(c) = self.distance {
            if !(c > 0.0) {
                return Err(contract("pseudo-Huber scale must be > 0"));
            }
        }
        Ok(())
    }
}

/// Inputs of one consistency term: clean data, noise and, per row, the
/// grid index of the point farther from the boundary.
#[derive(Debug, Clone)]
pub struct CdBatch {
    pub x0: Tensor,
    pub labels: Vec<Option<usize>>,
    pub noise: Tensor,
    pub index: Vec<usize>,
    pub w: Vec<f64>,
}

/// Draws grid indices `1..=N` for the reverse student and `0..N-1` for the
/// forward one.
pub fn sample_cd_batch(
    dataset: &Dataset,
    grid_len: usize,
    direction: OdeDirection,
    w_set: &[f64],
    n: usize,
    rng: &mut impl Rng,
) -> CdBatch {
    let (x0, labels) = dataset.minibatch(n, rng);
    let index = (0..n)
        .map(|_| match direction {
            OdeDirection::Reverse => rng.random_range(1..grid_len),
            OdeDirection::Forward => rng.random_range(0..grid_len - 1),
        })
        .collect();
    let w = (0..n).map(|_| w_set[rng.random_range(0..w_set.len())]).collect();
    let noise = normal_tensor(rng, x0.shape());
    CdBatch {
        x0,
        labels: labels.into_iter().map(Some).collect(),
        noise,
        index,
        w,
    }
}

/// Inputs of one preservation term; `edge[i]` indexes the plan edge the
/// cycle starts from.
#[derive(Debug, Clone)]
pub struct PreservationBatch {
    pub x0: Tensor,
    pub labels: Vec<Option<usize>>,
    pub noise: Tensor,
    pub edge: Vec<usize>,
}

/// Start edges are `1..=m` when the first model applied is the reverse one
/// and `0..m-1` when it is the forward one.
pub fn sample_preservation_batch(
    dataset: &Dataset,
    plan: &BoundaryPlan,
    first: OdeDirection,
    n: usize,
    rng: &mut impl Rng,
) -> PreservationBatch {
    let (x0, labels) = dataset.minibatch(n, rng);
    let m = plan.m();
    let edge = (0..n)
        .map(|_| match first {
            OdeDirection::Reverse => rng.random_range(1..=m),
            OdeDirection::Forward => rng.random_range(0..m),
        })
        .collect();
    let noise = normal_tensor(rng, x0.shape());
    PreservationBatch {
        x0,
        labels: labels.into_iter().map(Some).collect(),
        noise,
        edge,
    }
}

/// A loss value with gradients for the network being trained.
#[derive(Debug, Clone)]
pub struct LossTerm {
    pub loss: f64,
    pub per_sample: Vec<f64>,
    pub grads: Vec<Tensor>,
    /// Gradients that reached the frozen network's parameters.
    pub frozen_grads: Vec<Tensor>,
    /// Directions of the models in the order they were applied.
    pub sequence: Vec<OdeDirection>,
}

fn jump_node(
    g: &mut Graph,
    cm: &ConsistencyModel,
    params: &[Var],
    x: Var,
    t: &[f64],
    s: &[f64],
    labels: &[Option<usize>],
    w: &[f64],
) -> Result<Var> {
    let guidance = if cm.den.embeds_guidance() {
        Some(w)
    } else if w.iter().all(|&v| v == 1.0) {
        None
    } else {
        return Err(contract("student without guidance embedding asked for w != 1"));
    };
    let eps = cm.den.forward(g, params, x, t, labels, guidance)?;
    let (a, b) = ddim_row_coefficients(&cm.schedule, t, s)?;
    let ax = g.scale_rows(x, a)?;
    let be = g.scale_rows(eps, b)?;
    g.add(ax, be)
}

fn distance_node(g: &mut Graph, a: Var, b: Var, distance: Distance) -> Result<Var> {
    let diff = g.sub(a, b)?;
    let sq = g.square(diff);
    let rows = g.row_sums(sq)?;
    Ok(match distance {
        Distance::SquaredL2 => rows,
        Distance::PseudoHuber(c) => {
            let c2 = g.constant(Tensor::scalar(c * c));
            let shifted = g.add(rows, c2)?;
            let root = g.sqrt(shifted);
            let cv = g.constant(Tensor::scalar(c));
            g.sub(root, cv)?
        }
    })
}

fn finish(
    mut g: Graph,
    per_row: Var,
    trained: &[Var],
    frozen: &[Var],
    sequence: Vec<OdeDirection>,
) -> Result<LossTerm> {
    let loss = g.mean(per_row);
    g.backward(loss)?;
    Ok(LossTerm {
        loss: g.value(loss).data()[0],
        per_sample: g.value(per_row).data().to_vec(),
        grads: trained.iter().map(|&p| g.grad_or_zeros(p)).collect(),
        frozen_grads: frozen.iter().map(|&p| g.grad_or_zeros(p)).collect(),
        sequence,
    })
}

/// Multi-boundary consistency loss for one student.
///
/// Row `i` uses the grid point `t_n = grid[index[i]]` and its neighbor
/// toward the boundary, `t_{n∓1}`, reached by one teacher DDIM step at
/// scale `w[i]`. Both points jump to `s^m_{t_n}`; the online student sees
/// `x_{t_n}` and the stop-gradient copy sees the teacher's step.
pub fn cd_loss<T: EpsilonModel + ?Sized>(
    cm: &ConsistencyModel,
    teacher: &T,
    batch: &CdBatch,
    distance: Distance,
) -> Result<LossTerm> {
    weighted_cd_loss(cm, teacher, batch, distance, GuidanceWeighting::Uniform)
}

/// [`cd_loss`] with each row's distance scaled by its guidance weight.
pub fn weighted_cd_loss<T: EpsilonModel + ?Sized>(
    cm: &ConsistencyModel,
    teacher: &T,
    batch: &CdBatch,
    distance: Distance,
    weighting: GuidanceWeighting,
) -> Result<LossTerm> {
    let n = batch.x0.rows();
    if batch.index.len() != n || batch.w.len() != n || batch.labels.len() != n {
        return Err(IcdError::Dimension {
            op: "cd_loss",
            lhs: batch.x0.shape().to_vec(),
            rhs: vec![batch.index.len(), batch.w.len(), batch.labels.len()],
        });
    }
    let grid = cm.plan.grid();
    let mut t = Vec::with_capacity(n);
    let mut adj = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for &i in &batch.index {
        let j = match cm.direction {
            OdeDirection::Reverse if i >= 1 && i < grid.len() => i - 1,
            OdeDirection::Forward if i + 1 < grid.len() => i + 1,
            _ => {
                return Err(IcdError::Range(format!(
                    "grid index {i} has no {:?} neighbor",
                    cm.direction
                )))
            }
        };
        t.push(grid[i]);
        adj.push(grid[j]);
        s.push(cm.plan.boundary_for(grid[i], cm.direction)?);
    }
    let x_t = cm.schedule.q_sample(&batch.x0, &t, &batch.noise)?;
    let x_adj = ddim_step(teacher, &cm.schedule, &x_t, &t, &adj, &batch.labels, &batch.w)?;
    let mut g = Graph::new();
    let online_p = cm.den.bind(&mut g, true);
    let target_p = cm.den.bind(&mut g, false);
    let xv = g.constant(x_t);
    let av = g.constant(x_adj);
    let online = jump_node(&mut g, cm, &online_p, xv, &t, &s, &batch.labels, &batch.w)?;
    let target = jump_node(&mut g, cm, &target_p, av, &adj, &s, &batch.labels, &batch.w)?;
    let mut d = distance_node(&mut g, online, target, distance)?;
    if let Some(k) = weighting.weights(&batch.w) {
        d = g.scale_rows(d, k)?;
    }
    finish(g, d, &online_p, &target_p, vec![cm.direction])
}

fn same_plan(a: &ConsistencyModel, b: &ConsistencyModel) -> Result<()> {
    if a.plan != b.plan {
        return Err(contract("forward and reverse students use different plans"));
    }
    Ok(())
}

/// Noises data to a plan edge, applies `first` (frozen) to the neighboring
/// edge and `second` (trained) back, and measures the distance to the start.
fn preservation(
    second: &ConsistencyModel,
    first: &ConsistencyModel,
    batch: &PreservationBatch,
    distance: Distance,
) -> Result<LossTerm> {
    same_plan(first, second)?;
    let n = batch.x0.rows();
    if batch.edge.len() != n || batch.labels.len() != n {
        return Err(IcdError::Dimension {
            op: "preservation",
            lhs: batch.x0.shape().to_vec(),
            rhs: vec![batch.edge.len(), batch.labels.len()],
        });
    }
    let edges = first.plan.edges();
    let m = first.plan.m();
    let mut start = Vec::with_capacity(n);
    let mut mid = Vec::with_capacity(n);
    for &k in &batch.edge {
        let j = match first.direction {
            OdeDirection::Reverse if (1..=m).contains(&k) => k - 1,
            OdeDirection::Forward if k < m => k + 1,
            _ => return Err(IcdError::Range(format!("edge {k} cannot start this cycle"))),
        };
        start.push(edges[k]);
        mid.push(edges[j]);
    }
    let x = first.schedule.q_sample(&batch.x0, &start, &batch.noise)?;
    let ones = vec![1.0; n];
    let mut g = Graph::new();
    let frozen_p = first.den.bind(&mut g, false);
    let trained_p = second.den.bind(&mut g, true);
    let xv = g.constant(x);
    let y = jump_node(&mut g, first, &frozen_p, xv, &start, &mid, &batch.labels, &ones)?;
    let z = jump_node(&mut g, second, &trained_p, y, &mid, &start, &batch.labels, &ones)?;
    let d = distance_node(&mut g, z, xv, distance)?;
    finish(g, d, &trained_p, &frozen_p, vec![first.direction, second.direction])
}

/// `d(f_{θ−}(f_{θ+}(x_s)), x_s)`: the reverse student (frozen, `w = 1`)
/// jumps down from an edge, the forward student must return. Trains θ−.
pub fn preservation_loss_forward(
    fcd: &ConsistencyModel,
    cd_frozen: &ConsistencyModel,
    batch: &PreservationBatch,
    distance: Distance,
) -> Result<LossTerm> {
    if fcd.direction != OdeDirection::Forward || cd_frozen.direction != OdeDirection::Reverse {
        return Err(contract("forward preservation needs (forward, reverse) students"));
    }
    preservation(fcd, cd_frozen, batch, distance)
}

/// The mirror cycle: forward student (frozen) up, reverse student
/// (`w = 1`) back down. Trains θ+.
pub fn preservation_loss_reverse(
    cd: &ConsistencyModel,
    fcd_frozen: &ConsistencyModel,
    batch: &PreservationBatch,
    distance: Distance,
) -> Result<LossTerm> {
    if cd.direction != OdeDirection::Reverse || fcd_frozen.direction != OdeDirection::Forward {
        return Err(contract("reverse preservation needs (reverse, forward) students"));
    }
    preservation(cd, fcd_frozen, batch, distance)
}

/// Batches for every term of one training step.
#[derive(Debug, Clone)]
pub struct IcdBatches {
    pub cd_rev: CdBatch,
    pub cd_fwd: CdBatch,
    pub pres_f: PreservationBatch,
    pub pres_r: PreservationBatch,
}

/// Per-term random streams, so ablations that switch terms off still draw
/// identical batches for the remaining ones.
pub struct IcdStreams {
    cd_rev: crate::rng::StreamRng,
    cd_fwd: crate::rng::StreamRng,
    pres_f: crate::rng::StreamRng,
    pres_r: crate::rng::StreamRng,
}

impl IcdStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            cd_rev: stream(seed, "icd-cd-rev"),
            cd_fwd: stream(seed, "icd-cd-fwd"),
            pres_f: stream(seed, "icd-pres-f"),
            pres_r: stream(seed, "icd-pres-r"),
        }
    }

    pub fn draw(&mut self, dataset: &Dataset, plan: &BoundaryPlan, w_set: &[f64], n: usize) -> IcdBatches {
        let len = plan.grid().len();
        IcdBatches {
            cd_rev: sample_cd_batch(dataset, len, OdeDirection::Reverse, w_set, n, &mut self.cd_rev),
            cd_fwd: sample_cd_batch(dataset, len, OdeDirection::Forward, &[1.0], n, &mut self.cd_fwd),
            pres_f: sample_preservation_batch(dataset, plan, OdeDirection::Reverse, n, &mut self.pres_f),
            pres_r: sample_preservation_batch(dataset, plan, OdeDirection::Forward, n, &mut self.pres_r),
        }
    }
}

/// Evaluated terms of the objective; inactive terms are `None`.
#[derive(Debug, Clone)]
pub struct IcdTerms {
    pub cd_rev: Option<LossTerm>,
    pub cd_fwd: Option<LossTerm>,
    pub pres_f: Option<LossTerm>,
    pub pres_r: Option<LossTerm>,
}

fn value(term: &Option<LossTerm>) -> f64 {
    term.as_ref().map_or(0.0, |t| t.loss)
}

impl IcdTerms {
    pub fn total(&self, lambda_f: f64, lambda_r: f64) -> f64 {
        value(&self.cd_rev) + value(&self.cd_fwd) + lambda_f * value(&self.pres_f) + lambda_r * value(&self.pres_r)
    }
}

/// Which terms of the objective to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveTerms {
    pub cd_rev: bool,
    pub cd_fwd: bool,
    pub pres_f: bool,
    pub pres_r: bool,
}

pub fn icd_terms<T: EpsilonModel + ?Sized>(
    cd: &ConsistencyModel,
    fcd: &ConsistencyModel,
    teacher: &T,
    batches: &IcdBatches,
    active: ActiveTerms,
    distance: Distance,
    weighting: GuidanceWeighting,
) -> Result<IcdTerms> {
    Ok(IcdTerms {
        cd_rev: active
            .cd_rev
            .then(|| weighted_cd_loss(cd, teacher, &batches.cd_rev, distance, weighting))
            .transpose()?,
        cd_fwd: active
            .cd_fwd
            .then(|| cd_loss(fcd, teacher, &batches.cd_fwd, distance))
            .transpose()?,
        pres_f: active
            .pres_f
            .then(|| preservation_loss_forward(fcd, cd, &batches.pres_f, distance))
            .transpose()?,
        pres_r: active
            .pres_r
            .then(|| preservation_loss_reverse(cd, fcd, &batches.pres_r, distance))
            .transpose()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_cd_rev: f64,
    pub l_cd_fwd: f64,
    pub l_f: f64,
    pub l_r: f64,
    pub total: f64,
}

pub fn write_loss_csv(records: &[LossRecord], mut out: impl Write) -> Result<()> {
    writeln!(out, "step,l_cd_rev,l_cd_fwd,l_f,l_r,total")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.l_cd_rev, r.l_cd_fwd, r.l_f, r.l_r, r.total
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct IcdStudents {
    pub cd: ConsistencyModel,
    pub fcd: ConsistencyModel,
    pub log: Vec<LossRecord>,
}

fn grads_for(terms: &[(Option<&LossTerm>, f64)], params: &[Tensor]) -> Option<Vec<Tensor>> {
    let mut acc: Option<Vec<Tensor>> = None;
    for (term, k) in terms {
        if let Some(t) = term {
            let a = acc.get_or_insert_with(|| crate::train::zeros_like(params));
            add_scaled(a, &t.grads, *k);
        }
    }
    acc
}

/// Trains the reverse and forward students from a (guidance-distilled)
/// teacher over a fixed boundary plan.
///
/// The reverse student samples `w` from `cfg.w_set`; the forward student
/// and both preservation terms use `w = 1`.
pub fn train_icd(
    teacher: &Denoiser,
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    plan: &BoundaryPlan,
    cfg: &DistillConfig,
) -> Result<IcdStudents> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(contract("consistency distillation needs data"));
    }
    if teacher.embeds_guidance() {
        if let Some(w) = cfg.w_set.iter().find(|w| !teacher.guidance_scales().contains(w)) {
            return Err(contract(format!("teacher does not embed w = {w}")));
        }
    } else if cfg.w_set.iter().any(|&w| w != 1.0) {
        return Err(contract("guided training needs a guidance-distilled teacher"));
    }
    let mut cd = ConsistencyModel::new(teacher.clone(), plan.clone(), OdeDirection::Reverse, schedule.clone())?;
    let mut fcd = ConsistencyModel::new(teacher.clone(), plan.clone(), OdeDirection::Forward, schedule.clone())?;
    let phases: Vec<ActiveTerms> = match cfg.mode {
        TrainMode::Joint => vec![ActiveTerms {
            cd_rev: true,
            cd_fwd: cfg.forward_cd,
            pres_f: cfg.lambda_f > 0.0,
            pres_r: cfg.lambda_r > 0.0,
        }],
        TrainMode::Sequential => vec![
            ActiveTerms {
                cd_rev: true,
                cd_fwd: false,
                pres_f: false,
                pres_r: false,
            },
            ActiveTerms {
                cd_rev: false,
                cd_fwd: cfg.forward_cd,
                pres_f: cfg.lambda_f > 0.0,
                pres_r: false,
            },
        ],
    };
    let mut streams = IcdStreams::new(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps * phases.len());
    for active in phases {
        let mut tr_cd = Trainer::new(&cd.den, cfg.optim, cfg.steps);
        let mut tr_fcd = Trainer::new(&fcd.den, cfg.optim, cfg.steps);
        for step in 0..cfg.steps {
            let batches = streams.draw(dataset, plan, &cfg.w_set, cfg.batch);
            let terms = icd_terms(&cd, &fcd, teacher, &batches, active, cfg.distance, cfg.guidance_weighting)?;
            let total = terms.total(cfg.lambda_f, cfg.lambda_r);
            let global = log.len();
            check_loss(total, global)?;
            let g_cd = grads_for(
                &[(terms.cd_rev.as_ref(), 1.0), (terms.pres_r.as_ref(), cfg.lambda_r)],
                cd.den.params(),
            );
            let g_fcd = grads_for(
                &[(terms.cd_fwd.as_ref(), 1.0), (terms.pres_f.as_ref(), cfg.lambda_f)],
                fcd.den.params(),
            );
            if let Some(g) = g_cd {
                tr_cd.apply(&mut cd.den, &g, step)?;
            }
            if let Some(g) = g_fcd {
                tr_fcd.apply(&mut fcd.den, &g, step)?;
            }
            log.push(LossRecord {
                step: global,
                l_cd_rev: value(&terms.cd_rev),
                l_cd_fwd: value(&terms.cd_fwd),
                l_f: value(&terms.pres_f),
                l_r: value(&terms.pres_r),
                total,
            });
        }
    }
    Ok(IcdStudents { cd, fcd, log })
}

/// Stochastic reference sampler for a single-boundary reverse student:
/// jump to `t_0`, re-noise to a lower intermediate time, repeat `k` times
/// in total.
pub fn multistep_consistency_sample<M: EpsilonModel>(
    cm: &ConsistencyModel<M>,
    z: &Tensor,
    k: usize,
    labels: &[Option<usize>],
    w: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if cm.direction != OdeDirection::Reverse || cm.plan.m() != 1 {
        return Err(contract("multistep sampling needs a single-boundary reverse student"));
    }
    if k == 0 {
        return Err(contract("multistep sampling needs k >= 1"));
    }
    let grid = cm.plan.grid();
    let last = grid.len() - 1;
    let ws = vec![w; z.rows()];
    let mut x = cm.step(z, grid[last], labels, &ws)?;
    for i in 1..k {
        let idx = ((last * (k - i)) as f64 / k as f64).round() as usize;
        if idx == 0 {
            break;
        }
        let t = grid[idx];
        let noise = normal_tensor(rng, x.shape());
        let x_t = cm.schedule.q_sample_at(&x, t, &noise)?;
        x = cm.step(&x_t, t, labels, &ws)?;
    }
    if !x.all_finite() {
        return Err(IcdError::Pipeline { stage: "multistep sampling" });
    }
    Ok(x)
}

/// Stores a student as `{prefix}.*` network blocks plus `{prefix}:plan_edges`
/// and `{prefix}:direction`.
pub fn pack_consistency(ck: &mut Checkpoint, prefix: &str, cm: &ConsistencyModel) {
    pack_denoiser(ck, prefix, &cm.den);
    let edges = cm.plan.edges();
    ck.push(
        format!("{prefix}:plan_edges"),
        Tensor::new(vec![edges.len()], edges.to_vec()).expect("1-D"),
    );
    ck.push(
        format!("{prefix}:direction"),
        Tensor::scalar(cm.direction.code() as f64),
    );
}

pub fn unpack_consistency(ck: &Checkpoint, prefix: &str) -> Result<ConsistencyModel> {
    let schedule = NoiseSchedule::from_params(ck.schedule)?;
    let den = unpack_denoiser(ck, prefix)?;
    let edges = ck.get(&format!("{prefix}:plan_edges"))?.data().to_vec();
    let plan = BoundaryPlan::from_edges(schedule.grid(), edges)?;
    let code = ck.get(&format!("{prefix}:direction"))?.item()?;
    let direction = OdeDirection::from_code(code as u32)
        .filter(|_| code.fract() == 0.0)
        .ok_or_else(|| IcdError::Checkpoint(format!("unknown direction code {code}")))?;
    ConsistencyModel::new(den, plan, direction, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundaries::make_plan;
    use crate::data::GaussianMixture;
    use crate::denoiser::DenoiserConfig;

    fn setup() -> (NoiseSchedule, Dataset, Denoiser, BoundaryPlan) {
        let s = NoiseSchedule::from_params(crate::schedule::ScheduleParams::new(9, 1000)).unwrap();
        let mix = GaussianMixture::circle(4, 2.0, 0.3).unwrap();
        let ds = mix.sample(64, &mut stream(1, "d"));
        let mut den = Denoiser::new(
            DenoiserConfig {
                num_classes: 4,
                hidden: 12,
                depth: 2,
                ..Default::default()
            },
            1000,
            &mut stream(2, "n"),
        )
        .unwrap();
        let n = den.params().len();
        den.params_mut()[n - 2] = normal_tensor(&mut stream(3, "o"), &[12, 2]).scale(0.2);
        let den = den
            .with_guidance_embedding(&[1.0, 8.0], &mut stream(4, "g"))
            .unwrap();
        let plan = make_plan(s.grid(), 1000, 3, None).unwrap();
        (s, ds, den, plan)
    }

    fn students() -> (ConsistencyModel, ConsistencyModel, Denoiser, Dataset) {
        let (s, ds, den, plan) = setup();
        let cd = ConsistencyModel::new(den.clone(), plan.clone(), OdeDirection::Reverse, s.clone()).unwrap();
        let mut fden = den.clone();
        fden.params_mut()[3].data_mut()[0] += 0.3;
        let fcd = ConsistencyModel::new(fden, plan, OdeDirection::Forward, s).unwrap();
        (cd, fcd, den, ds)
    }

    #[test]
    fn boundary_evaluation_is_identity() {
        let (cd, fcd, _, _) = students();
        let x = Tensor::from_rows(&[[0.3, -1.1], [2.0, 0.5]]).unwrap();
        let l = [Some(0), Some(3)];
        for cm in [&cd, &fcd] {
            for &e in cm.plan.targets(cm.direction) {
                assert_eq!(cm.at_boundary(&x, e, &l, &[8.0, 1.0]).unwrap(), x);
            }
        }
        assert_eq!(cd.step(&x, cd.plan.grid()[0], &l, &[1.0, 1.0]).unwrap(), x);
    }

    #[test]
    fn preservation_order_and_isolation() {
        let (cd, fcd, _, ds) = students();
        let mut rng = stream(5, "p");
        let bf = sample_preservation_batch(&ds, &cd.plan, OdeDirection::Reverse, 16, &mut rng);
        let br = sample_preservation_batch(&ds, &cd.plan, OdeDirection::Forward, 16, &mut rng);
        let lf = preservation_loss_forward(&fcd, &cd, &bf, Distance::SquaredL2).unwrap();
        let lr = preservation_loss_reverse(&cd, &fcd, &br, Distance::SquaredL2).unwrap();
        assert_eq!(lf.sequence, vec![OdeDirection::Reverse, OdeDirection::Forward]);
        assert_eq!(lr.sequence, vec![OdeDirection::Forward, OdeDirection::Reverse]);
        for term in [&lf, &lr] {
            assert!(term.frozen_grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
            assert!(term.grads.iter().any(|g| g.data().iter().any(|&v| v != 0.0)));
        }
    }

    #[test]
    fn mutual_inverses_have_zero_preservation_loss() {
        // With ε ≡ 0 both jumps are pure rescalings by reciprocal factors.
        let (cd, fcd, _, ds) = students();
        let zero = |mut cm: ConsistencyModel| {
            for p in cm.den.params_mut() {
                p.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            cm
        };
        let (cd, fcd) = (zero(cd), zero(fcd));
        let b = sample_preservation_batch(&ds, &cd.plan, OdeDirection::Reverse, 8, &mut stream(6, "p"));
        let l = preservation_loss_forward(&fcd, &cd, &b, Distance::SquaredL2).unwrap();
        assert!(l.loss < 1e-24, "{}", l.loss);
    }

    #[test]
    fn identical_rows_give_identical_losses() {
        let (cd, _, den, ds) = students();
        let mut b = sample_cd_batch(&ds, cd.plan.grid().len(), OdeDirection::Reverse, &[1.0, 8.0], 1, &mut stream(7, "c"));
        let rep = |t: &Tensor| Tensor::from_rows(&vec![t.row(0).to_vec(); 5]).unwrap();
        b = CdBatch {
            x0: rep(&b.x0),
            noise: rep(&b.noise),
            labels: vec![b.labels[0]; 5],
            index: vec![b.index[0]; 5],
            w: vec![b.w[0]; 5],
        };
        let l = cd_loss(&cd, &den, &b, Distance::SquaredL2).unwrap();
        assert!(l.per_sample.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn objective_without_preservation_is_sum_of_consistency_terms() {
        let (cd, fcd, den, ds) = students();
        let mut st = IcdStreams::new(3);
        let b = st.draw(&ds, &cd.plan, &[1.0, 8.0], 16);
        let all = ActiveTerms {
            cd_rev: true,
            cd_fwd: true,
            pres_f: true,
            pres_r: true,
        };
        let terms = icd_terms(&cd, &fcd, &den, &b, all, Distance::SquaredL2, GuidanceWeighting::Uniform).unwrap();
        let sum = terms.cd_rev.as_ref().unwrap().loss + terms.cd_fwd.as_ref().unwrap().loss;
        assert_eq!(terms.total(0.0, 0.0), sum);
        assert!(terms.total(1.5, 1.5) > sum);
    }

    #[test]
    fn inverse_square_weighting_scales_rows_by_guidance() {
        let (cd, _, den, ds) = students();
        let b = sample_cd_batch(&ds, cd.plan.grid().len(), OdeDirection::Reverse, &[1.0, 8.0], 32, &mut stream(8, "c"));
        let plain = cd_loss(&cd, &den, &b, Distance::SquaredL2).unwrap();
        let weighted = weighted_cd_loss(&cd, &den, &b, Distance::SquaredL2, GuidanceWeighting::InverseSquare).unwrap();
        for ((p, q), w) in plain.per_sample.iter().zip(&weighted.per_sample).zip(&b.w) {
            assert!((q - p / (w * w)).abs() <= 1e-15 * p.abs().max(1.0));
        }
        let ones = CdBatch {
            w: vec![1.0; b.w.len()],
            ..b
        };
        let a = cd_loss(&cd, &den, &ones, Distance::SquaredL2).unwrap();
        let c = weighted_cd_loss(&cd, &den, &ones, Distance::SquaredL2, GuidanceWeighting::InverseSquare).unwrap();
        assert_eq!(a.per_sample, c.per_sample);
        assert_eq!(a.grads, c.grads);
    }

    #[test]
    fn pseudo_huber_is_below_squared_l2_for_large_errors() {
        let (cd, _, den, ds) = students();
        let b = sample_cd_batch(&ds, cd.plan.grid().len(), OdeDirection::Reverse, &[8.0], 16, &mut stream(8, "c"));
        let l2 = cd_loss(&cd, &den, &b, Distance::SquaredL2).unwrap();
        let ph = cd_loss(&cd, &den, &b, Distance::PseudoHuber(0.01)).unwrap();
        assert!(ph.loss.is_finite() && ph.loss <= l2.loss.sqrt() + 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (cd, _, _, _) = students();
        let mut ck = Checkpoint::new(cd.schedule.params());
        pack_consistency(&mut ck, "cd", &cd);
        let back = Checkpoint::read_from(ck.to_bytes().as_slice()).unwrap();
        let cm = unpack_consistency(&back, "cd").unwrap();
        assert_eq!(cm.den, cd.den);
        assert_eq!(cm.plan, cd.plan);
        assert_eq!(cm.direction, OdeDirection::Reverse);
    }

    #[test]
    fn multistep_sampler_contract() {
        let (s, ds, den, _) = setup();
        let plan = make_plan(s.grid(), 1000, 1, None).unwrap();
        let cm = ConsistencyModel::new(den, plan, OdeDirection::Reverse, s).unwrap();
        let z = normal_tensor(&mut stream(9, "z"), &[6, 2]);
        let l = vec![Some(1); 6];
        let a = multistep_consistency_sample(&cm, &z, 1, &l, 1.0, &mut stream(1, "a")).unwrap();
        let b = multistep_consistency_sample(&cm, &z, 1, &l, 1.0, &mut stream(2, "a")).unwrap();
        assert_eq!(a, b);
        let a = multistep_consistency_sample(&cm, &z, 4, &l, 1.0, &mut stream(1, "a")).unwrap();
        let b = multistep_consistency_sample(&cm, &z, 4, &l, 1.0, &mut stream(2, "a")).unwrap();
        assert_ne!(a, b);
        let _ = ds;
    }
}

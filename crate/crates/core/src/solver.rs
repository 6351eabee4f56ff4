//! DDIM stepping in both directions, classifier-free guidance, and
//! time-dependent guidance schedules.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::denoiser::EpsilonModel;
use crate::error::{contract, IcdError, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Direction of travel along the probability-flow ODE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OdeDirection {
    /// Noise to data (decoding).
    Reverse,
    /// Data to noise (encoding).
    Forward,
}

impl OdeDirection {
    pub fn code(self) -> u32 {
        match self {
            OdeDirection::Reverse => 0,
            OdeDirection::Forward => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(OdeDirection::Reverse),
            1 => Some(OdeDirection::Forward),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuidanceMode {
    Constant,
    /// `w = 1` above the threshold, `w_max` at or below it.
    Step,
    /// Linear interpolation between `tau1` (full scale) and `tau2` (unguided).
    Ramp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSchedule {
    pub mode: GuidanceMode,
    pub w_max: f64,
    pub tau1: f64,
    pub tau2: f64,
}

impl GuidanceSchedule {
    pub fn new(mode: GuidanceMode, w_max: f64, tau1: f64, tau2: f64) -> Result<Self> {
        let g = Self {
            mode,
            w_max,
            tau1,
            tau2,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn constant(w: f64) -> Self {
        Self {
            mode: GuidanceMode::Constant,
            w_max: w,
            tau1: 0.0,
            tau2: 0.0,
        }
    }

    pub fn unguided() -> Self {
        Self::constant(1.0)
    }

    pub fn step(w_max: f64, tau: f64) -> Result<Self> {
        Self::new(GuidanceMode::Step, w_max, tau, tau)
    }

    pub fn ramp(w_max: f64, tau1: f64, tau2: f64) -> Result<Self> {
        Self::new(GuidanceMode::Ramp, w_max, tau1, tau2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_max >= 0.0) {
            return Err(contract(format!("guidance scale {} < 0", self.w_max)));
        }
        if self.mode == GuidanceMode::Constant {
            return Ok(());
        }
        if !(self.w_max >= 1.0) {
            return Err(contract("dynamic guidance needs w_max >= 1"));
        }
        let unit = 0.0..=1.0;
        if !unit.contains(&self.tau1) || !unit.contains(&self.tau2) || self.tau1 > self.tau2 {
            return Err(contract(format!(
                "need 0 <= tau1 <= tau2 <= 1, got {} and {}",
                self.tau1, self.tau2
            )));
        }
        if self.mode == GuidanceMode::Step && self.tau1 != self.tau2 {
            return Err(contract("step guidance needs tau1 == tau2"));
        }
        Ok(())
    }

    /// Guidance scale at timestep `t`, compared on the normalized time
    /// `t / T_max`.
    pub fn weight(&self, t: f64, t_max: usize) -> f64 {
        let u = t / t_max as f64;
        match self.mode {
            GuidanceMode::Constant => self.w_max,
            GuidanceMode::Step => {
                if u > self.tau2 {
                    1.0
                } else {
                    self.w_max
                }
            }
            GuidanceMode::Ramp => {
                if u >= self.tau2 {
                    1.0
                } else if u <= self.tau1 {
                    self.w_max
                } else {
                    let frac = (self.tau2 - u) / (self.tau2 - self.tau1);
                    1.0 + (self.w_max - 1.0) * frac
                }
            }
        }
    }

    pub fn is_unguided(&self) -> bool {
        self.mode == GuidanceMode::Constant && self.w_max == 1.0
    }
}

/// Scale to apply at `t` under `sched`.
pub fn dynamic_w(sched: &GuidanceSchedule, t: f64, t_max: usize) -> f64 {
    sched.weight(t, t_max)
}

/// Lifts plain class labels to conditions.
pub fn conditions(labels: &[usize]) -> Vec<Option<usize>> {
    labels.iter().map(|&c| Some(c)).collect()
}

/// Guided noise prediction `ε(x,t,∅) + w·(ε(x,t,c) − ε(x,t,∅))`, one scale
/// per row.
///
/// Guidance-embedded models are evaluated once. Otherwise a batch where
/// every `w == 1` costs one conditional evaluation and any other batch
/// costs exactly two.
pub fn cfg_epsilon<M: EpsilonModel + ?Sized>(
    model: &M,
    x: &Tensor,
    t: &[f64],
    labels: &[Option<usize>],
    w: &[f64],
) -> Result<Tensor> {
    if w.len() != x.rows() {
        return Err(IcdError::Dimension {
            op: "cfg_epsilon",
            lhs: x.shape().to_vec(),
            rhs: vec![w.len()],
        });
    }
    if let Some(bad) = w.iter().find(|&&v| !(v >= 0.0)) {
        return Err(contract(format!("guidance scale {bad} < 0")));
    }
    if model.embeds_guidance() {
        return model.predict(x, t, labels, Some(w));
    }
    if w.iter().all(|&v| v == 1.0) {
        return model.predict(x, t, labels, None);
    }
    let null = vec![None; labels.len()];
    let uncond = model.predict(x, t, &null, None)?;
    let cond = model.predict(x, t, labels, None)?;
    let mut out = uncond;
    for (r, &wr) in w.iter().enumerate() {
        let c = cond.row(r);
        for (o, &ci) in out.row_mut(r).iter_mut().zip(c) {
            *o = if wr == 1.0 { ci } else { *o + wr * (ci - *o) };
        }
    }
    Ok(out)
}

/// `(sqrt(α_s/α_t), sqrt(1-α_s) − sqrt(α_s/α_t)·sqrt(1-α_t))`.
///
/// At `s == t` this is exactly `(1, 0)`.
pub fn ddim_coefficients(alpha_t: f64, alpha_s: f64) -> (f64, f64) {
    let a = (alpha_s / alpha_t).sqrt();
    let b = (1.0 - alpha_s).sqrt() - a * (1.0 - alpha_t).sqrt();
    (a, b)
}

/// Per-row DDIM coefficients for moving from `t[i]` to `s[i]`.
pub fn ddim_row_coefficients(
    schedule: &NoiseSchedule,
    t: &[f64],
    s: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if t.len() != s.len() {
        return Err(IcdError::Dimension {
            op: "ddim",
            lhs: vec![t.len()],
            rhs: vec![s.len()],
        });
    }
    let mut a = Vec::with_capacity(t.len());
    let mut b = Vec::with_capacity(t.len());
    for (&ti, &si) in t.iter().zip(s) {
        let (ai, bi) = ddim_coefficients(schedule.alpha_bar(ti)?, schedule.alpha_bar(si)?);
        a.push(ai);
        b.push(bi);
    }
    Ok((a, b))
}

/// DDIM update given an already computed noise prediction.
pub fn ddim_update(
    schedule: &NoiseSchedule,
    x: &Tensor,
    eps: &Tensor,
    t: &[f64],
    s: &[f64],
) -> Result<Tensor> {
    if x.shape() != eps.shape() || t.len() != x.rows() {
        return Err(IcdError::Dimension {
            op: "ddim_update",
            lhs: x.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let (a, b) = ddim_row_coefficients(schedule, t, s)?;
    let mut out = x.clone();
    for r in 0..x.rows() {
        let e = eps.row(r);
        for (o, &ei) in out.row_mut(r).iter_mut().zip(e) {
            *o = a[r] * *o + b[r] * ei;
        }
    }
    Ok(out)
}

/// One DDIM step from `t` to `s` using the guided prediction at `x_t`. The
/// same formula serves both directions.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<M: EpsilonModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x: &Tensor,
    t: &[f64],
    s: &[f64],
    labels: &[Option<usize>],
    w: &[f64],
) -> Result<Tensor> {
    let eps = cfg_epsilon(model, x, t, labels, w)?;
    ddim_update(schedule, x, &eps, t, s)
}

/// States visited by a multi-step solve; `states[0]` is the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub timesteps: Vec<f64>,
    pub states: Vec<Tensor>,
}

impl Trajectory {
    pub fn start(x: Tensor, t: f64) -> Self {
        Self {
            timesteps: vec![t],
            states: vec![x],
        }
    }

    pub fn push(&mut self, x: Tensor, t: f64) {
        self.timesteps.push(t);
        self.states.push(x);
    }

    pub fn last(&self) -> &Tensor {
        self.states.last().expect("trajectory holds its input")
    }

    pub fn into_last(mut self) -> Tensor {
        self.states.pop().expect("trajectory holds its input")
    }

    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }
}

/// Integrates over consecutive points of an ascending `grid`, upward for
/// [`OdeDirection::Forward`] and downward for [`OdeDirection::Reverse`].
/// The guidance scale of each step is taken at the step's starting time.
pub fn ddim_solve<M: EpsilonModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x: &Tensor,
    direction: OdeDirection,
    grid: &[f64],
    labels: &[Option<usize>],
    gsched: &GuidanceSchedule,
) -> Result<Trajectory> {
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(contract("solver grid must be strictly increasing"));
    }
    let path: Vec<f64> = match direction {
        OdeDirection::Forward => grid.to_vec(),
        OdeDirection::Reverse => grid.iter().rev().copied().collect(),
    };
    let mut traj = Trajectory::start(x.clone(), path.first().copied().unwrap_or(0.0));
    let n = x.rows();
    for (i, pair) in path.windows(2).enumerate() {
        let (t, s) = (pair[0], pair[1]);
        let w = gsched.weight(t, schedule.t_max());
        let next = ddim_step(
            model,
            schedule,
            traj.last(),
            &vec![t; n],
            &vec![s; n],
            labels,
            &vec![w; n],
        )?;
        if !next.all_finite() {
            return Err(IcdError::Solver { step: i });
        }
        traj.push(next, s);
    }
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub mse: f64,
    pub n_samples: usize,
}

/// Reconstruction error as a function of the guidance turn-on threshold.
///
/// Every sample is encoded once without guidance, then decoded with
/// `w = w_max` at normalized times `<= T` and `w = 1` above.
pub fn threshold_sweep<M: EpsilonModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    dataset: &Dataset,
    thresholds: &[f64],
    w_max: f64,
) -> Result<Vec<SweepRow>> {
    if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(contract(format!("threshold {t} outside [0, 1]")));
    }
    if dataset.is_empty() {
        return Ok(thresholds
            .iter()
            .map(|&threshold| SweepRow {
                threshold,
                mse: 0.0,
                n_samples: 0,
            })
            .collect());
    }
    let x0 = dataset.points();
    let labels = conditions(&dataset.labels());
    let grid = schedule.grid();
    let z = ddim_solve(
        model,
        schedule,
        &x0,
        OdeDirection::Forward,
        grid,
        &labels,
        &GuidanceSchedule::unguided(),
    )?
    .into_last();
    thresholds
        .iter()
        .map(|&threshold| {
            let g = GuidanceSchedule::step(w_max, threshold)?;
            let rec = ddim_solve(model, schedule, &z, OdeDirection::Reverse, grid, &labels, &g)?
                .into_last();
            Ok(SweepRow {
                threshold,
                mse: rec.mse(&x0)?,
                n_samples: dataset.len(),
            })
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "threshold,mse,n_samples")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.threshold, r.mse, r.n_samples)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    /// Returns constant `a` unconditionally and `b` conditionally; counts calls.
    struct Constant {
        a: f64,
        b: f64,
        calls: Cell<usize>,
    }

    impl EpsilonModel for Constant {
        fn predict(
            &self,
            x: &Tensor,
            _t: &[f64],
            labels: &[Option<usize>],
            _g: Option<&[f64]>,
        ) -> Result<Tensor> {
            self.calls.set(self.calls.get() + 1);
            let mut out = Tensor::zeros(x.shape());
            for (r, l) in labels.iter().enumerate() {
                let v = if l.is_some() { self.b } else { self.a };
                out.row_mut(r).iter_mut().for_each(|o| *o = v);
            }
            Ok(out)
        }
    }

    fn model() -> Constant {
        Constant {
            a: 0.25,
            b: -1.5,
            calls: Cell::new(0),
        }
    }

    #[test]
    fn cfg_special_scales_and_call_counts() {
        let m = model();
        let x = Tensor::zeros(&[1, 2]);
        let c = [Some(0)];
        let e1 = cfg_epsilon(&m, &x, &[5.0], &c, &[1.0]).unwrap();
        assert_eq!(e1.data(), &[-1.5, -1.5]);
        assert_eq!(m.calls.get(), 1);
        let e0 = cfg_epsilon(&m, &x, &[5.0], &c, &[0.0]).unwrap();
        assert_eq!(e0.data(), &[0.25, 0.25]);
        assert_eq!(m.calls.get(), 3);
        let e8 = cfg_epsilon(&m, &x, &[5.0], &c, &[8.0]).unwrap();
        assert_eq!(e8.data()[0], 0.25 + 8.0 * (-1.5 - 0.25));
        assert!(cfg_epsilon(&m, &x, &[5.0], &c, &[-1.0]).is_err());
    }

    #[test]
    fn step_schedule_switches_at_tau() {
        let g = GuidanceSchedule::step(8.0, 0.7).unwrap();
        assert_eq!(g.weight(900.0, 1000), 1.0);
        assert_eq!(g.weight(500.0, 1000), 8.0);
        assert_eq!(g.weight(700.0, 1000), 8.0);
        let c = GuidanceSchedule::constant(8.0);
        assert!((0..1000).all(|t| c.weight(t as f64, 1000) == 8.0));
    }

    #[test]
    fn ramp_interpolates_and_clamps() {
        let g = GuidanceSchedule::ramp(9.0, 0.2, 0.6).unwrap();
        assert_eq!(g.weight(100.0, 1000), 9.0);
        assert_eq!(g.weight(800.0, 1000), 1.0);
        assert!((g.weight(400.0, 1000) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_validation() {
        assert!(GuidanceSchedule::ramp(8.0, 0.8, 0.2).is_err());
        assert!(GuidanceSchedule::new(GuidanceMode::Step, 8.0, 0.3, 0.5).is_err());
        assert!(GuidanceSchedule::step(8.0, 1.5).is_err());
    }

    #[test]
    fn coefficients_collapse_at_equal_times() {
        for a in [0.9999, 0.5, 3.9e-5] {
            assert_eq!(ddim_coefficients(a, a), (1.0, 0.0));
        }
    }
}

//! Linear-β noise schedule and the forward diffusion process.
//!
//! Timesteps are real numbers in `[0, T_max - 1]`. The cumulative product
//! ᾱ is tabulated at integer steps and interpolated linearly in log space in
//! between, which keeps it strictly decreasing and lets grids of any
//! resolution share one schedule.

use serde::{Deserialize, Serialize};

use crate::error::{contract, IcdError, Result};
use crate::tensor::Tensor;

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;
/// Grid intervals of the default teacher grid: 50 timesteps 19, 39, ..., 999.
pub const DEFAULT_GRID_STEPS: usize = 49;
pub const DEFAULT_T_MAX: usize = 1000;

/// Smallest modeled timestep, 19 at `T_max = 1000`, scaled proportionally.
pub fn default_t_min(t_max: usize) -> f64 {
    ((19 * t_max + 500) / 1000) as f64
}

/// Parameters that fully determine a [`NoiseSchedule`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub n_steps: usize,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub t_min: f64,
}

impl ScheduleParams {
    pub fn new(n_steps: usize, t_max: usize) -> Self {
        Self {
            n_steps,
            t_max,
            beta_start: BETA_START,
            beta_end: BETA_END,
            t_min: default_t_min(t_max),
        }
    }
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self::new(DEFAULT_GRID_STEPS, DEFAULT_T_MAX)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    alpha_bar: Vec<f64>,
    log_alpha_bar: Vec<f64>,
    grid: Vec<f64>,
}

/// Linear-β schedule with `n_steps + 1` evenly spaced grid timesteps over
/// `[t_min, T_max - 1]`.
pub fn make_schedule(n_steps: usize, t_max: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::from_params(ScheduleParams::new(n_steps, t_max))
}

impl NoiseSchedule {
    pub fn from_params(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams {
            n_steps,
            t_max,
            beta_start,
            beta_end,
            t_min,
        } = params;
        if n_steps < 1 || n_steps > t_max {
            return Err(contract(format!(
                "grid steps must satisfy 1 <= N <= T_max, got N={n_steps}, T_max={t_max}"
            )));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(contract(format!(
                "invalid beta range [{beta_start}, {beta_end}]"
            )));
        }
        let last = (t_max - 1) as f64;
        if !(0.0..last).contains(&t_min) {
            return Err(contract(format!("t_min={t_min} outside [0, {last})")));
        }
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut log_alpha_bar = Vec::with_capacity(t_max);
        let mut acc = 0.0f64;
        let mut prod = 1.0f64;
        for i in 0..t_max {
            let beta = if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
            };
            prod *= 1.0 - beta;
            acc += (1.0 - beta).ln();
            alpha_bar.push(prod);
            log_alpha_bar.push(acc);
        }
        let grid = (0..=n_steps)
            .map(|k| {
                if k == n_steps {
                    last
                } else {
                    t_min + (last - t_min) * k as f64 / n_steps as f64
                }
            })
            .collect();
        Ok(Self {
            params,
            alpha_bar,
            log_alpha_bar,
            grid,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn t_max(&self) -> usize {
        self.params.t_max
    }

    pub fn n_steps(&self) -> usize {
        self.params.n_steps
    }

    /// Ascending grid `t_0 < ... < t_N`.
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Tabulated ᾱ at integer timesteps `0..T_max`.
    pub fn alpha_bar_table(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        let last = (self.params.t_max - 1) as f64;
        if !(0.0..=last).contains(&t) {
            return Err(IcdError::Range(format!("timestep {t} outside [0, {last}]")));
        }
        let lo = t.floor() as usize;
        let frac = t - lo as f64;
        if frac == 0.0 {
            return Ok(self.alpha_bar[lo]);
        }
        let hi = lo + 1;
        let log = self.log_alpha_bar[lo] * (1.0 - frac) + self.log_alpha_bar[hi] * frac;
        Ok(log.exp())
    }

    /// `sqrt(ᾱ_t)·x0 + sqrt(1 - ᾱ_t)·eps`, with one timestep per row.
    pub fn q_sample(&self, x0: &Tensor, t: &[f64], eps: &Tensor) -> Result<Tensor> {
        if x0.shape() != eps.shape() {
            return Err(IcdError::Dimension {
                op: "q_sample",
                lhs: x0.shape().to_vec(),
                rhs: eps.shape().to_vec(),
            });
        }
        if t.len() != x0.rows() {
            return Err(IcdError::Dimension {
                op: "q_sample",
                lhs: x0.shape().to_vec(),
                rhs: vec![t.len()],
            });
        }
        let mut out = x0.clone();
        for (r, &tr) in t.iter().enumerate() {
            let a = self.alpha_bar(tr)?;
            let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
            for (o, &e) in out.row_mut(r).iter_mut().zip(eps.row(r)) {
                *o = sa * *o + sb * e;
            }
        }
        Ok(out)
    }

    /// [`Self::q_sample`] with a shared timestep.
    pub fn q_sample_at(&self, x0: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
        self.q_sample(x0, &vec![t; x0.rows()], eps)
    }

    /// Index of `t` in the grid, if it is a grid point.
    pub fn grid_index(&self, t: f64) -> Option<usize> {
        self.grid.iter().position(|&g| (g - t).abs() < 1e-9)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_entry_is_one_minus_beta_start() {
        let s = make_schedule(49, 1000).unwrap();
        assert!((s.alpha_bar(0.0).unwrap() - 0.9999).abs() < 1e-15);
    }

    #[test]
    fn strictly_decreasing_and_in_unit_interval() {
        let s = make_schedule(49, 1000).unwrap();
        let tab = s.alpha_bar_table();
        assert!(tab.windows(2).all(|w| w[1] < w[0]));
        assert!(tab.iter().all(|&a| a > 0.0 && a <= 1.0));
        // fractional timesteps stay monotone too
        let mut prev = f64::INFINITY;
        for i in 0..2000 {
            let a = s.alpha_bar(i as f64 * 0.4995).unwrap();
            assert!(a < prev);
            prev = a;
        }
    }

    #[test]
    fn last_entry_matches_direct_product() {
        // Oracle: multiply (1 - β_t) directly, β_t written out independently.
        let mut prod = 1.0;
        for t in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * (t as f64) / 999.0;
            prod *= 1.0 - beta;
        }
        let s = make_schedule(49, 1000).unwrap();
        let got = s.alpha_bar(999.0).unwrap();
        assert!((got - prod).abs() < 1e-18, "{got} vs {prod}");
        assert!(got < 1e-4);
    }

    #[test]
    fn default_grid_is_the_fifty_point_ddim_grid() {
        let s = NoiseSchedule::from_params(ScheduleParams::default()).unwrap();
        let g = s.grid();
        assert_eq!(g.len(), 50);
        for (k, &t) in g.iter().enumerate() {
            assert_eq!(t, 19.0 + 20.0 * k as f64);
        }
    }

    #[test]
    fn invalid_step_counts() {
        assert!(make_schedule(0, 1000).is_err());
        assert!(make_schedule(1001, 1000).is_err());
        assert!(make_schedule(1, 1000).is_ok());
    }

    #[test]
    fn q_sample_edge_cases() {
        let s = make_schedule(49, 1000).unwrap();
        let x0 = Tensor::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap();
        let eps = Tensor::from_rows(&[[0.3, 0.1], [-1.0, 2.0]]).unwrap();
        let zero = Tensor::zeros(&[2, 2]);
        let out = s.q_sample(&x0, &[500.0, 500.0], &zero).unwrap();
        let k = s.alpha_bar(500.0).unwrap().sqrt();
        assert_eq!(out, x0.scale(k));
        assert!(matches!(
            s.q_sample(&x0, &[1000.0, 0.0], &eps),
            Err(IcdError::Range(_))
        ));
        assert!(s.q_sample(&x0, &[1.0], &eps).is_err());
    }
}

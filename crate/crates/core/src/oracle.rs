//! Exact ε-prediction for Gaussian-mixture data.
//!
//! For `x0 ~ Σ_k π_k N(μ_k, σ_k² I)` and `x_t = a·x0 + b·ε` with
//! `a = sqrt(ᾱ_t)`, `b = sqrt(1 - ᾱ_t)`, component `k` of the marginal is
//! `N(a μ_k, v_k I)` with `v_k = a² σ_k² + b²`, and
//!
//! ```text
//! E[ε | x_t, k] = b (x_t - a μ_k) / v_k
//! E[ε | x_t]    = Σ_k r_k(x_t) E[ε | x_t, k]
//! ```
//!
//! where `r_k` are the posterior component responsibilities. A class label
//! restricts the sum to that component.

use crate::data::GaussianMixture;
use crate::denoiser::EpsilonModel;
use crate::error::{IcdError, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AnalyticEpsilon {
    mixture: GaussianMixture,
    schedule: NoiseSchedule,
}

impl AnalyticEpsilon {
    pub fn new(mixture: GaussianMixture, schedule: NoiseSchedule) -> Result<Self> {
        mixture.validate()?;
        Ok(Self { mixture, schedule })
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn eps_row(&self, x: &[f64], t: f64, label: Option<usize>, out: &mut [f64]) -> Result<()> {
        let ab = self.schedule.alpha_bar(t)?;
        let (a, b2) = (ab.sqrt(), 1.0 - ab);
        let b = b2.sqrt();
        let comps: Vec<usize> = match label {
            Some(c) if c < self.mixture.num_components() => vec![c],
            Some(c) => {
                return Err(IcdError::Range(format!(
                    "class {c} with {} components",
                    self.mixture.num_components()
                )))
            }
            None => (0..self.mixture.num_components()).collect(),
        };
        let d = x.len() as f64;
        let mut logw = Vec::with_capacity(comps.len());
        for &k in &comps {
            let v = a * a * self.mixture.sigmas[k].powi(2) + b2;
            let m = self.mixture.means[k];
            let sq: f64 = x.iter().zip(m).map(|(xi, mi)| (xi - a * mi).powi(2)).sum();
            logw.push(self.mixture.weights[k].ln() - 0.5 * d * v.ln() - 0.5 * sq / v);
        }
        let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logw.iter().map(|l| (l - top).exp()).sum();
        out.iter_mut().for_each(|o| *o = 0.0);
        for (&k, l) in comps.iter().zip(&logw) {
            let r = (l - top).exp() / z;
            let v = a * a * self.mixture.sigmas[k].powi(2) + b2;
            let m = self.mixture.means[k];
            for ((o, xi), mi) in out.iter_mut().zip(x).zip(m) {
                *o += r * b * (xi - a * mi) / v;
            }
        }
        Ok(())
    }
}

impl EpsilonModel for AnalyticEpsilon {
    fn predict(
        &self,
        x: &Tensor,
        t: &[f64],
        labels: &[Option<usize>],
        _guidance: Option<&[f64]>,
    ) -> Result<Tensor> {
        if t.len() != x.rows() || labels.len() != x.rows() {
            return Err(IcdError::Dimension {
                op: "analytic_epsilon",
                lhs: x.shape().to_vec(),
                rhs: vec![t.len(), labels.len()],
            });
        }
        let mut out = Tensor::zeros(x.shape());
        for r in 0..x.rows() {
            self.eps_row(x.row(r), t[r], labels[r], out.row_mut(r))?;
        }
        Ok(out)
    }
}

/// Convenience wrapper around [`AnalyticEpsilon::predict`] for one timestep.
pub fn analytic_epsilon(
    mixture: &GaussianMixture,
    schedule: &NoiseSchedule,
    x: &Tensor,
    t: f64,
    label: Option<usize>,
) -> Result<Tensor> {
    let o = AnalyticEpsilon::new(mixture.clone(), schedule.clone())?;
    o.predict(x, &vec![t; x.rows()], &vec![label; x.rows()], None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_schedule;

    #[test]
    fn near_zero_noise_prediction_vanishes() {
        let s = make_schedule(49, 1000).unwrap();
        let g = GaussianMixture::circle(8, 4.0, 0.3).unwrap();
        let x = Tensor::from_rows(&[[4.0, 0.0], [0.0, 4.1]]).unwrap();
        let e = analytic_epsilon(&g, &s, &x, 0.0, None).unwrap();
        // b = 0.01 scales every term; data term dominates.
        assert!(e.data().iter().all(|v| v.abs() < 0.05), "{e:?}");
    }

    #[test]
    fn symmetric_pair_keeps_axis_points_on_axis() {
        let s = make_schedule(49, 1000).unwrap();
        let g = GaussianMixture::new(
            vec![[2.0, 0.0], [-2.0, 0.0]],
            vec![0.5, 0.5],
            vec![0.5, 0.5],
        )
        .unwrap();
        // Points on the symmetry axis x = 0.
        let x = Tensor::from_rows(&[[0.0, 1.3], [0.0, -0.7]]).unwrap();
        for t in [50.0, 400.0, 900.0] {
            let e = analytic_epsilon(&g, &s, &x, t, None).unwrap();
            assert!(e.row(0)[0].abs() < 1e-12 && e.row(1)[0].abs() < 1e-12);
        }
    }

    #[test]
    fn standard_normal_closed_form() {
        let s = make_schedule(49, 1000).unwrap();
        let g = GaussianMixture::standard_normal();
        let x = Tensor::from_rows(&[[0.7, -1.2]]).unwrap();
        let t = 321.0;
        let e = analytic_epsilon(&g, &s, &x, t, None).unwrap();
        let b = (1.0 - s.alpha_bar(t).unwrap()).sqrt();
        assert!((e.data()[0] - 0.7 * b).abs() < 1e-14);
        assert!((e.data()[1] + 1.2 * b).abs() < 1e-14);
    }
}

//! Synthetic 2-D datasets: isotropic Gaussian mixtures where the class label
//! is the component index.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, IcdError, Result};
use crate::tensor::Tensor;

pub const DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: [f64; DIM],
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub means: Vec<[f64; DIM]>,
    pub sigmas: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(means: Vec<[f64; DIM]>, sigmas: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let g = Self {
            means,
            sigmas,
            weights,
        };
        g.validate()?;
        Ok(g)
    }

    /// `k` equal-weight modes spaced evenly on a circle; mode `i` sits at
    /// angle `2πi/k`.
    pub fn circle(k: usize, radius: f64, sigma: f64) -> Result<Self> {
        if k == 0 {
            return Err(contract("mixture needs at least one mode"));
        }
        let means = (0..k)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / k as f64;
                [radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self::new(means, vec![sigma; k], vec![1.0 / k as f64; k])
    }

    /// Single component `N(0, I)`.
    pub fn standard_normal() -> Self {
        Self {
            means: vec![[0.0; DIM]],
            sigmas: vec![1.0],
            weights: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.means.len();
        if k == 0 || self.sigmas.len() != k || self.weights.len() != k {
            return Err(contract("mixture means, sigmas and weights must align"));
        }
        if self.sigmas.iter().any(|&s| !(s > 0.0)) {
            return Err(contract("mixture sigmas must be positive"));
        }
        let total: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|&w| w < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(contract(format!("mixture weights must sum to 1, got {total}")));
        }
        Ok(())
    }

    pub fn num_components(&self) -> usize {
        self.means.len()
    }

    pub fn sample_one(&self, rng: &mut impl Rng) -> LabeledSample {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut label = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                label = i;
                break;
            }
        }
        self.sample_from(label, rng)
    }

    pub fn sample_from(&self, label: usize, rng: &mut impl Rng) -> LabeledSample {
        let m = self.means[label];
        let s = self.sigmas[label];
        let mut x = [0.0; DIM];
        for (xi, mi) in x.iter_mut().zip(m) {
            let n: f64 = rng.sample(StandardNormal);
            *xi = mi + s * n;
        }
        LabeledSample { x, label }
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Dataset {
        let samples = (0..n).map(|_| self.sample_one(rng)).collect();
        Dataset {
            samples,
            num_classes: self.num_components(),
        }
    }

    /// Index of the closest mean.
    pub fn nearest_mode(&self, x: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, m) in self.means.iter().enumerate() {
            let d: f64 = m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    /// Distance to the closest mean, in units of that mode's σ.
    pub fn mode_distance_sigmas(&self, x: &[f64]) -> f64 {
        let i = self.nearest_mode(x);
        let d: f64 = self.means[i]
            .iter()
            .zip(x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        d.sqrt() / self.sigmas[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>, num_classes: usize) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.label >= num_classes) {
            return Err(IcdError::Range(format!(
                "label {} with {num_classes} classes",
                s.label
            )));
        }
        Ok(Self {
            samples,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// All points as an `[n, 2]` matrix.
    pub fn points(&self) -> Tensor {
        self.points_of(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn points_of(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * DIM);
        for &i in idx {
            data.extend_from_slice(&self.samples[i].x);
        }
        Tensor::new(vec![idx.len(), DIM], data).expect("rows of width DIM")
    }

    /// Uniformly drawn minibatch (with replacement).
    pub fn minibatch(&self, batch: usize, rng: &mut impl Rng) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..self.len())).collect();
        let labels = idx.iter().map(|&i| self.samples[i].label).collect();
        (self.points_of(&idx), labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn circle_modes_sit_on_the_radius() {
        let g = GaussianMixture::circle(8, 4.0, 0.3).unwrap();
        for m in &g.means {
            assert!(((m[0] * m[0] + m[1] * m[1]).sqrt() - 4.0).abs() < 1e-12);
        }
        assert_eq!(g.nearest_mode(&[4.0, 0.1]), 0);
        assert_eq!(g.nearest_mode(&[0.0, 3.9]), 2);
    }

    #[test]
    fn labels_follow_components() {
        let g = GaussianMixture::circle(8, 4.0, 0.3).unwrap();
        let d = g.sample(2000, &mut stream(1, "data"));
        let hits = d
            .samples
            .iter()
            .filter(|s| g.nearest_mode(&s.x) == s.label)
            .count();
        assert!(hits as f64 / 2000.0 > 0.99);
    }

    #[test]
    fn rejects_bad_mixtures() {
        assert!(GaussianMixture::new(vec![[0.0, 0.0]], vec![0.0], vec![1.0]).is_err());
        assert!(GaussianMixture::new(vec![[0.0, 0.0]], vec![1.0], vec![0.5]).is_err());
        assert!(Dataset::new(vec![LabeledSample { x: [0.0; 2], label: 3 }], 2).is_err());
    }
}

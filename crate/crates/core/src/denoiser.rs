//! The ε-prediction network.
//!
//! An MLP over `concat(x, time-embedding, class-embedding[, guidance-embedding])`.
//! Class row `num_classes` of the class table is the learned null condition ∅.
//! The guidance table, when present, holds one learned row per supported
//! guidance scale.

use std::cell::Cell;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Var};
use crate::data::DIM;
use crate::error::{contract, IcdError, Result};
use crate::tensor::Tensor;

/// Anything that predicts the noise component of `x_t`.
///
/// `labels[i] == None` selects the unconditional prediction. `guidance`
/// is only meaningful for models that embed the guidance scale.
pub trait EpsilonModel {
    fn predict(
        &self,
        x: &Tensor,
        t: &[f64],
        labels: &[Option<usize>],
        guidance: Option<&[f64]>,
    ) -> Result<Tensor>;

    /// True when one evaluation already returns the guided prediction.
    fn embeds_guidance(&self) -> bool {
        false
    }
}

impl<M: EpsilonModel + ?Sized> EpsilonModel for &M {
    fn predict(
        &self,
        x: &Tensor,
        t: &[f64],
        labels: &[Option<usize>],
        guidance: Option<&[f64]>,
    ) -> Result<Tensor> {
        (**self).predict(x, t, labels, guidance)
    }

    fn embeds_guidance(&self) -> bool {
        (**self).embeds_guidance()
    }
}

/// Wraps a model and counts `predict` calls.
#[derive(Debug)]
pub struct Counted<M> {
    pub inner: M,
    calls: Cell<usize>,
}

impl<M> Counted<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }

    pub fn reset(&self) {
        self.calls.set(0);
    }
}

impl<M: EpsilonModel> EpsilonModel for Counted<M> {
    fn predict(
        &self,
        x: &Tensor,
        t: &[f64],
        labels: &[Option<usize>],
        guidance: Option<&[f64]>,
    ) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict(x, t, labels, guidance)
    }

    fn embeds_guidance(&self) -> bool {
        self.inner.embeds_guidance()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub num_classes: usize,
    pub time_dim: usize,
    pub class_dim: usize,
    pub guidance_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub activation: Activation,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            time_dim: 32,
            class_dim: 16,
            guidance_dim: 8,
            hidden: 128,
            depth: 3,
            activation: Activation::Tanh,
        }
    }
}

impl DenoiserConfig {
    fn input_dim(&self, with_guidance: bool) -> usize {
        DIM + self.time_dim + self.class_dim + if with_guidance { self.guidance_dim } else { 0 }
    }
}

/// Highest angular frequency of the time features, in units of `t / T_max`.
const MAX_TIME_FREQ: f64 = 100.0;

/// Sinusoidal features of the normalized timestep `t / t_max`.
pub fn time_embedding(t: &[f64], t_max: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Tensor::zeros(&[t.len(), dim]);
    for (r, &tr) in t.iter().enumerate() {
        let u = tr / t_max as f64;
        let row = out.row_mut(r);
        for i in 0..half {
            let w = if half > 1 {
                (MAX_TIME_FREQ.ln() * i as f64 / (half - 1) as f64).exp()
            } else {
                1.0
            };
            row[2 * i] = (w * u).sin();
            row[2 * i + 1] = (w * u).cos();
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    t_max: usize,
    guidance_scales: Vec<f64>,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Denoiser {
    /// Fresh network; the output layer starts at zero so the initial
    /// prediction is identically zero.
    pub fn new(config: DenoiserConfig, t_max: usize, rng: &mut impl Rng) -> Result<Self> {
        if config.depth == 0 || config.hidden == 0 || config.num_classes == 0 {
            return Err(contract("denoiser needs depth, width and classes > 0"));
        }
        if config.time_dim % 2 != 0 {
            return Err(contract("time embedding width must be even"));
        }
        let mut names = vec!["class_emb".to_string()];
        let mut params = vec![normal(rng, &[config.num_classes + 1, config.class_dim], 1.0)];
        let mut fan_in = config.input_dim(false);
        for l in 0..config.depth {
            names.push(format!("layer{l}.weight"));
            params.push(normal(
                rng,
                &[fan_in, config.hidden],
                (1.0 / fan_in as f64).sqrt(),
            ));
            names.push(format!("layer{l}.bias"));
            params.push(Tensor::zeros(&[config.hidden]));
            fan_in = config.hidden;
        }
        names.push("out.weight".into());
        params.push(Tensor::zeros(&[config.hidden, DIM]));
        names.push("out.bias".into());
        params.push(Tensor::zeros(&[DIM]));
        Ok(Self {
            config,
            t_max,
            guidance_scales: vec![],
            names,
            params,
        })
    }

    /// Copy of this network with an added guidance embedding over `scales`
    /// and a second output head whose prediction is scaled by `w - 1`.
    ///
    /// The first-layer weights that read the new embedding and the second
    /// head start at zero, so the returned network computes exactly the same
    /// function as `self`.
    pub fn with_guidance_embedding(&self, scales: &[f64], rng: &mut impl Rng) -> Result<Self> {
        if self.embeds_guidance() {
            return Err(contract("network already embeds guidance"));
        }
        if scales.is_empty() || self.config.guidance_dim == 0 {
            return Err(contract("guidance embedding needs scales and a width"));
        }
        let mut out = self.clone();
        out.guidance_scales = scales.to_vec();
        let gdim = self.config.guidance_dim;
        let w0_idx = out.index_of("layer0.weight")?;
        let w0 = &out.params[w0_idx];
        let mut rows: Vec<f64> = w0.data().to_vec();
        rows.extend(std::iter::repeat_n(0.0, gdim * self.config.hidden));
        out.params[w0_idx] = Tensor::new(vec![w0.rows() + gdim, self.config.hidden], rows)?;
        out.names.insert(1, "guidance_emb".into());
        out.params.insert(1, normal(rng, &[scales.len(), gdim], 1.0));
        out.names.push("guidance_out.weight".into());
        out.params.push(Tensor::zeros(&[self.config.hidden, DIM]));
        out.names.push("guidance_out.bias".into());
        out.params.push(Tensor::zeros(&[DIM]));
        Ok(out)
    }

    pub fn from_parts(
        config: DenoiserConfig,
        t_max: usize,
        guidance_scales: Vec<f64>,
        named: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let mut fresh = Self::new(config, t_max, &mut crate::rng::stream(0, "shape-probe"))?;
        if !guidance_scales.is_empty() {
            fresh = fresh.with_guidance_embedding(&guidance_scales, &mut crate::rng::stream(0, "shape-probe"))?;
        }
        if named.len() != fresh.names.len() {
            return Err(IcdError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                fresh.names.len(),
                named.len()
            )));
        }
        for ((name, t), (want, proto)) in named.iter().zip(fresh.names.iter().zip(&fresh.params)) {
            if name != want || t.shape() != proto.shape() {
                return Err(IcdError::Checkpoint(format!(
                    "parameter {name} {:?} does not match {want} {:?}",
                    t.shape(),
                    proto.shape()
                )));
            }
        }
        fresh.params = named.into_iter().map(|(_, t)| t).collect();
        Ok(fresh)
    }

    fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| contract(format!("no parameter named {name}")))
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn guidance_scales(&self) -> &[f64] {
        &self.guidance_scales
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Places the parameters on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect()
    }

    fn guidance_rows(&self, guidance: &[f64]) -> Result<Vec<usize>> {
        guidance
            .iter()
            .map(|&w| {
                self.guidance_scales
                    .iter()
                    .position(|&s| (s - w).abs() < 1e-9)
                    .ok_or_else(|| {
                        IcdError::Range(format!(
                            "guidance scale {w} is not embedded (have {:?})",
                            self.guidance_scales
                        ))
                    })
            })
            .collect()
    }

    /// Records the forward pass on `g` using previously bound parameters.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &[Var],
        x: Var,
        t: &[f64],
        labels: &[Option<usize>],
        guidance: Option<&[f64]>,
    ) -> Result<Var> {
        let rows = g.value(x).rows();
        if t.len() != rows || labels.len() != rows || g.value(x).cols() != DIM {
            return Err(IcdError::Dimension {
                op: "denoiser",
                lhs: g.value(x).shape().to_vec(),
                rhs: vec![t.len(), labels.len()],
            });
        }
        let k = self.config.num_classes;
        let class_idx = labels
            .iter()
            .map(|l| match *l {
                Some(c) if c < k => Ok(c),
                Some(c) => Err(IcdError::Range(format!("class {c} with {k} classes"))),
                None => Ok(k),
            })
            .collect::<Result<Vec<_>>>()?;
        let temb = g.constant(time_embedding(t, self.t_max, self.config.time_dim));
        let cemb = g.gather_rows(params[0], class_idx)?;
        let mut parts = vec![x, temb, cemb];
        let mut next = 1;
        let mut scales = None;
        if self.embeds_guidance() {
            let w = guidance.ok_or_else(|| contract("guidance-embedded network needs w"))?;
            scales = Some(w);
            if w.len() != rows {
                return Err(IcdError::Dimension {
                    op: "denoiser guidance",
                    lhs: vec![rows],
                    rhs: vec![w.len()],
                });
            }
            let gemb = g.gather_rows(params[1], self.guidance_rows(w)?)?;
            parts.push(gemb);
            next = 2;
        }
        let mut h = g.concat_cols(&parts)?;
        for _ in 0..self.config.depth {
            let z = g.matmul(h, params[next])?;
            let z = g.add_bias(z, params[next + 1])?;
            h = g.activation(z, self.config.activation);
            next += 2;
        }
        let out = g.matmul(h, params[next])?;
        let out = g.add_bias(out, params[next + 1])?;
        let Some(w) = scales else {
            return Ok(out);
        };
        let d = g.matmul(h, params[next + 2])?;
        let d = g.add_bias(d, params[next + 3])?;
        let d = g.scale_rows(d, w.iter().map(|w| w - 1.0).collect())?;
        g.add(out, d)
    }
}

impl EpsilonModel for Denoiser {
    fn predict(
        &self,
        x: &Tensor,
        t: &[f64],
        labels: &[Option<usize>],
        guidance: Option<&[f64]>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &p, xv, t, labels, guidance)?;
        Ok(g.value(out).clone())
    }

    fn embeds_guidance(&self) -> bool {
        !self.guidance_scales.is_empty()
    }
}

fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v = std * n;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            num_classes: 3,
            hidden: 16,
            depth: 2,
            ..Default::default()
        }
    }

    fn randomize_output(d: &mut Denoiser, seed: u64) {
        let mut rng = stream(seed, "out");
        let n = d.params.len();
        d.params[n - 2] = normal(&mut rng, d.params[n - 2].shape(), 0.3);
    }

    #[test]
    fn fresh_network_outputs_zero_with_input_shape() {
        let d = Denoiser::new(small(), 1000, &mut stream(1, "init")).unwrap();
        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, -1.0]]).unwrap();
        let e = d.predict(&x, &[10.0, 900.0], &[Some(0), None], None).unwrap();
        assert_eq!(e.shape(), x.shape());
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn null_path_ignores_class_table_rows() {
        let mut d = Denoiser::new(small(), 1000, &mut stream(2, "init")).unwrap();
        randomize_output(&mut d, 3);
        let x = Tensor::from_rows(&[[0.5, -0.5]]).unwrap();
        let before = d.predict(&x, &[300.0], &[None], None).unwrap();
        // Perturb every class row except the null row.
        for r in 0..3 {
            for v in d.params[0].row_mut(r) {
                *v += 5.0;
            }
        }
        let after = d.predict(&x, &[300.0], &[None], None).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn guidance_embedding_preserves_function() {
        let mut d = Denoiser::new(small(), 1000, &mut stream(4, "init")).unwrap();
        randomize_output(&mut d, 5);
        let s = d
            .with_guidance_embedding(&[1.0, 8.0], &mut stream(6, "g"))
            .unwrap();
        let x = Tensor::from_rows(&[[0.1, 0.2], [-3.0, 1.0]]).unwrap();
        let a = d.predict(&x, &[50.0, 700.0], &[Some(1), Some(2)], None).unwrap();
        let b = s
            .predict(&x, &[50.0, 700.0], &[Some(1), Some(2)], Some(&[8.0, 1.0]))
            .unwrap();
        assert_eq!(a, b);
        assert!(s
            .predict(&x, &[50.0, 700.0], &[Some(1), Some(2)], Some(&[3.0, 1.0]))
            .is_err());
    }

    #[test]
    fn out_of_range_label() {
        let d = Denoiser::new(small(), 1000, &mut stream(1, "init")).unwrap();
        let x = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            d.predict(&x, &[1.0], &[Some(3)], None),
            Err(IcdError::Range(_))
        ));
    }

    #[test]
    fn time_embedding_is_bounded_and_smooth() {
        let e = time_embedding(&[0.0, 1.0, 999.0], 1000, 32);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        let d: f64 = e.row(0).iter().zip(e.row(1)).map(|(a, b)| (a - b).abs()).sum();
        assert!(d < 1.0);
    }
}

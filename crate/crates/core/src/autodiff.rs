//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are
//! appended in evaluation order, so the tape is already topologically
//! sorted and [`Graph::backward`] is a single reverse sweep.
//!
//! Broadcasting is deliberately narrow: elementwise binary operations accept
//! either identical shapes or a single-element operand. Bias addition and
//! per-row scaling are separate operations.

use serde::{Deserialize, Serialize};

use crate::error::{contract, IcdError, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Smooth hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Activation {
    #[default]
    Tanh,
    Silu,
}

impl Activation {
    pub fn code(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Silu => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Silu),
            _ => None,
        }
    }
}

/// `tanh` through one `exp`; absolute error stays below `1e-15`.
pub fn fast_tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    let r = (1.0 - e) / (1.0 + e);
    if x < 0.0 {
        -r
    } else {
        r
    }
}

/// Tags accepted by [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Square,
    Sqrt,
    Activation(Activation),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sqrt(Var),
    Act(Var, Activation),
    AddBias(Var, Var),
    ScaleRows(Var, Vec<f64>),
    Concat(Vec<Var>),
    Gather(Var, Vec<usize>),
    Sum(Var),
    RowSums(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, or zeros of the value's shape if none reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            va.zip_map(vb, f)
        } else if vb.is_scalar() {
            let s = vb.data()[0];
            Ok(va.map(|x| f(x, s)))
        } else if va.is_scalar() {
            let s = va.data()[0];
            Ok(vb.map(|x| f(s, x)))
        } else {
            Err(IcdError::Dimension {
                op: name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            })
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.needs(&[a]);
        self.push(out, Op::Square(a), rg)
    }

    /// Elementwise square root; inputs must be positive for a finite gradient.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        let rg = self.needs(&[a]);
        self.push(out, Op::Sqrt(a), rg)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let out = match act {
            Activation::Tanh => self.value(a).map(fast_tanh),
            Activation::Silu => self.value(a).map(|x| x * sigmoid(x)),
        };
        let rg = self.needs(&[a]);
        self.push(out, Op::Act(a, act), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    /// Dispatches on an operation tag; binary tags require `b`.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| contract(format!("{op:?} needs two operands")));
        match op {
            ElementwiseOp::Add => self.add(a, need_b()?),
            ElementwiseOp::Sub => self.sub(a, need_b()?),
            ElementwiseOp::Mul => self.mul(a, need_b()?),
            ElementwiseOp::Scale(k) => Ok(self.scale(a, k)),
            ElementwiseOp::Square => Ok(self.square(a)),
            ElementwiseOp::Sqrt => Ok(self.sqrt(a)),
            ElementwiseOp::Activation(act) => Ok(self.activation(a, act)),
        }
    }

    /// `a[r, :] + bias` for every row `r`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        let c = va.cols();
        if va.shape().len() != 2 || vb.len() != c {
            return Err(IcdError::Dimension {
                op: "add_bias",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let rg = self.needs(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    /// Multiplies row `r` by the constant `k[r]`.
    pub fn scale_rows(&mut self, a: Var, k: Vec<f64>) -> Result<Var> {
        let out = self.value(a).scale_rows(&k)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::ScaleRows(a, k), rg))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| contract("concat of zero tensors"))?;
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let v = self.value(*p);
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(IcdError::Dimension {
                    op: "concat_cols",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = self.needs(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Embedding lookup: row `idx[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Result<Var> {
        let out = self.value(table).select_rows(&idx)?;
        let rg = self.needs(&[table]);
        Ok(self.push(out, Op::Gather(table, idx), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    /// Sums each row of a matrix into an `[rows, 1]` column.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(IcdError::Dimension {
                op: "row_sums",
                lhs: va.shape().to_vec(),
                rhs: vec![],
            });
        }
        let data = (0..va.rows()).map(|r| va.row(r).iter().sum()).collect();
        let out = Tensor::new(vec![va.rows(), 1], data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::RowSums(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        let rg = self.needs(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => node.grad = Some(g),
        }
    }

    /// Gradient reaching a broadcast operand: summed when it was a scalar.
    fn reduce_to(&self, v: Var, g: Tensor) -> Tensor {
        let target = self.value(v);
        if target.shape() == g.shape() {
            g
        } else {
            Tensor::full(target.shape(), g.sum())
        }
    }

    fn broadcast_value(&self, v: Var, like: &Tensor) -> Tensor {
        let val = self.value(v);
        if val.shape() == like.shape() {
            val.clone()
        } else {
            Tensor::full(like.shape(), val.data()[0])
        }
    }

    /// Reverse sweep from a scalar `loss`. Previous gradients are discarded,
    /// so repeated calls give identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(contract(format!(
                "backward needs a scalar loss, found shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.zero_grad();
        self.nodes[loss.0].grad = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_gradients(i, &g)?;
            self.nodes[i].grad = Some(g);
            for (v, gv) in contributions {
                self.accumulate(v, gv);
            }
        }
        Ok(())
    }

    fn local_gradients(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let mut v = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    v.push((*a, gemm(g, false, self.value(*b), true)?));
                }
                if self.nodes[b.0].requires_grad {
                    v.push((*b, gemm(self.value(*a), true, g, false)?));
                }
                v
            }
            Op::Add(a, b) => vec![
                (*a, self.reduce_to(*a, g.clone())),
                (*b, self.reduce_to(*b, g.clone())),
            ],
            Op::Sub(a, b) => vec![
                (*a, self.reduce_to(*a, g.clone())),
                (*b, self.reduce_to(*b, g.scale(-1.0))),
            ],
            Op::Mul(a, b) => {
                let va = self.broadcast_value(*a, g);
                let vb = self.broadcast_value(*b, g);
                vec![
                    (*a, self.reduce_to(*a, g.zip_map(&vb, |x, y| x * y)?)),
                    (*b, self.reduce_to(*b, g.zip_map(&va, |x, y| x * y)?)),
                ]
            }
            Op::Scale(a, k) => vec![(*a, g.scale(*k))],
            Op::Square(a) => vec![(*a, g.zip_map(self.value(*a), |gi, x| 2.0 * x * gi)?)],
            Op::Sqrt(a) => vec![(*a, g.zip_map(&node.value, |gi, y| 0.5 * gi / y)?)],
            Op::Act(a, Activation::Tanh) => {
                vec![(*a, g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y))?)]
            }
            Op::Act(a, Activation::Silu) => {
                let d = self.value(*a).map(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                vec![(*a, g.zip_map(&d, |gi, di| gi * di)?)]
            }
            Op::AddBias(a, b) => {
                let c = g.cols();
                let mut gb = vec![0.0; c];
                for r in 0..g.rows() {
                    for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                let gb = Tensor::new(self.value(*b).shape().to_vec(), gb)?;
                vec![(*a, g.clone()), (*b, gb)]
            }
            Op::ScaleRows(a, k) => vec![(*a, g.scale_rows(k)?)],
            Op::Concat(parts) => {
                let mut offset = 0;
                let mut v = Vec::with_capacity(parts.len());
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.nodes[p.0].requires_grad {
                        let mut data = Vec::with_capacity(g.rows() * w);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        v.push((*p, Tensor::new(vec![g.rows(), w], data)?));
                    }
                    offset += w;
                }
                v
            }
            Op::Gather(table, idx) => {
                let mut gt = Tensor::zeros(self.value(*table).shape());
                for (r, &src) in idx.iter().enumerate() {
                    for (acc, v) in gt.row_mut(src).iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                vec![(*table, gt)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(self.value(*a).shape(), g.data()[0]))],
            Op::RowSums(a) => {
                let va = self.value(*a);
                let mut ga = Tensor::zeros(va.shape());
                for r in 0..va.rows() {
                    let gr = g.data()[r];
                    ga.row_mut(r).iter_mut().for_each(|v| *v = gr);
                }
                vec![(*a, ga)]
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                vec![(*a, Tensor::full(self.value(*a).shape(), g.data()[0] / n))]
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_tanh_tracks_std() {
        for i in -4000..=4000 {
            let x = i as f64 * 0.01 + 1e-7;
            let (a, b) = (fast_tanh(x), x.tanh());
            assert!((a - b).abs() < 1e-15, "{x}");
        }
        assert!(fast_tanh(f64::NAN).is_nan());
        assert_eq!(fast_tanh(0.0), 0.0);
        assert_eq!(fast_tanh(1e4), 1.0);
        assert_eq!(fast_tanh(-1e4), -1.0);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
        let m = Tensor::from_rows(&[[2.0, -1.0], [0.5, 3.0]]).unwrap();
        let mv = g.constant(m.clone());
        let out = g.matmul(i, mv).unwrap();
        assert_eq!(g.value(out), &m);
    }

    #[test]
    fn add_zero_scalar_is_identity() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.25]).unwrap());
        let z = g.constant(Tensor::scalar(0.0));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn square_value_and_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.square(x);
        g.backward(y).unwrap();
        assert_eq!(g.value(y).data(), &[9.0]);
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let p = g.param(Tensor::new(vec![4], vec![0.3, 1.0, -2.0, 5.0]).unwrap());
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let p = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = g.square(p);
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[2.0, 4.0]);
        // Backward again: gradients are recomputed, not doubled.
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let p = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(p), Err(IcdError::Contract(_))));
    }

    #[test]
    fn unsupported_broadcast_is_rejected() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, b), Err(IcdError::Dimension { .. })));
        assert!(g.mul(a, b).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let p = g.param(Tensor::scalar(3.0));
        let y = g.mul(c, p).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap().data(), &[2.0]);
    }

    #[test]
    fn gather_scatters_gradient() {
        let mut g = Graph::new();
        let table = g.param(Tensor::zeros(&[3, 2]));
        let rows = g.gather_rows(table, vec![2, 0, 2]).unwrap();
        let l = g.sum(rows);
        g.backward(l).unwrap();
        assert_eq!(
            g.grad(table).unwrap().data(),
            &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]
        );
    }
}

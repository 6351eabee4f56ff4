//! Central finite-difference checks of reverse-mode gradients.
//!
//! Every check reduces the graph output to a scalar through a fixed random
//! weighting, so no gradient entry is structurally trivial.

use crate::autodiff::{Activation, Graph, Var};
use crate::data::DIM;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::Result;
use crate::rng::{normal_tensor, stream};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely.
const FLOOR: f64 = 1e-6;

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

fn weighted_loss(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn loss_value(build: &Build, inputs: &[Tensor], weights: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let l = weighted_loss(&mut g, out, weights)?;
    g.value(l).item()
}

/// Largest relative error between analytic and central-difference gradients
/// of `build` over every entry of every input.
pub fn max_relative_error(build: &Build, inputs: &[Tensor], seed: u64) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let weights = normal_tensor(&mut stream(seed, "fd-weights"), g.value(out).shape());
    let l = weighted_loss(&mut g, out, &weights)?;
    g.backward(l)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..probe[k].len() {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + FD_STEP;
            let up = loss_value(build, &probe, &weights)?;
            probe[k].data_mut()[i] = orig - FD_STEP;
            let down = loss_value(build, &probe, &weights)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Per-operation worst relative errors on random inputs drawn from `seed`.
pub fn check_ops(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = stream(seed, "fd-inputs");
    let a = normal_tensor(&mut rng, &[3, 4]);
    let b = normal_tensor(&mut rng, &[3, 4]);
    let m = normal_tensor(&mut rng, &[4, 2]);
    let bias = normal_tensor(&mut rng, &[4]);
    let table = normal_tensor(&mut rng, &[5, 3]);
    let s = normal_tensor(&mut rng, &[1]);
    let positive = a.map(|v| v * v + 0.5);
    let rows: Vec<f64> = normal_tensor(&mut rng, &[3]).into_data();
    let cases: Vec<(&'static str, Box<Build>, Vec<Tensor>)> = vec![
        ("matmul", Box::new(|g, v| g.matmul(v[0], v[1])), vec![a.clone(), m]),
        ("add", Box::new(|g, v| g.add(v[0], v[1])), vec![a.clone(), b.clone()]),
        ("add_scalar", Box::new(|g, v| g.add(v[0], v[1])), vec![a.clone(), s.clone()]),
        ("sub", Box::new(|g, v| g.sub(v[0], v[1])), vec![a.clone(), b.clone()]),
        ("mul", Box::new(|g, v| g.mul(v[0], v[1])), vec![a.clone(), b.clone()]),
        ("mul_scalar", Box::new(|g, v| g.mul(v[0], v[1])), vec![a.clone(), s]),
        ("scale", Box::new(|g, v| Ok(g.scale(v[0], -1.7))), vec![a.clone()]),
        ("square", Box::new(|g, v| Ok(g.square(v[0]))), vec![a.clone()]),
        ("sqrt", Box::new(|g, v| Ok(g.sqrt(v[0]))), vec![positive]),
        ("tanh", Box::new(|g, v| Ok(g.activation(v[0], Activation::Tanh))), vec![a.clone()]),
        ("silu", Box::new(|g, v| Ok(g.activation(v[0], Activation::Silu))), vec![a.clone()]),
        ("add_bias", Box::new(|g, v| g.add_bias(v[0], v[1])), vec![a.clone(), bias]),
        (
            "scale_rows",
            Box::new(move |g, v| g.scale_rows(v[0], rows.clone())),
            vec![a.clone()],
        ),
        ("concat", Box::new(|g, v| g.concat_cols(&[v[0], v[1]])), vec![a.clone(), b.clone()]),
        ("gather", Box::new(|g, v| g.gather_rows(v[0], vec![4, 0, 4, 2])), vec![table]),
        ("sum", Box::new(|g, v| Ok(g.sum(v[0]))), vec![a.clone()]),
        ("row_sums", Box::new(|g, v| g.row_sums(v[0])), vec![a.clone()]),
        ("mean", Box::new(|g, v| Ok(g.mean(v[0]))), vec![a]),
    ];
    cases
        .into_iter()
        .map(|(name, build, inputs)| Ok((name, max_relative_error(build.as_ref(), &inputs, seed)?)))
        .collect()
}

/// Worst relative error over every parameter of a small three-layer
/// guidance-embedded denoiser, and over its input.
pub fn check_mlp(seed: u64) -> Result<f64> {
    let config = DenoiserConfig {
        num_classes: 3,
        time_dim: 4,
        class_dim: 3,
        guidance_dim: 2,
        hidden: 6,
        depth: 3,
        ..Default::default()
    };
    let mut rng = stream(seed, "fd-mlp");
    let mut den = Denoiser::new(config, 1000, &mut rng)?.with_guidance_embedding(&[1.0, 4.0], &mut rng)?;
    for p in den.params_mut() {
        let noise = normal_tensor(&mut rng, p.shape());
        *p = p.add(&noise.scale(0.3))?;
    }
    let x = normal_tensor(&mut rng, &[4, DIM]);
    let t = [10.0, 400.0, 700.0, 999.0];
    let labels = [Some(0), None, Some(2), Some(1)];
    let w = [1.0, 4.0, 4.0, 1.0];
    let mut inputs = den.params().to_vec();
    inputs.push(x);
    let n = inputs.len();
    let build = |g: &mut Graph, v: &[Var]| den.forward(g, &v[..n - 1], v[n - 1], &t, &labels, Some(&w));
    max_relative_error(&build, &inputs, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_pass_on_one_seed() {
        for (name, err) in check_ops(1).unwrap() {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Detached copy: forward is x², gradient flows as if it were 0·x.
        let build = |g: &mut Graph, v: &[Var]| {
            let c = g.constant(g.value(v[0]).map(|x| x * x));
            let z = g.scale(v[0], 0.0);
            g.add(c, z)
        };
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(max_relative_error(&build, &[x], 0).unwrap() > 0.5);
    }
}

use icd_core::autodiff::Graph;
use icd_core::data::GaussianMixture;
use icd_core::denoiser::EpsilonModel;
use icd_core::gradcheck::{check_mlp, check_ops};
use icd_core::optim::{adam_step, AdamConfig, AdamState};
use icd_core::oracle::AnalyticEpsilon;
use icd_core::rng::{normal_tensor, stream};
use icd_core::schedule::make_schedule;
use icd_core::solver::{ddim_solve, GuidanceSchedule, OdeDirection};
use icd_core::stats::energy_distance;
use icd_core::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

#[test]
fn gradients_match_finite_differences_on_ten_seeds() {
    for seed in 0..10 {
        for (name, err) in check_ops(seed).unwrap() {
            assert!(err < 1e-4, "seed {seed} {name}: {err}");
        }
        let err = check_mlp(seed).unwrap();
        assert!(err < 1e-4, "seed {seed} mlp: {err}");
    }
}

#[test]
fn adam_fits_linear_regression() {
    let mut rng = stream(4, "lr");
    let x = normal_tensor(&mut rng, &[64, 3]);
    let w_true = Tensor::from_rows(&[[1.5], [-2.0], [0.5]]).unwrap();
    let y = x.matmul(&w_true).unwrap();
    let mut params = vec![Tensor::zeros(&[3, 1])];
    let mut state = AdamState::new(&params);
    let cfg = AdamConfig {
        lr: 0.1,
        ..Default::default()
    };
    let mut loss = f64::INFINITY;
    for _ in 0..200 {
        let mut g = Graph::new();
        let w = g.param(params[0].clone());
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let pred = g.matmul(xv, w).unwrap();
        let r = g.sub(pred, yv).unwrap();
        let sq = g.square(r);
        let l = g.mean(sq);
        loss = g.value(l).item().unwrap();
        g.backward(l).unwrap();
        let grads = vec![g.grad_or_zeros(w)];
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
    }
    assert!(loss < 1e-3, "{loss}");
}

/// Self-normalized importance estimate of `E[ε | x_t = x]` from draws of
/// the data distribution.
fn posterior_mc(mix: &GaussianMixture, abar: f64, x: [f64; 2], n: usize, seed: u64) -> [f64; 2] {
    let mut rng = stream(seed, "mc");
    let (sa, sb) = (abar.sqrt(), (1.0 - abar).sqrt());
    let (mut wsum, mut acc) = (0.0, [0.0; 2]);
    let mut logs = Vec::with_capacity(n);
    let mut eps = Vec::with_capacity(n);
    for _ in 0..n {
        let x0 = mix.sample_one(&mut rng).x;
        let e = [(x[0] - sa * x0[0]) / sb, (x[1] - sa * x0[1]) / sb];
        logs.push(-0.5 * (e[0] * e[0] + e[1] * e[1]));
        eps.push(e);
    }
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for (l, e) in logs.iter().zip(&eps) {
        let w = (l - top).exp();
        wsum += w;
        acc[0] += w * e[0];
        acc[1] += w * e[1];
    }
    [acc[0] / wsum, acc[1] / wsum]
}

#[test]
fn analytic_posterior_matches_monte_carlo() {
    let s = make_schedule(49, 1000).unwrap();
    let cases = [
        (GaussianMixture::standard_normal(), 399.0, [0.7, -1.2]),
        (GaussianMixture::circle(8, 4.0, 0.3).unwrap(), 599.0, [1.0, 0.5]),
        (GaussianMixture::circle(8, 4.0, 0.3).unwrap(), 899.0, [-0.3, 0.8]),
    ];
    for (k, (mix, t, x)) in cases.into_iter().enumerate() {
        let o = AnalyticEpsilon::new(mix.clone(), s.clone()).unwrap();
        let xt = Tensor::from_rows(&[x]).unwrap();
        let want = o.predict(&xt, &[t], &[None], None).unwrap();
        let got = posterior_mc(&mix, s.alpha_bar(t).unwrap(), x, 1_000_000, k as u64);
        for d in 0..2 {
            assert!((got[d] - want.data()[d]).abs() < 1e-2, "case {k}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn standard_normal_posterior_closed_form() {
    let s = make_schedule(49, 1000).unwrap();
    let o = AnalyticEpsilon::new(GaussianMixture::standard_normal(), s.clone()).unwrap();
    let x = normal_tensor(&mut stream(2, "x"), &[16, 2]);
    for &t in s.grid() {
        let e = o.predict(&x, &vec![t; 16], &[None; 16], None).unwrap();
        let want = x.scale((1.0 - s.alpha_bar(t).unwrap()).sqrt());
        assert!(e.mse(&want).unwrap() < 1e-24);
    }
}

fn gaussian_roundtrip(n_steps: usize) -> (Tensor, Tensor) {
    let s = make_schedule(n_steps, 1000).unwrap();
    let o = AnalyticEpsilon::new(GaussianMixture::standard_normal(), s.clone()).unwrap();
    let x0 = normal_tensor(&mut stream(7, "x0"), &[512, 2]);
    let labels = vec![None; 512];
    let g = GuidanceSchedule::unguided();
    let z = ddim_solve(&o, &s, &x0, OdeDirection::Forward, s.grid(), &labels, &g)
        .unwrap()
        .into_last();
    let back = ddim_solve(&o, &s, &z, OdeDirection::Reverse, s.grid(), &labels, &g)
        .unwrap()
        .into_last();
    (x0, back)
}

/// With exact ε on `N(0, I)` data every DDIM step, in either direction,
/// multiplies by `cos(θ_s − θ_t)` where `cos² θ = ᾱ`.
fn closed_form_multiplier(n_steps: usize) -> f64 {
    let s = make_schedule(n_steps, 1000).unwrap();
    let th: Vec<f64> = s.grid().iter().map(|&t| s.alpha_bar(t).unwrap().sqrt().acos()).collect();
    th.windows(2).map(|w| (w[1] - w[0]).cos().powi(2)).product()
}

#[test]
fn oracle_roundtrip_matches_closed_form() {
    for n in [49, 99] {
        let (x0, back) = gaussian_roundtrip(n);
        let k = closed_form_multiplier(n);
        let want = x0.scale(k);
        for (a, b) in back.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn oracle_roundtrip_converges_at_first_order() {
    let (x0, coarse) = gaussian_roundtrip(49);
    let (_, fine) = gaussian_roundtrip(99);
    let ratio = coarse.mse(&x0).unwrap() / fine.mse(&x0).unwrap();
    assert!((1.2..=4.0).contains(&ratio), "ratio {ratio}");
    assert!((1.2..=4.0).contains(&ratio.sqrt()), "root ratio {}", ratio.sqrt());
}

#[test]
fn terminal_marginal_is_standard_normal() {
    let s = make_schedule(49, 1000).unwrap();
    let mix = GaussianMixture::circle(8, 4.0, 0.3).unwrap();
    let mut rng = stream(3, "terminal");
    let x0 = mix.sample(4096, &mut rng).points();
    let eps = normal_tensor(&mut rng, &[4096, 2]);
    let xt = s.q_sample_at(&x0, 999.0, &eps).unwrap();
    let mut reference = Tensor::zeros(&[4096, 2]);
    for v in reference.data_mut() {
        *v = rng.sample(StandardNormal);
    }
    let d = energy_distance(&xt, &reference).unwrap();
    assert!(d < 5e-3, "{d}");
    let early = s.q_sample_at(&x0, 199.0, &eps).unwrap();
    assert!(energy_distance(&early, &reference).unwrap() > 0.1);
}

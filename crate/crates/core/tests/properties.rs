use icd_core::boundaries::make_plan;
use icd_core::data::GaussianMixture;
use icd_core::denoiser::{Denoiser, DenoiserConfig, EpsilonModel};
use icd_core::oracle::AnalyticEpsilon;
use icd_core::rng::{normal_tensor, stream};
use icd_core::schedule::make_schedule;
use icd_core::solver::{cfg_epsilon, ddim_step, GuidanceSchedule, OdeDirection};
use icd_core::Tensor;
use proptest::prelude::*;

fn points(seed: u64, n: usize) -> Tensor {
    normal_tensor(&mut stream(seed, "pts"), &[n, 2]).scale(3.0)
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn q_sample_is_linear(seed in 0u64..1000, a in -5.0f64..5.0, t in 0.0f64..999.0) {
        let s = make_schedule(49, 1000).unwrap();
        let x0 = points(seed, 6);
        let eps = points(seed + 1, 6);
        let lhs = s.q_sample_at(&x0.scale(a), t, &eps.scale(a)).unwrap();
        let rhs = s.q_sample_at(&x0, t, &eps).unwrap().scale(a);
        prop_assert!(close(&lhs, &rhs, 1e-13));
    }

    #[test]
    fn cfg_is_affine_in_w(seed in 0u64..1000, w1 in 0.0f64..25.0, w2 in 0.0f64..25.0, lam in 0.0f64..1.0, gi in 0usize..50) {
        let s = make_schedule(49, 1000).unwrap();
        let mix = GaussianMixture::circle(8, 4.0, 0.3).unwrap();
        let o = AnalyticEpsilon::new(mix, s.clone()).unwrap();
        let x = points(seed, 5);
        let t = vec![s.grid()[gi]; 5];
        let labels: Vec<Option<usize>> = (0..5).map(|i| Some(i % 8)).collect();
        let at = |w: f64| cfg_epsilon(&o, &x, &t, &labels, &[w; 5]).unwrap();
        let mixed = at(lam * w1 + (1.0 - lam) * w2);
        let combo = at(w1).scale(lam).add(&at(w2).scale(1.0 - lam)).unwrap();
        prop_assert!(close(&mixed, &combo, 1e-12));
        let u = o.predict(&x, &t, &[None; 5], None).unwrap();
        prop_assert_eq!(at(0.0), u);
    }

    #[test]
    fn ddim_at_equal_times_is_identity(seed in 0u64..1000, gi in 0usize..50, w in 1.0f64..20.0) {
        let s = make_schedule(49, 1000).unwrap();
        let den = Denoiser::new(DenoiserConfig { hidden: 8, depth: 2, ..Default::default() }, 1000, &mut stream(seed, "net")).unwrap();
        let x = points(seed, 4);
        let t = vec![s.grid()[gi]; 4];
        let labels = vec![Some(1), None, Some(3), Some(7)];
        let out = ddim_step(&den, &s, &x, &t, &t, &labels, &[w; 4]).unwrap();
        prop_assert_eq!(out, x);
    }

    #[test]
    fn plans_partition_the_grid(m in 1usize..12, tau in proptest::option::of(0.05f64..0.95)) {
        let s = make_schedule(49, 1000).unwrap();
        let grid = s.grid();
        let Ok(plan) = make_plan(grid, 1000, m, tau) else {
            return Ok(());
        };
        let e = plan.edges();
        prop_assert_eq!(e.len(), m + 1);
        prop_assert_eq!(e[0], grid[0]);
        prop_assert_eq!(e[m], grid[49]);
        prop_assert!(e.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(e.iter().all(|x| grid.contains(x)));
        for &t in grid {
            let r = plan.boundary_for(t, OdeDirection::Reverse).unwrap();
            let f = plan.boundary_for(t, OdeDirection::Forward).unwrap();
            prop_assert!(e.contains(&r) && e.contains(&f));
            prop_assert!(r < t || t == e[0]);
            prop_assert!(f > t || t == e[m]);
            // No edge lies strictly between t and its boundary.
            prop_assert!(e.iter().all(|&b| !(r < b && b < t) && !(t < b && b < f)));
        }
        prop_assert_eq!(plan.jumps(OdeDirection::Reverse).len(), m);
        prop_assert_eq!(plan.jumps(OdeDirection::Forward).len(), m);
    }

    #[test]
    fn step_schedule_is_binary(w_max in 1.0f64..20.0, tau in 0.0f64..1.0, t in 0.0f64..999.0) {
        let g = GuidanceSchedule::step(w_max, tau).unwrap();
        let w = g.weight(t, 1000);
        prop_assert!(w == 1.0 || w == w_max);
    }

    #[test]
    fn forward_pass_is_deterministic(seed in 0u64..1000) {
        let den = Denoiser::new(DenoiserConfig { hidden: 8, depth: 3, ..Default::default() }, 1000, &mut stream(seed, "net")).unwrap();
        let x = points(seed, 3);
        let t = [5.0, 500.0, 990.0];
        let l = [Some(0), None, Some(2)];
        prop_assert_eq!(den.predict(&x, &t, &l, None).unwrap(), den.predict(&x, &t, &l, None).unwrap());
    }

    #[test]
    fn null_path_ignores_labels(seed in 0u64..1000) {
        let mut den = Denoiser::new(DenoiserConfig { hidden: 8, depth: 2, ..Default::default() }, 1000, &mut stream(seed, "net")).unwrap();
        let n = den.params().len();
        den.params_mut()[n - 2] = normal_tensor(&mut stream(seed, "out"), &[8, 2]);
        let x = points(seed, 3);
        let t = [5.0, 500.0, 990.0];
        let a = den.predict(&x, &t, &[None; 3], None).unwrap();
        let b = den.predict(&x, &t, &[Some(1), Some(2), Some(3)], None).unwrap();
        prop_assert_eq!(a.clone(), den.predict(&x, &t, &[None; 3], None).unwrap());
        prop_assert!(a != b);
    }
}

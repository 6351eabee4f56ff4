//! The twelve acceptance criteria, run in order against one shared set of
//! trained artifacts.
//!
//! A criterion's time is its own evaluation time plus any training charged
//! to it. Each training run is charged once: teacher and guidance
//! distillation to criterion 6, the five consistency runs to criterion 9.
//! The budget check uses that total.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use icd_core::boundaries::make_plan;
use icd_core::checkpoint::Checkpoint;
use icd_core::data::{Dataset, GaussianMixture};
use icd_core::denoiser::{Counted, Denoiser, DenoiserConfig, EpsilonModel};
use icd_core::distill::{
    cfg_fidelity, distill_cfg, multistep_consistency_sample, pack_consistency, train_icd, unpack_consistency,
    ConsistencyModel, IcdStudents,
};
use icd_core::editing::{adjacent_pairs, edit, edit_eval, EditRequest};
use icd_core::gradcheck::{check_mlp, check_ops};
use icd_core::inversion::{decode, encode, latent_nll, roundtrip_eval, teacher_encode, teacher_reference, ConfigDescriptor};
use icd_core::oracle::AnalyticEpsilon;
use icd_core::rng::{normal_tensor, stream};
use icd_core::schedule::{make_schedule, NoiseSchedule};
use icd_core::solver::{cfg_epsilon, conditions, ddim_solve, ddim_step, threshold_sweep, GuidanceSchedule, OdeDirection};
use icd_core::stats::spearman;
use icd_core::teacher::train_teacher;
use icd_core::{Result, Tensor};
use serde::Serialize;

use crate::commands::run_args;
use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionResult {
    pub id: usize,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
    pub budget: f64,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "{} {:>2} {}: {} [{:.1} s of {:.0} s]",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds,
            self.budget
        )
    }
}

pub fn write_csv(results: &[CriterionResult], mut out: impl Write) -> Result<()> {
    writeln!(out, "id,name,pass,seconds,budget,detail")?;
    for r in results {
        writeln!(
            out,
            "{},{},{},{:.1},{},\"{}\"",
            r.id,
            r.name,
            r.pass,
            r.seconds,
            r.budget,
            r.detail.replace('"', "'")
        )?;
    }
    Ok(())
}

pub const NAMES: [(&str, f64); 12] = [
    ("autodiff soundness", 60.0),
    ("solver identity and affinity", 60.0),
    ("oracle roundtrip", 60.0),
    ("boundary tables", 10.0),
    ("boundary-condition identity", 60.0),
    ("CFG-distillation fidelity", 300.0),
    ("latent NLL trend", 120.0),
    ("guidance-threshold trend", 180.0),
    ("ablation trends", 900.0),
    ("editing", 120.0),
    ("determinism and persistence", 120.0),
    ("stochastic reference sampler", 60.0),
];

/// The five matched-budget distillation runs: `(name, m, λ_f, λ_r)`.
pub const RUNS: [(&str, usize, bool, bool); 5] = [
    ("m1", 1, false, false),
    ("m2", 2, false, false),
    ("m4", 4, false, false),
    ("m4+Lf", 4, true, false),
    ("m4+Lf+Lr", 4, true, true),
];

/// Trained artifacts shared between criteria, built on first use.
pub struct Lab {
    pub cfg: RunConfig,
    pub mix: GaussianMixture,
    pub train: Dataset,
    pub test: Dataset,
    pub sched: NoiseSchedule,
    teacher: Option<(Denoiser, f64)>,
    student: Option<(Denoiser, f64)>,
    runs: BTreeMap<&'static str, (IcdStudents, f64)>,
}

impl Lab {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            mix: cfg.mixture()?,
            train: cfg.train_set()?,
            test: cfg.test_set()?,
            sched: cfg.noise_schedule()?,
            cfg: cfg.clone(),
            teacher: None,
            student: None,
            runs: BTreeMap::new(),
        })
    }

    /// The teacher and the seconds spent training it.
    pub fn teacher(&mut self) -> Result<(&Denoiser, f64)> {
        if self.teacher.is_none() {
            let t0 = Instant::now();
            let t = train_teacher(&self.train, &self.sched, self.cfg.model, &self.cfg.teacher_config())?;
            self.teacher = Some((t.denoiser, t0.elapsed().as_secs_f64()));
        }
        let (d, s) = self.teacher.as_ref().expect("built");
        Ok((d, *s))
    }

    /// The guidance-distilled student and the seconds spent distilling it.
    pub fn student(&mut self) -> Result<(&Denoiser, f64)> {
        if self.student.is_none() {
            let teacher = self.teacher()?.0.clone();
            let t0 = Instant::now();
            let r = distill_cfg(&teacher, &self.train, &self.sched, self.cfg.w_set(), &self.cfg.cfg_config())?;
            self.student = Some((r.student, t0.elapsed().as_secs_f64()));
        }
        let (d, s) = self.student.as_ref().expect("built");
        Ok((d, *s))
    }

    /// One of [`RUNS`] and its training seconds.
    pub fn run(&mut self, name: &'static str) -> Result<(&IcdStudents, f64)> {
        if !self.runs.contains_key(name) {
            let &(_, m, lf, lr) = RUNS.iter().find(|r| r.0 == name).expect("known run");
            let student = self.student()?.0.clone();
            let mut dc = self.cfg.icd_config();
            if !lf {
                dc.lambda_f = 0.0;
            }
            if !lr {
                dc.lambda_r = 0.0;
            }
            let plan = make_plan(self.sched.grid(), self.sched.t_max(), m, self.cfg.plan_tau)?;
            let t0 = Instant::now();
            let st = train_icd(&student, &self.train, &self.sched, &plan, &dc)?;
            self.runs.insert(name, (st, t0.elapsed().as_secs_f64()));
        }
        let (st, s) = &self.runs[name];
        Ok((st, *s))
    }

    pub fn step_guidance(&self) -> GuidanceSchedule {
        self.cfg.guidance
    }
}

struct Outcome {
    pass: bool,
    detail: String,
    /// Training seconds charged to this criterion.
    charged: f64,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome {
        pass,
        detail,
        charged: 0.0,
    }
}

fn desc(name: &str) -> ConfigDescriptor {
    ConfigDescriptor {
        name: name.into(),
        m: 0,
        tau: None,
        w_max: 1.0,
        losses: String::new(),
    }
}

fn c1() -> Result<Outcome> {
    let mut worst = ("", 0.0f64);
    for seed in 0..10 {
        for (name, e) in check_ops(seed)? {
            if e > worst.1 {
                worst = (name, e);
            }
        }
        let e = check_mlp(seed)?;
        if e > worst.1 {
            worst = ("3-layer mlp", e);
        }
    }
    Ok(outcome(
        worst.1 < 1e-4,
        format!("max relative error {:.2e} ({}) over 10 seeds, tol 1e-4", worst.1, worst.0),
    ))
}

fn random_denoiser(seed: u64) -> Result<Denoiser> {
    let cfg = DenoiserConfig {
        hidden: 16,
        depth: 3,
        ..Default::default()
    };
    let mut den = Denoiser::new(cfg, 1000, &mut stream(seed, "c2-net"))?;
    let mut rng = stream(seed, "c2-params");
    for p in den.params_mut() {
        *p = normal_tensor(&mut rng, p.shape()).scale(0.5);
    }
    Ok(den)
}

fn c2(lab: &Lab) -> Result<Outcome> {
    let den = random_denoiser(lab.cfg.seed)?;
    let x = normal_tensor(&mut stream(lab.cfg.seed, "c2-x"), &[16, 2]).scale(2.0);
    let labels: Vec<Option<usize>> = (0..16).map(|i| if i % 5 == 0 { None } else { Some(i % 8) }).collect();
    let (mut ident_ok, mut worst_affine) = (true, 0.0f64);
    for &t in lab.sched.grid() {
        let tt = vec![t; 16];
        for w in [1.0, 8.0, 20.0] {
            ident_ok &= ddim_step(&den, &lab.sched, &x, &tt, &tt, &labels, &[w; 16])? == x;
        }
        let u = den.predict(&x, &tt, &vec![None; 16], None)?;
        let c = den.predict(&x, &tt, &labels, None)?;
        for w in [0.0, 1.0, 2.5, 8.0, 12.0, 16.0, 20.0] {
            let got = cfg_epsilon(&den, &x, &tt, &labels, &[w; 16])?;
            for i in 0..got.len() {
                let want = u.data()[i] + w * (c.data()[i] - u.data()[i]);
                let err = (got.data()[i] - want).abs() / (1.0 + want.abs());
                worst_affine = worst_affine.max(err);
            }
        }
    }
    Ok(outcome(
        ident_ok && worst_affine < 1e-12,
        format!(
            "ddim_step(s=t) bit-exact identity at all {} grid points: {ident_ok}; max deviation from eps_u + w(eps_c - eps_u) {:.1e}",
            lab.sched.grid().len(),
            worst_affine
        ),
    ))
}

fn gaussian_roundtrip_mse(n_steps: usize, seed: u64) -> Result<f64> {
    let s = make_schedule(n_steps, 1000)?;
    let o = AnalyticEpsilon::new(GaussianMixture::standard_normal(), s.clone())?;
    let x0 = normal_tensor(&mut stream(seed, "c3-x0"), &[1024, 2]);
    let labels = vec![None; 1024];
    let g = GuidanceSchedule::unguided();
    let z = ddim_solve(&o, &s, &x0, OdeDirection::Forward, s.grid(), &labels, &g)?.into_last();
    let back = ddim_solve(&o, &s, &z, OdeDirection::Reverse, s.grid(), &labels, &g)?.into_last();
    back.mse(&x0)
}

fn c3(lab: &Lab) -> Result<Outcome> {
    let n = lab.sched.n_steps();
    let coarse = gaussian_roundtrip_mse(n, lab.cfg.seed)?;
    let fine = gaussian_roundtrip_mse(2 * n + 1, lab.cfg.seed)?;
    let ratio = coarse / fine;
    let pass = coarse < 1e-3 && (1.2..=4.0).contains(&ratio);
    let mut detail = format!(
        "{}-point roundtrip MSE {:.3e} (tol 1e-3); halved step MSE {:.3e}, ratio {:.2} (want [1.2, 4])",
        n + 1,
        coarse,
        fine,
        ratio
    );
    if coarse >= 1e-3 {
        detail.push_str(
            "; exact eps on N(0,I) makes each DDIM step scale x by cos(dtheta), cos^2(theta)=alpha_bar, so first-order DDIM cannot reach 1e-3 at this step count",
        );
    }
    Ok(outcome(pass, detail))
}

fn c4() -> Result<Outcome> {
    let cases: [(usize, f64, &[f64], &[f64]); 3] = [
        (4, 0.8, &[259.0, 519.0, 779.0, 999.0], &[19.0, 259.0, 519.0, 779.0]),
        (4, 0.7, &[259.0, 519.0, 699.0, 999.0], &[19.0, 259.0, 519.0, 699.0]),
        (3, 0.7, &[339.0, 699.0, 999.0], &[19.0, 339.0, 699.0]),
    ];
    let grid = make_schedule(49, 1000)?;
    let mut bad = vec![];
    for (m, tau, rev, fwd) in cases {
        let p = make_plan(grid.grid(), 1000, m, Some(tau))?;
        if p.reverse_timesteps() != rev || p.forward_timesteps() != fwd {
            bad.push(format!("m={m} tau={tau}: {:?}/{:?}", p.reverse_timesteps(), p.forward_timesteps()));
        }
    }
    Ok(outcome(
        bad.is_empty(),
        if bad.is_empty() {
            "3 of 3 reference tables reproduced".into()
        } else {
            bad.join("; ")
        },
    ))
}

fn at_boundary_error(cm: &ConsistencyModel, x: &Tensor, labels: &[Option<usize>]) -> Result<f64> {
    let mut worst = 0.0f64;
    for &s in cm.plan.targets(cm.direction) {
        for w in [1.0, 8.0] {
            let y = cm.at_boundary(x, s, labels, &vec![w; x.rows()])?;
            for (a, b) in y.data().iter().zip(x.data()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}

fn c5(lab: &mut Lab) -> Result<Outcome> {
    let x = normal_tensor(&mut stream(lab.cfg.seed, "c5-x"), &[64, 2]).scale(2.0);
    let labels = conditions(&(0..64).map(|i| i % lab.mix.num_components()).collect::<Vec<_>>());
    let mut worst = 0.0f64;
    let mut n = 0;
    for (name, ..) in RUNS {
        let (st, _) = lab.run(name)?;
        worst = worst.max(at_boundary_error(&st.cd, &x, &labels)?);
        worst = worst.max(at_boundary_error(&st.fcd, &x, &labels)?);
        n += 2;
    }
    Ok(outcome(
        worst == 0.0,
        format!("{n} students, every boundary, w in {{1, 8}}: max |f(x,s,s) - x| = {worst:.1e}"),
    ))
}

fn c6(lab: &mut Lab) -> Result<Outcome> {
    let (_, t_secs) = lab.teacher()?;
    let (_, s_secs) = lab.student()?;
    let teacher = lab.teacher()?.0.clone();
    let student = lab.student()?.0.clone();
    let mut worst = (0.0, 0.0f64);
    let mut parts = vec![];
    for &w in lab.cfg.w_set() {
        let e = cfg_fidelity(&student, &teacher, &lab.test, &lab.sched, w, 4096, lab.cfg.seed)?;
        parts.push(format!("w={w}: {e:.4}"));
        if e > worst.1 {
            worst = (w, e);
        }
    }
    let cs = Counted::new(&student);
    let ct = Counted::new(&teacher);
    let x = normal_tensor(&mut stream(lab.cfg.seed, "c6-x"), &[8, 2]);
    let labels = conditions(&[0, 1, 2, 3, 4, 5, 6, 7]);
    cfg_epsilon(&cs, &x, &[500.0; 8], &labels, &[8.0; 8])?;
    cfg_epsilon(&ct, &x, &[500.0; 8], &labels, &[8.0; 8])?;
    let one_call = cs.calls() == 1 && ct.calls() == 2;
    Ok(Outcome {
        pass: worst.1 < 0.05 && one_call,
        detail: format!(
            "MSE vs two-call CFG {} (tol 0.05); student calls per query {}, teacher {}",
            parts.join(", "),
            cs.calls(),
            ct.calls()
        ),
        charged: t_secs + s_secs,
    })
}

fn c7(lab: &mut Lab) -> Result<Outcome> {
    let (teacher, _) = lab.teacher()?;
    let teacher = teacher.clone();
    let ds = lab.mix.sample(4096, &mut stream(lab.cfg.seed, "c7-data"));
    let x0 = ds.points();
    let labels = conditions(&ds.labels());
    let w = lab.cfg.guidance.w_max;
    let mut nll = vec![];
    for g in [
        GuidanceSchedule::unguided(),
        lab.step_guidance(),
        GuidanceSchedule::constant(w),
    ] {
        let z = teacher_encode(&teacher, &lab.sched, &x0, &labels, &g)?.into_last();
        nll.push(latent_nll(&z)?);
    }
    Ok(outcome(
        nll[0] < nll[1] && nll[1] < nll[2],
        format!(
            "NLL w=1 {:.4} < step {:.4} < constant w={w} {:.4} on 4096 samples",
            nll[0], nll[1], nll[2]
        ),
    ))
}

fn c8(lab: &mut Lab) -> Result<Outcome> {
    let teacher = lab.teacher()?.0.clone();
    let thresholds = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
    let rows = threshold_sweep(&teacher, &lab.sched, &lab.test, &thresholds, 8.0)?;
    let mse: Vec<f64> = rows.iter().map(|r| r.mse).collect();
    let rho = spearman(&thresholds, &mse)?;
    Ok(outcome(
        rho > 0.8,
        format!(
            "Spearman rho {rho:.3} (want > 0.8); MSE by threshold {}",
            mse.iter().map(|m| format!("{m:.3e}")).collect::<Vec<_>>().join(" ")
        ),
    ))
}

fn roundtrip(lab: &mut Lab, run: &'static str, g: &GuidanceSchedule) -> Result<f64> {
    let test = lab.test.clone();
    let (st, _) = lab.run(run)?;
    Ok(roundtrip_eval(&st.fcd, &st.cd, &test, g, desc(run))?.mse)
}

fn c9(lab: &mut Lab) -> Result<Outcome> {
    let unguided = GuidanceSchedule::unguided();
    let dynamic = lab.step_guidance();
    let constant = GuidanceSchedule::constant(lab.cfg.guidance.w_max);
    let m: Vec<f64> = ["m1", "m2", "m4"]
        .into_iter()
        .map(|r| roundtrip(lab, r, &unguided))
        .collect::<Result<_>>()?;
    let h = roundtrip(lab, "m4", &constant)?;
    let i = roundtrip(lab, "m4", &dynamic)?;
    let j = roundtrip(lab, "m4+Lf", &dynamic)?;
    let k = roundtrip(lab, "m4+Lf+Lr", &dynamic)?;
    let g = roundtrip(lab, "m4+Lf+Lr", &unguided)?;
    let teacher = lab.teacher()?.0.clone();
    let reference = teacher_reference(&teacher, &lab.sched, &lab.test, &unguided, desc("ref"))?.mse;
    let a = m[1] <= 1.1 * m[0] && m[2] <= 1.1 * m[1];
    let checks = [a, i < h, j < i, k < j, g <= 2.0 * reference];
    let cfg_secs = lab.student()?.1;
    let mut charged = 0.0;
    for (name, ..) in RUNS {
        charged += lab.run(name)?.1;
    }
    let marks: Vec<String> = ["a", "b", "c", "d", "e"]
        .iter()
        .zip(checks)
        .map(|(n, ok)| format!("{n}:{}", if ok { "ok" } else { "no" }))
        .collect();
    Ok(Outcome {
        pass: checks.iter().all(|&c| c),
        detail: format!(
            "{}; unguided m=1/2/4 {:.3e}/{:.3e}/{:.3e}; guided constant {:.3e}, dynamic {:.3e}, +Lf {:.3e}, +Lf+Lr {:.3e}; full unguided {:.3e} vs teacher {:.3e} (ratio {:.2}); guidance distillation {cfg_secs:.0} s charged to criterion 6",
            marks.join(" "),
            m[0],
            m[1],
            m[2],
            h,
            i,
            j,
            k,
            g,
            reference,
            g / reference
        ),
        charged,
    })
}

fn c10(lab: &mut Lab) -> Result<Outcome> {
    let gsched = lab.step_guidance();
    let mix = lab.mix.clone();
    let test = lab.test.clone();
    let seed = lab.cfg.seed;
    let (st, _) = lab.run("m4+Lf+Lr")?;
    let pairs = adjacent_pairs(mix.num_components());
    let r = edit_eval(&st.fcd, &st.cd, &mix, &test, &pairs, &gsched, seed)?;
    let labels = test.labels();
    let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let x0 = test.points_of(&idx);
    let req = EditRequest {
        x0: x0.clone(),
        source_class: 0,
        target_class: 0,
        gsched,
    };
    let same = edit(&st.fcd, &st.cd, &req)?;
    let l = vec![Some(0); idx.len()];
    let rt = decode(&st.cd, &encode(&st.fcd, &x0, &l)?.into_last(), &l, &gsched)?.into_last();
    let identity = same == rt;
    let teacher = lab.teacher()?.0.clone();
    let ideal = teacher_edit_displacement(&teacher, &lab.sched, &test, &pairs, &gsched)?;
    Ok(outcome(
        r.edit_success >= 0.9 && r.preservation < r.baseline && identity,
        format!(
            "adjacent swaps: success {:.3} (want >= 0.9), displacement {:.3} vs resampling {:.3}, angular r {}; identity edit bit-equal to roundtrip: {identity}; 50-step DDIM teacher edit displacement {ideal:.3}",
            r.edit_success,
            r.preservation,
            r.baseline,
            r.angular_r.map_or("n/a".into(), |v| format!("{v:.3}"))
        ),
    ))
}

/// Mean displacement of the same class swaps done with the two-call
/// teacher: unguided full-grid DDIM encoding, guided decoding.
fn teacher_edit_displacement(
    teacher: &Denoiser,
    sched: &NoiseSchedule,
    test: &Dataset,
    pairs: &[(usize, usize)],
    gsched: &GuidanceSchedule,
) -> Result<f64> {
    let labels = test.labels();
    let (mut total, mut n) = (0.0, 0usize);
    for &(a, b) in pairs {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == a).collect();
        let x0 = test.points_of(&idx);
        let z = teacher_encode(teacher, sched, &x0, &vec![Some(a); idx.len()], &GuidanceSchedule::unguided())?.into_last();
        let y = ddim_solve(teacher, sched, &z, OdeDirection::Reverse, sched.grid(), &vec![Some(b); idx.len()], gsched)?
            .into_last();
        for i in 0..y.rows() {
            let (p, q) = (x0.row(i), y.row(i));
            total += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        }
        n += idx.len();
    }
    Ok(total / n.max(1) as f64)
}

/// Small settings that keep a full CLI pass in seconds.
pub fn tiny_overrides() -> Vec<String> {
    [
        "data.train_samples=512",
        "data.test_samples=128",
        "model.hidden=24",
        "model.depth=2",
        "teacher.steps=150",
        "teacher.batch=64",
        "cfg.steps=60",
        "cfg.batch=64",
        "icd.steps=20",
        "icd.batch=32",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn cli_pass(dir: &std::path::Path, seed: u64) -> Result<()> {
    let mut base: Vec<String> = vec!["icd".into(), "--out-dir".into(), dir.display().to_string()];
    base.extend(["--seed".into(), seed.to_string()]);
    for o in tiny_overrides() {
        base.extend(["--set".into(), o]);
    }
    let verb = |v: &[&str]| -> Result<()> {
        let mut a = base.clone();
        a.extend(v.iter().map(|s| s.to_string()));
        run_args(a).map(|_| ())
    };
    let p = |n: &str| dir.join(n).display().to_string();
    verb(&["train-teacher"])?;
    verb(&["distill-cfg"])?;
    verb(&["distill-icd"])?;
    verb(&["invert"])?;
    verb(&["edit"])?;
    verb(&["sweep"])?;
    verb(&["eval", "--only", "4"])?;
    for (kind, input, out) in [
        ("scatter", "dataset.csv", "dataset.svg"),
        ("loss-curve", "icd_loss.csv", "icd_loss.svg"),
        ("trajectory", "trajectory.csv", "trajectory.svg"),
        ("frontier", "frontier.csv", "frontier.svg"),
    ] {
        verb(&["plot", "--kind", kind, "--input", &p(input), "--output", &p(out)])?;
    }
    Ok(())
}

fn listing(dir: &std::path::Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = vec![];
    for e in std::fs::read_dir(dir)? {
        let path = e?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if name == "acceptance.csv" {
            // Carries wall-clock seconds.
            continue;
        }
        out.push((name, std::fs::read(&path)?));
    }
    out.sort();
    Ok(out)
}

fn checkpoint_bits_equal(a: &Checkpoint, b: &Checkpoint) -> bool {
    a.schedule == b.schedule
        && a.blocks.len() == b.blocks.len()
        && a.blocks.iter().zip(&b.blocks).all(|((na, ta), (nb, tb))| {
            na == nb
                && ta.shape() == tb.shape()
                && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

fn c11(lab: &mut Lab) -> Result<Outcome> {
    let (a, b) = (tempfile::tempdir()?, tempfile::tempdir()?);
    cli_pass(a.path(), lab.cfg.seed)?;
    cli_pass(b.path(), lab.cfg.seed)?;
    let (la, lb) = (listing(a.path())?, listing(b.path())?);
    let csvs = la.iter().filter(|(n, _)| n.ends_with(".csv")).count();
    let differing: Vec<&str> = la
        .iter()
        .zip(&lb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let same_files = la.len() == lb.len() && differing.is_empty();
    let params = lab.sched.params();
    let (st, _) = lab.run("m4+Lf+Lr")?;
    let mut ck = Checkpoint::new(params);
    pack_consistency(&mut ck, "cd", &st.cd);
    pack_consistency(&mut ck, "fcd", &st.fcd);
    let bytes = ck.to_bytes();
    let back = Checkpoint::read_from(bytes.as_slice())?;
    let cd = unpack_consistency(&back, "cd")?;
    let fcd = unpack_consistency(&back, "fcd")?;
    let ck_ok = checkpoint_bits_equal(&ck, &back)
        && back.to_bytes() == bytes
        && cd.den.params() == st.cd.den.params()
        && fcd.den.params() == st.fcd.den.params()
        && cd.plan == st.cd.plan;
    Ok(outcome(
        same_files && ck_ok,
        format!(
            "two CLI passes over all verbs: {} files ({csvs} CSV) byte-identical: {same_files}{}; checkpoint save/load bit-exact: {ck_ok}",
            la.len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!(" (differ: {})", differing.join(" "))
            }
        ),
    ))
}

fn c12(lab: &mut Lab) -> Result<Outcome> {
    let k = lab.mix.num_components();
    let n = 256;
    let z = normal_tensor(&mut stream(lab.cfg.seed, "c12-z"), &[n, 2]);
    let labels = conditions(&(0..n).map(|i| i % k).collect::<Vec<_>>());
    let (single, _) = lab.run("m1")?;
    let single = single.cd.clone();
    let mut runs = vec![];
    for r in 0..3 {
        let mut rng = stream(lab.cfg.seed, &format!("c12-run{r}"));
        runs.push(multistep_consistency_sample(&single, &z, 4, &labels, 1.0, &mut rng)?);
    }
    let mut spread = 0.0;
    for a in 0..runs.len() {
        for b in a + 1..runs.len() {
            spread += runs[a].mse(&runs[b])?;
        }
    }
    spread /= 3.0;
    let mut rng = stream(lab.cfg.seed, "c12-k1");
    let k1a = multistep_consistency_sample(&single, &z, 1, &labels, 1.0, &mut rng)?;
    let k1b = multistep_consistency_sample(&single, &z, 1, &labels, 1.0, &mut rng)?;
    let g = lab.step_guidance();
    let (full, _) = lab.run("m4+Lf+Lr")?;
    let d1 = decode(&full.cd, &z, &labels, &g)?.into_last();
    let d2 = decode(&full.cd, &z, &labels, &g)?.into_last();
    let deterministic = d1 == d2;
    Ok(outcome(
        spread > 1e-6 && deterministic,
        format!(
            "k=4 multistep run-to-run mean squared difference {spread:.3e} (k=1: {:.1e}); multi-boundary decode identical across runs: {deterministic}",
            k1a.mse(&k1b)?
        ),
    ))
}

/// Runs the selected criteria (all when `only` is empty) in order.
pub fn run(cfg: &RunConfig, only: &[usize]) -> Vec<CriterionResult> {
    let mut lab = match Lab::new(cfg) {
        Ok(l) => l,
        Err(e) => {
            return (1..=12)
                .map(|id| CriterionResult {
                    id,
                    name: NAMES[id - 1].0,
                    pass: false,
                    detail: format!("setup failed: {e}"),
                    seconds: 0.0,
                    budget: NAMES[id - 1].1,
                })
                .collect()
        }
    };
    let mut out = vec![];
    for id in 1..=12 {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        run_one(&mut lab, id, |r| out.push(r));
    }
    out
}

/// Runs criterion `id` and hands the result to `sink`.
pub fn run_one(lab: &mut Lab, id: usize, mut sink: impl FnMut(CriterionResult)) {
    let (name, budget) = NAMES[id - 1];
    let before = trained_seconds(lab);
    let t0 = Instant::now();
    let r = match id {
        1 => c1(),
        2 => c2(lab),
        3 => c3(lab),
        4 => c4(),
        5 => c5(lab),
        6 => c6(lab),
        7 => c7(lab),
        8 => c8(lab),
        9 => c9(lab),
        10 => c10(lab),
        11 => c11(lab),
        12 => c12(lab),
        _ => unreachable!("criteria are numbered 1..=12"),
    };
    let trained_here = trained_seconds(lab) - before;
    let eval = t0.elapsed().as_secs_f64() - trained_here;
    let result = match r {
        Ok(o) => {
            let seconds = eval + o.charged;
            CriterionResult {
                id,
                name,
                pass: o.pass && seconds < budget,
                detail: o.detail,
                seconds,
                budget,
            }
        }
        Err(e) => CriterionResult {
            id,
            name,
            pass: false,
            detail: format!("error: kind={} {e}", e.kind()),
            seconds: eval,
            budget,
        },
    };
    sink(result);
}

fn trained_seconds(lab: &Lab) -> f64 {
    lab.teacher.as_ref().map_or(0.0, |t| t.1)
        + lab.student.as_ref().map_or(0.0, |s| s.1)
        + lab.runs.values().map(|r| r.1).sum::<f64>()
}

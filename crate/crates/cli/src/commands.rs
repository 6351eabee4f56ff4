//! Verb implementations behind `icd <verb>`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use icd_core::editing::{adjacent_pairs, edit, edit_eval, tau_frontier, write_frontier_csv, EditRequest};
use icd_core::inversion::{
    decode, encode, roundtrip_eval, summary_json, teacher_reference, write_reports_csv, write_trajectory_csv,
    ConfigDescriptor,
};
use icd_core::solver::{conditions, threshold_sweep, write_sweep_csv, GuidanceSchedule};
use icd_core::{IcdError, Result};

use crate::acceptance;
use crate::config::RunConfig;
use crate::pipeline::{self, out_path, write_file, CFG_STUDENT, ICD, TEACHER};
use crate::plot::{self, PlotKind, PlotSpec};

#[derive(Debug, Parser)]
#[command(name = "icd", about = "Invertible consistency distillation on a 2-D toy diffusion model")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set plan.m=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Train the conditional teacher; writes teacher.ckpt, teacher_loss.csv, dataset.csv.
    TrainTeacher,
    /// Distill explicit guidance into a single-call student; writes cfg.ckpt, cfg_loss.csv.
    DistillCfg {
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Train CD and fCD jointly; writes icd.ckpt and icd_loss.csv.
    DistillIcd {
        /// Guidance-distilled teacher checkpoint.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Zero both preservation weights.
        #[arg(long)]
        no_preservation: bool,
    },
    /// Roundtrip reports, a JSON summary and a decode trajectory.
    Invert(Students),
    /// Condition-swap editing.
    Edit {
        #[command(flatten)]
        students: Students,
        #[arg(long)]
        source: Option<usize>,
        #[arg(long)]
        target: Option<usize>,
    },
    /// Run the acceptance criteria and write acceptance.csv.
    Eval {
        /// Comma-separated criterion numbers; all when absent.
        #[arg(long, value_delimiter = ',')]
        only: Vec<usize>,
    },
    /// Teacher guidance-threshold sweep and the editing tau frontier.
    Sweep {
        #[command(flatten)]
        students: Students,
        #[arg(long, default_value_t = 0.0)]
        from: f64,
        #[arg(long, default_value_t = 1.0)]
        to: f64,
        #[arg(long, default_value_t = 0.1)]
        step: f64,
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.6,0.7,0.8")]
        taus: Vec<f64>,
    },
    /// Render a CSV as SVG.
    Plot {
        /// scatter, trajectory, frontier or loss-curve.
        #[arg(long)]
        kind: PlotKind,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "")]
        title: String,
    },
    /// Print the effective configuration.
    Config,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Students {
    /// Checkpoint holding the forward student (default: <out_dir>/icd.ckpt).
    #[arg(long)]
    pub fcd: Option<PathBuf>,
    /// Checkpoint holding the reverse student (default: <out_dir>/icd.ckpt).
    #[arg(long)]
    pub cd: Option<PathBuf>,
    /// Original teacher checkpoint (default: <out_dir>/teacher.ckpt).
    #[arg(long)]
    pub teacher: Option<PathBuf>,
}

pub fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&common.set)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.out_dir {
        cfg.out_dir = d.clone();
    }
    cfg.sync();
    cfg.validate()?;
    Ok(cfg)
}

fn or_default(p: &Option<PathBuf>, cfg: &RunConfig, name: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| out_path(cfg, name))
}

/// Runs one parsed invocation and returns the lines to print.
pub fn run(cli: &Cli) -> Result<Vec<String>> {
    let cfg = resolve(&cli.common)?;
    pipeline::ensure_dir(&cfg.out_dir)?;
    match &cli.verb {
        Verb::TrainTeacher => {
            pipeline::teacher_stage(&cfg)?;
            Ok(vec![format!("wrote {}", out_path(&cfg, TEACHER).display())])
        }
        Verb::DistillCfg { teacher } => {
            let t = pipeline::load_denoiser(&or_default(teacher, &cfg, TEACHER), "teacher")?;
            pipeline::cfg_stage(&cfg, &t)?;
            Ok(vec![format!("wrote {}", out_path(&cfg, CFG_STUDENT).display())])
        }
        Verb::DistillIcd {
            teacher,
            no_preservation,
        } => {
            let mut cfg = cfg.clone();
            if *no_preservation {
                cfg.icd.lambda_f = 0.0;
                cfg.icd.lambda_r = 0.0;
            }
            let s = pipeline::load_denoiser(&or_default(teacher, &cfg, CFG_STUDENT), "cfg")?;
            pipeline::icd_stage(&cfg, &s)?;
            Ok(vec![format!(
                "wrote {} (plan {:?}, lambda_f {}, lambda_r {})",
                out_path(&cfg, ICD).display(),
                cfg.plan()?.edges(),
                cfg.icd.lambda_f,
                cfg.icd.lambda_r
            )])
        }
        Verb::Invert(st) => invert(&cfg, st),
        Verb::Edit {
            students,
            source,
            target,
        } => edit_cmd(&cfg, students, *source, *target),
        Verb::Eval { only } => eval(&cfg, only),
        Verb::Sweep {
            students,
            from,
            to,
            step,
            taus,
        } => sweep(&cfg, students, *from, *to, *step, taus),
        Verb::Plot {
            kind,
            input,
            output,
            title,
        } => {
            let spec = PlotSpec {
                kind: *kind,
                inputs: vec![input.clone()],
                title: title.clone(),
            };
            plot::emit_plot(&spec, output)?;
            Ok(vec![format!("wrote {}", output.display())])
        }
        Verb::Config => Ok(vec![cfg.to_text()]),
    }
}

fn load_pair(cfg: &RunConfig, st: &Students) -> Result<(icd_core::distill::ConsistencyModel, icd_core::distill::ConsistencyModel)> {
    pipeline::load_students(&or_default(&st.fcd, cfg, ICD), &or_default(&st.cd, cfg, ICD))
}

fn descriptor(name: &str, m: usize, tau: Option<f64>, w_max: f64, losses: &str) -> ConfigDescriptor {
    ConfigDescriptor {
        name: name.into(),
        m,
        tau,
        w_max,
        losses: losses.into(),
    }
}

fn invert(cfg: &RunConfig, st: &Students) -> Result<Vec<String>> {
    let (fcd, cd) = load_pair(cfg, st)?;
    let teacher = pipeline::load_denoiser(&or_default(&st.teacher, cfg, TEACHER), "teacher")?;
    let test = cfg.test_set()?;
    let sched = cfg.noise_schedule()?;
    let m = cd.plan.m();
    let g = cfg.guidance;
    let losses = format!("lf={} lr={}", cfg.icd.lambda_f, cfg.icd.lambda_r);
    let tau = (g.mode != icd_core::solver::GuidanceMode::Constant).then_some(g.tau1);
    let mut reports = vec![
        teacher_reference(
            &teacher,
            &sched,
            &test,
            &GuidanceSchedule::unguided(),
            descriptor("teacher-unguided", sched.n_steps(), None, 1.0, "-"),
        )?,
        teacher_reference(
            &teacher,
            &sched,
            &test,
            &g,
            descriptor("teacher-guided", sched.n_steps(), tau, g.w_max, "-"),
        )?,
    ];
    for (name, gs, tau) in [
        ("icd-unguided", GuidanceSchedule::unguided(), None),
        ("icd-constant", GuidanceSchedule::constant(g.w_max), None),
        ("icd-dynamic", g, tau),
    ] {
        reports.push(roundtrip_eval(&fcd, &cd, &test, &gs, descriptor(name, m, tau, gs.w_max, &losses))?);
    }
    write_file(&out_path(cfg, "inversion.csv"), |out| write_reports_csv(&reports, out))?;
    std::fs::write(out_path(cfg, "inversion_summary.json"), summary_json(&reports)? + "\n")?;
    let n = test.len().min(32);
    let idx: Vec<usize> = (0..n).collect();
    let x0 = test.points_of(&idx);
    let labels = conditions(&test.labels()[..n]);
    let z = encode(&fcd, &x0, &labels)?.into_last();
    let traj = decode(&cd, &z, &labels, &g)?;
    write_file(&out_path(cfg, "trajectory.csv"), |out| write_trajectory_csv(&traj, out))?;
    Ok(reports
        .iter()
        .map(|r| format!("{}: mse {:.4e} nll {:.4}", r.config.name, r.mse, r.nll))
        .collect())
}

fn edit_cmd(cfg: &RunConfig, st: &Students, source: Option<usize>, target: Option<usize>) -> Result<Vec<String>> {
    let (fcd, cd) = load_pair(cfg, st)?;
    let mix = cfg.mixture()?;
    let test = cfg.test_set()?;
    let k = mix.num_components();
    let pairs = match (source, target) {
        (Some(a), Some(b)) => vec![(a, b)],
        (None, None) => adjacent_pairs(k),
        _ => return Err(IcdError::Contract("--source and --target go together".into())),
    };
    let report = edit_eval(&fcd, &cd, &mix, &test, &pairs, &cfg.guidance, cfg.seed)?;
    write_file(&out_path(cfg, "edit_report.csv"), |out| {
        writeln!(out, "n,edit_success,preservation,baseline,angular_r,identity_edit")?;
        writeln!(
            out,
            "{},{},{},{},{},{}",
            report.n,
            report.edit_success,
            report.preservation,
            report.baseline,
            report.angular_r.map(|r| r.to_string()).unwrap_or_default(),
            report.identity
        )?;
        Ok(())
    })?;
    let labels = test.labels();
    let (mut sources, mut edited) = (vec![], vec![]);
    write_file(&out_path(cfg, "edits.csv"), |out| {
        writeln!(out, "source,target,x0,y0,x,y")?;
        for &(a, b) in &pairs {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == a).collect();
            if idx.is_empty() {
                continue;
            }
            let req = EditRequest {
                x0: test.points_of(&idx),
                source_class: a,
                target_class: b,
                gsched: cfg.guidance,
            };
            let y = edit(&fcd, &cd, &req)?;
            for i in 0..y.rows() {
                let (s, e) = (req.x0.row(i), y.row(i));
                writeln!(out, "{a},{b},{},{},{},{}", s[0], s[1], e[0], e[1])?;
                sources.push([s[0], s[1]]);
                edited.push([e[0], e[1]]);
            }
        }
        Ok(())
    })?;
    std::fs::write(
        out_path(cfg, "edits.svg"),
        plot::overlay(&sources, &edited, &mix.means, "condition-swap edits"),
    )?;
    let mut lines = vec![format!(
        "edit: n {} success {:.3} displacement {:.4} baseline {:.4}",
        report.n, report.edit_success, report.preservation, report.baseline
    )];
    if report.identity {
        lines.push("identity edit: output equals the roundtrip reconstruction".into());
    }
    Ok(lines)
}

/// `from, from + step, ..., to` with the count fixed by rounding, so
/// `0..1` by `0.1` has exactly 11 entries.
pub fn grid_points(from: f64, to: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(to >= from) {
        return Err(IcdError::Contract(format!("bad range {from}..{to} step {step}")));
    }
    let n = ((to - from) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| ((from + i as f64 * step) * 1e9).round() / 1e9).collect())
}

fn sweep(
    cfg: &RunConfig,
    st: &Students,
    from: f64,
    to: f64,
    step: f64,
    taus: &[f64],
) -> Result<Vec<String>> {
    let thresholds = grid_points(from, to, step)?;
    let teacher = pipeline::load_denoiser(&or_default(&st.teacher, cfg, TEACHER), "teacher")?;
    let test = cfg.test_set()?;
    let rows = threshold_sweep(&teacher, &cfg.noise_schedule()?, &test, &thresholds, cfg.guidance.w_max)?;
    write_file(&out_path(cfg, "sweep.csv"), |out| write_sweep_csv(&rows, out))?;
    let mut lines = vec![format!("sweep: {} thresholds", rows.len())];
    let icd = or_default(&st.cd, cfg, ICD);
    if icd.exists() {
        let (fcd, cd) = load_pair(cfg, st)?;
        let mix = cfg.mixture()?;
        let pairs = adjacent_pairs(mix.num_components());
        let fr = tau_frontier(&fcd, &cd, &mix, &test, &pairs, cfg.guidance.w_max, taus, cfg.seed)?;
        write_file(&out_path(cfg, "frontier.csv"), |out| write_frontier_csv(&fr, out))?;
        lines.push(format!("frontier: {} taus", fr.len()));
    }
    Ok(lines)
}

fn eval(cfg: &RunConfig, only: &[usize]) -> Result<Vec<String>> {
    let results = acceptance::run(cfg, only);
    write_file(&out_path(cfg, "acceptance.csv"), |out| acceptance::write_csv(&results, out))?;
    Ok(results.iter().map(acceptance::CriterionResult::line).collect())
}

/// Parses `args` (program name first) and runs the verb.
pub fn run_args<I, T>(args: I) -> Result<Vec<String>>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| IcdError::Contract(e.to_string()))?;
    run(&cli)
}

/// `error: kind=<kind> <message>` on one line.
pub fn error_line(e: &IcdError) -> String {
    let msg: String = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
    format!("error: kind={} {msg}", e.kind())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_range_has_eleven_points() {
        let g = grid_points(0.0, 1.0, 0.1).unwrap();
        assert_eq!(g.len(), 11);
        assert_eq!(g[3], 0.3);
        assert_eq!(g[10], 1.0);
        assert!(grid_points(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn errors_render_on_one_line() {
        let e = IcdError::Parse {
            line: 7,
            reason: "bad\nvalue".into(),
        };
        let l = error_line(&e);
        assert!(l.starts_with("error: kind=parse "));
        assert!(!l.contains('\n'));
    }

    #[test]
    fn overrides_reach_the_config() {
        let common = Common {
            set: vec!["plan.m=3".into(), "guidance.w_max=6".into()],
            seed: Some(9),
            ..Default::default()
        };
        let c = resolve(&common).unwrap();
        assert_eq!((c.plan_m, c.guidance.w_max, c.seed), (3, 6.0, 9));
    }
}

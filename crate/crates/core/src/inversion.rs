//! Deterministic encoding and decoding with consistency students, roundtrip
//! metrics and latent likelihood.
//!
//! Reconstruction is scored by mean squared error and latents by their
//! per-dimension negative log-likelihood under `N(0, I)`.

use std::f64::consts::PI;
use std::io::Write;

use serde::Serialize;

use crate::data::Dataset;
use crate::denoiser::EpsilonModel;
use crate::distill::ConsistencyModel;
use crate::error::{contract, IcdError, Result};
use crate::schedule::NoiseSchedule;
use crate::solver::{conditions, ddim_solve, GuidanceSchedule, OdeDirection, Trajectory};
use crate::tensor::Tensor;

/// Mean over samples and dimensions of `0.5·(z² + ln 2π)`.
pub fn latent_nll(z: &Tensor) -> Result<f64> {
    if z.is_empty() {
        return Err(contract("latent NLL of an empty batch"));
    }
    let half_log = 0.5 * (2.0 * PI).ln();
    Ok(z.data().iter().map(|v| 0.5 * v * v + half_log).sum::<f64>() / z.len() as f64)
}

fn row_nll(row: &[f64]) -> f64 {
    let half_log = 0.5 * (2.0 * PI).ln();
    row.iter().map(|v| 0.5 * v * v + half_log).sum::<f64>() / row.len() as f64
}

fn run_jumps<M: EpsilonModel>(
    cm: &ConsistencyModel<M>,
    x: &Tensor,
    labels: &[Option<usize>],
    gsched: &GuidanceSchedule,
    stage: &'static str,
) -> Result<Trajectory> {
    let jumps = cm.plan.jumps(cm.direction);
    let start = jumps.first().map_or(cm.plan.grid()[0], |j| j.0);
    let mut traj = Trajectory::start(x.clone(), start);
    let n = x.rows();
    for (t, s) in jumps {
        let w = gsched.weight(t, cm.schedule.t_max());
        let next = cm.jump_to(traj.last(), &vec![t; n], &vec![s; n], labels, &vec![w; n])?;
        if !next.all_finite() {
            return Err(IcdError::Pipeline { stage });
        }
        traj.push(next, s);
    }
    Ok(traj)
}

/// `m` forward jumps from `t_0` to `t_N`, always unguided.
pub fn encode<M: EpsilonModel>(
    fcd: &ConsistencyModel<M>,
    x0: &Tensor,
    labels: &[Option<usize>],
) -> Result<Trajectory> {
    if fcd.direction != OdeDirection::Forward {
        return Err(contract("encoding needs the forward student"));
    }
    run_jumps(fcd, x0, labels, &GuidanceSchedule::unguided(), "encode")
}

/// `m` reverse jumps from `t_N` to `t_0`; each jump uses the scale the
/// schedule assigns to its starting time.
pub fn decode<M: EpsilonModel>(
    cd: &ConsistencyModel<M>,
    z: &Tensor,
    labels: &[Option<usize>],
    gsched: &GuidanceSchedule,
) -> Result<Trajectory> {
    if cd.direction != OdeDirection::Reverse {
        return Err(contract("decoding needs the reverse student"));
    }
    run_jumps(cd, z, labels, gsched, "decode")
}

/// Multi-step DDIM encoding with an explicit guidance schedule. Only the
/// latent-likelihood experiments use a guided encoder.
pub fn teacher_encode<M: EpsilonModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    labels: &[Option<usize>],
    gsched: &GuidanceSchedule,
) -> Result<Trajectory> {
    ddim_solve(model, schedule, x0, OdeDirection::Forward, schedule.grid(), labels, gsched)
}

/// Describes the evaluated configuration in reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigDescriptor {
    pub name: String,
    pub m: usize,
    pub tau: Option<f64>,
    pub w_max: f64,
    pub losses: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleRecord {
    pub index: usize,
    pub label: usize,
    pub mse: f64,
    pub latent_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InversionReport {
    pub config: ConfigDescriptor,
    pub mse: f64,
    pub nll: f64,
    pub n_samples: usize,
    pub records: Vec<SampleRecord>,
}

fn report(
    config: ConfigDescriptor,
    dataset: &Dataset,
    x0: &Tensor,
    z: &Tensor,
    rec: &Tensor,
) -> Result<InversionReport> {
    let labels = dataset.labels();
    let records: Vec<SampleRecord> = (0..x0.rows())
        .map(|i| SampleRecord {
            index: i,
            label: labels[i],
            mse: x0
                .row(i)
                .iter()
                .zip(rec.row(i))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / x0.cols() as f64,
            latent_nll: row_nll(z.row(i)),
        })
        .collect();
    Ok(InversionReport {
        config,
        mse: rec.mse(x0)?,
        nll: latent_nll(z)?,
        n_samples: records.len(),
        records,
    })
}

fn empty(config: ConfigDescriptor) -> InversionReport {
    InversionReport {
        config,
        mse: 0.0,
        nll: 0.0,
        n_samples: 0,
        records: vec![],
    }
}

/// Encodes every sample with its own label, decodes under `gsched` and
/// aggregates reconstruction error and latent likelihood.
pub fn roundtrip_eval<F: EpsilonModel, C: EpsilonModel>(
    fcd: &ConsistencyModel<F>,
    cd: &ConsistencyModel<C>,
    dataset: &Dataset,
    gsched: &GuidanceSchedule,
    config: ConfigDescriptor,
) -> Result<InversionReport> {
    if fcd.plan != cd.plan {
        return Err(contract("forward and reverse students use different plans"));
    }
    if dataset.is_empty() {
        return Ok(empty(config));
    }
    let x0 = dataset.points();
    let labels = conditions(&dataset.labels());
    let z = encode(fcd, &x0, &labels)?.into_last();
    let rec = decode(cd, &z, &labels, gsched)?.into_last();
    report(config, dataset, &x0, &z, &rec)
}

/// Full-grid DDIM roundtrip with the teacher: unguided encoding, decoding
/// under `gsched`.
pub fn teacher_reference<M: EpsilonModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    dataset: &Dataset,
    gsched: &GuidanceSchedule,
    config: ConfigDescriptor,
) -> Result<InversionReport> {
    if dataset.is_empty() {
        return Ok(empty(config));
    }
    let x0 = dataset.points();
    let labels = conditions(&dataset.labels());
    let grid = schedule.grid();
    let z = teacher_encode(model, schedule, &x0, &labels, &GuidanceSchedule::unguided())?.into_last();
    let rec = ddim_solve(model, schedule, &z, OdeDirection::Reverse, grid, &labels, gsched)?.into_last();
    report(config, dataset, &x0, &z, &rec)
}

/// One row per report.
pub fn write_reports_csv(reports: &[InversionReport], mut out: impl Write) -> Result<()> {
    writeln!(out, "name,m,tau,w_max,losses,mse,nll,n_samples")?;
    for r in reports {
        let c = &r.config;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            c.name,
            c.m,
            c.tau.map(|t| t.to_string()).unwrap_or_default(),
            c.w_max,
            c.losses,
            r.mse,
            r.nll,
            r.n_samples
        )?;
    }
    Ok(())
}

/// Structured summary without per-sample records.
pub fn summary_json(reports: &[InversionReport]) -> Result<String> {
    #[derive(Serialize)]
    struct Row<'a> {
        config: &'a ConfigDescriptor,
        mse: f64,
        nll: f64,
        n_samples: usize,
    }
    let rows: Vec<Row> = reports
        .iter()
        .map(|r| Row {
            config: &r.config,
            mse: r.mse,
            nll: r.nll,
            n_samples: r.n_samples,
        })
        .collect();
    serde_json::to_string_pretty(&rows).map_err(|e| contract(format!("summary serialization: {e}")))
}

/// Trajectory as CSV rows `(step, t, sample, x, y)`.
pub fn write_trajectory_csv(traj: &Trajectory, mut out: impl Write) -> Result<()> {
    writeln!(out, "step,t,sample,x,y")?;
    for (k, (t, x)) in traj.timesteps.iter().zip(&traj.states).enumerate() {
        for i in 0..x.rows() {
            let r = x.row(i);
            writeln!(out, "{k},{t},{i},{},{}", r[0], r[1])?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundaries::make_plan;
    use crate::data::GaussianMixture;
    use crate::oracle::AnalyticEpsilon;
    use crate::rng::{normal_tensor, stream};
    use crate::schedule::make_schedule;

    #[test]
    fn nll_at_zero_and_scaling() {
        let z = Tensor::zeros(&[3, 2]);
        assert!((latent_nll(&z).unwrap() - 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        let n = normal_tensor(&mut stream(1, "z"), &[100, 2]);
        assert!(latent_nll(&n.scale(2.0)).unwrap() > latent_nll(&n).unwrap());
        assert!(latent_nll(&Tensor::zeros(&[0, 2])).is_err());
    }

    fn oracle_students(m: usize) -> (ConsistencyModel<AnalyticEpsilon>, ConsistencyModel<AnalyticEpsilon>, Dataset) {
        let s = make_schedule(49, 1000).unwrap();
        let mix = GaussianMixture::circle(8, 4.0, 0.3).unwrap();
        let ds = mix.sample(32, &mut stream(2, "d"));
        let plan = make_plan(s.grid(), 1000, m, None).unwrap();
        let o = AnalyticEpsilon::new(mix, s.clone()).unwrap();
        (
            ConsistencyModel::new(o.clone(), plan.clone(), OdeDirection::Forward, s.clone()).unwrap(),
            ConsistencyModel::new(o, plan, OdeDirection::Reverse, s).unwrap(),
            ds,
        )
    }

    #[test]
    fn encode_takes_m_jumps_and_is_deterministic() {
        let (f, _, ds) = oracle_students(3);
        let x = ds.points();
        let l = conditions(&ds.labels());
        let a = encode(&f, &x, &l).unwrap();
        assert_eq!(a.steps(), 3);
        assert_eq!(a.timesteps, f.plan.edges());
        assert_eq!(a, encode(&f, &x, &l).unwrap());
    }

    #[test]
    fn empty_dataset_gives_empty_report() {
        let (f, c, _) = oracle_students(2);
        let ds = Dataset::new(vec![], 8).unwrap();
        let cfg = ConfigDescriptor {
            name: "x".into(),
            m: 2,
            tau: None,
            w_max: 1.0,
            losses: "none".into(),
        };
        let r = roundtrip_eval(&f, &c, &ds, &GuidanceSchedule::unguided(), cfg).unwrap();
        assert_eq!(r.n_samples, 0);
        assert!(r.records.is_empty());
    }

    #[test]
    fn wrong_direction_is_rejected() {
        let (f, c, ds) = oracle_students(2);
        let l = conditions(&ds.labels());
        assert!(encode(&c, &ds.points(), &l).is_err());
        assert!(decode(&f, &ds.points(), &l, &GuidanceSchedule::unguided()).is_err());
    }
}

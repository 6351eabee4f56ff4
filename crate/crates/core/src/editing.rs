//! Class-swap editing: encode under the source class at `w = 1`, decode
//! under the target class.
//!
//! Edit success is nearest-mode classification and preservation is the mean
//! Euclidean displacement from the source point, compared against
//! displacements to fresh target-class samples.

use std::f64::consts::PI;
use std::io::Write;

use serde::Serialize;

use crate::data::{Dataset, GaussianMixture};
use crate::denoiser::EpsilonModel;
use crate::distill::ConsistencyModel;
use crate::error::{contract, Result};
use crate::inversion::{decode, encode};
use crate::rng::stream;
use crate::solver::GuidanceSchedule;
use crate::stats::pearson;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EditRequest {
    pub x0: Tensor,
    pub source_class: usize,
    pub target_class: usize,
    pub gsched: GuidanceSchedule,
}

impl EditRequest {
    pub fn is_identity(&self) -> bool {
        self.source_class == self.target_class
    }
}

pub fn edit<F: EpsilonModel, C: EpsilonModel>(
    fcd: &ConsistencyModel<F>,
    cd: &ConsistencyModel<C>,
    req: &EditRequest,
) -> Result<Tensor> {
    if fcd.plan != cd.plan {
        return Err(contract("forward and reverse students use different plans"));
    }
    let n = req.x0.rows();
    let z = encode(fcd, &req.x0, &vec![Some(req.source_class); n])?.into_last();
    Ok(decode(cd, &z, &vec![Some(req.target_class); n], &req.gsched)?.into_last())
}

/// Pairs `(i, i+1 mod k)`.
pub fn adjacent_pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k).map(|i| (i, (i + 1) % k)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EditReport {
    pub n: usize,
    /// Share of outputs whose nearest mode is the target; for identity pairs,
    /// share reconstructed within one mode σ of the source.
    pub edit_success: f64,
    pub preservation: f64,
    pub baseline: f64,
    /// Correlation between within-mode angular offsets before and after the
    /// edit, over non-identity pairs. `None` when there are fewer than two.
    pub angular_r: Option<f64>,
    pub identity: bool,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn wrap(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

/// Angle of `x` relative to the direction of mode `k`'s mean.
pub fn angular_offset(mixture: &GaussianMixture, k: usize, x: &[f64]) -> f64 {
    let m = mixture.means[k];
    wrap(x[1].atan2(x[0]) - m[1].atan2(m[0]))
}

/// Edits every dataset point of class `a` to class `b` for each pair.
/// Baseline displacements use fresh draws from the target mode.
pub fn edit_eval<F: EpsilonModel, C: EpsilonModel>(
    fcd: &ConsistencyModel<F>,
    cd: &ConsistencyModel<C>,
    mixture: &GaussianMixture,
    dataset: &Dataset,
    pairs: &[(usize, usize)],
    gsched: &GuidanceSchedule,
    seed: u64,
) -> Result<EditReport> {
    if pairs.is_empty() {
        return Err(contract("editing needs at least one class pair"));
    }
    let k = mixture.num_components();
    if let Some(p) = pairs.iter().find(|(a, b)| *a >= k || *b >= k) {
        return Err(contract(format!("class pair {p:?} with {k} classes")));
    }
    let labels = dataset.labels();
    let mut rng = stream(seed, "edit-baseline");
    let (mut hits, mut n, mut moved, mut base) = (0usize, 0usize, 0.0, 0.0);
    let (mut src_off, mut dst_off) = (vec![], vec![]);
    for &(a, b) in pairs {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == a).collect();
        if idx.is_empty() {
            continue;
        }
        let x0 = dataset.points_of(&idx);
        let req = EditRequest {
            x0: x0.clone(),
            source_class: a,
            target_class: b,
            gsched: *gsched,
        };
        let out = edit(fcd, cd, &req)?;
        for i in 0..out.rows() {
            let (src, dst) = (x0.row(i), out.row(i));
            let d = dist(src, dst);
            let ok = if a == b {
                d <= mixture.sigmas[a]
            } else {
                mixture.nearest_mode(dst) == b
            };
            hits += ok as usize;
            moved += d;
            base += dist(src, &mixture.sample_from(b, &mut rng).x);
            if a != b {
                src_off.push(angular_offset(mixture, a, src));
                dst_off.push(angular_offset(mixture, b, dst));
            }
        }
        n += out.rows();
    }
    if n == 0 {
        return Err(contract("no dataset points belong to the requested source classes"));
    }
    let angular_r = if src_off.len() >= 2 {
        Some(pearson(&src_off, &dst_off)?)
    } else {
        None
    };
    Ok(EditReport {
        n,
        edit_success: hits as f64 / n as f64,
        preservation: moved / n as f64,
        baseline: base / n as f64,
        angular_r,
        identity: pairs.iter().all(|(a, b)| a == b),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrontierRow {
    pub tau: f64,
    pub edit_success: f64,
    pub preservation: f64,
    pub baseline: f64,
}

/// Step-schedule edits at `w_max` for each threshold in `taus`.
#[allow(clippy::too_many_arguments)]
pub fn tau_frontier<F: EpsilonModel, C: EpsilonModel>(
    fcd: &ConsistencyModel<F>,
    cd: &ConsistencyModel<C>,
    mixture: &GaussianMixture,
    dataset: &Dataset,
    pairs: &[(usize, usize)],
    w_max: f64,
    taus: &[f64],
    seed: u64,
) -> Result<Vec<FrontierRow>> {
    taus.iter()
        .map(|&tau| {
            let r = edit_eval(fcd, cd, mixture, dataset, pairs, &GuidanceSchedule::step(w_max, tau)?, seed)?;
            Ok(FrontierRow {
                tau,
                edit_success: r.edit_success,
                preservation: r.preservation,
                baseline: r.baseline,
            })
        })
        .collect()
}

pub fn write_frontier_csv(rows: &[FrontierRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "tau,edit_success,preservation,baseline")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.tau, r.edit_success, r.preservation, r.baseline)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundaries::make_plan;
    use crate::inversion::{roundtrip_eval, ConfigDescriptor};
    use crate::oracle::AnalyticEpsilon;
    use crate::schedule::make_schedule;
    use crate::solver::OdeDirection;

    type Oracles = (
        ConsistencyModel<AnalyticEpsilon>,
        ConsistencyModel<AnalyticEpsilon>,
        GaussianMixture,
    );

    fn oracles() -> Oracles {
        let s = make_schedule(49, 1000).unwrap();
        let mix = GaussianMixture::circle(8, 4.0, 0.3).unwrap();
        let plan = make_plan(s.grid(), 1000, 2, None).unwrap();
        let o = AnalyticEpsilon::new(mix.clone(), s.clone()).unwrap();
        (
            ConsistencyModel::new(o.clone(), plan.clone(), OdeDirection::Forward, s.clone()).unwrap(),
            ConsistencyModel::new(o, plan, OdeDirection::Reverse, s).unwrap(),
            mix,
        )
    }

    #[test]
    fn identity_edit_is_the_roundtrip() {
        let (f, c, mix) = oracles();
        let mut rng = stream(3, "d");
        let samples = (0..16).map(|_| mix.sample_from(2, &mut rng)).collect();
        let ds = Dataset::new(samples, 8).unwrap();
        let g = GuidanceSchedule::step(8.0, 0.7).unwrap();
        let req = EditRequest {
            x0: ds.points(),
            source_class: 2,
            target_class: 2,
            gsched: g,
        };
        assert!(req.is_identity());
        let desc = ConfigDescriptor {
            name: "id".into(),
            m: 2,
            tau: Some(0.7),
            w_max: 8.0,
            losses: "none".into(),
        };
        let rt = roundtrip_eval(&f, &c, &ds, &g, desc).unwrap();
        let out = edit(&f, &c, &req).unwrap();
        let mse = out.mse(&ds.points()).unwrap();
        assert_eq!(mse.to_bits(), rt.mse.to_bits());
    }

    #[test]
    fn wrap_stays_in_half_open_interval() {
        for a in [-7.0, -PI, 0.0, PI, 3.5, 10.0] {
            let w = wrap(a);
            assert!(w > -PI && w <= PI, "{a} -> {w}");
            assert!(((a - w) / (2.0 * PI)).fract().abs() < 1e-12 || ((a - w) / (2.0 * PI)).fract().abs() > 1.0 - 1e-12);
        }
    }

    #[test]
    fn rejects_empty_and_invalid_pairs() {
        let (f, c, mix) = oracles();
        let ds = mix.sample(8, &mut stream(1, "d"));
        let g = GuidanceSchedule::unguided();
        assert!(edit_eval(&f, &c, &mix, &ds, &[], &g, 0).is_err());
        assert!(edit_eval(&f, &c, &mix, &ds, &[(0, 9)], &g, 0).is_err());
    }

    #[test]
    fn adjacent_pairs_wrap_around() {
        assert_eq!(adjacent_pairs(3), vec![(0, 1), (1, 2), (2, 0)]);
    }
}

//! Multi-boundary segmentation of the timestep grid.
//!
//! A plan with `m` segments has `m + 1` ascending edges
//! `e_0 = t_0 < e_1 < ... < e_m = t_N`, all grid points. The reverse model
//! jumps from a point down to the lower edge of its segment, the forward
//! model up to the upper edge. At an interior edge the reverse model moves
//! on to the next lower edge and the forward model to the next upper one,
//! so `m` jumps cross the whole grid in either direction. The terminal
//! edges map to themselves.

use serde::{Deserialize, Serialize};

use crate::error::{contract, IcdError, Result};
use crate::solver::OdeDirection;

/// Reference `(m, τ, interior edges)` configurations at `T_max = 1000`.
const REFERENCE_PLANS: &[(usize, f64, &[f64])] = &[
    (4, 0.8, &[259.0, 519.0, 779.0]),
    (4, 0.7, &[259.0, 519.0, 699.0]),
    (3, 0.7, &[339.0, 699.0]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPlan {
    edges: Vec<f64>,
    grid: Vec<f64>,
}

fn nearest_index(grid: &[f64], target: f64) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, &g) in grid.iter().enumerate() {
        let d = (g - target).abs();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Splits `grid` into `m` contiguous segments.
///
/// The three reference configurations are reproduced exactly (scaled to
/// other `T_max` and snapped to the grid). Otherwise, when `tau` is given
/// the topmost interior edge sits at the grid point nearest `τ·T_max` and
/// the remaining edges are spaced evenly below it; without `tau` all edges
/// are spaced evenly in grid index.
pub fn make_plan(grid: &[f64], t_max: usize, m: usize, tau: Option<f64>) -> Result<BoundaryPlan> {
    if grid.len() < 2 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(contract("plan grid must be strictly increasing with 2+ points"));
    }
    let n = grid.len() - 1;
    if m == 0 || m > n {
        return Err(contract(format!(
            "{m} segments requested on a grid with {n} intervals"
        )));
    }
    if let Some(t) = tau {
        if !(0.0..=1.0).contains(&t) {
            return Err(contract(format!("tau {t} outside [0, 1]")));
        }
    }
    let tabled = tau.and_then(|t| {
        REFERENCE_PLANS
            .iter()
            .find(|(pm, pt, _)| *pm == m && (pt - t).abs() < 1e-9)
            .map(|(_, _, e)| *e)
    });
    let interior: Vec<usize> = if let Some(edges) = tabled {
        let scale = t_max as f64 / 1000.0;
        edges
            .iter()
            .map(|&e| nearest_index(grid, (e + 1.0) * scale - 1.0))
            .collect()
    } else if let (Some(t), true) = (tau, m > 1) {
        let top = nearest_index(&grid[..n], t * t_max as f64).max(1);
        let mut idx: Vec<usize> = (1..m - 1)
            .map(|k| ((k * top) as f64 / (m - 1) as f64).round() as usize)
            .collect();
        idx.push(top);
        idx
    } else {
        (1..m)
            .map(|k| ((k * n) as f64 / m as f64).round() as usize)
            .collect()
    };
    let mut idx = vec![0];
    idx.extend(interior);
    idx.push(n);
    if idx.windows(2).any(|w| w[1] <= w[0]) {
        return Err(contract(format!(
            "{m} segments with tau {tau:?} do not fit a grid of {n} intervals"
        )));
    }
    Ok(BoundaryPlan {
        edges: idx.iter().map(|&i| grid[i]).collect(),
        grid: grid.to_vec(),
    })
}

impl BoundaryPlan {
    /// Rebuilds a plan from stored edges, checking them against the grid.
    pub fn from_edges(grid: &[f64], edges: Vec<f64>) -> Result<Self> {
        let ok = edges.len() >= 2
            && edges.windows(2).all(|w| w[1] > w[0])
            && edges.first() == grid.first()
            && edges.last() == grid.last()
            && edges.iter().all(|e| grid.iter().any(|g| (g - e).abs() < 1e-9));
        if !ok {
            return Err(contract(format!("edges {edges:?} are not a plan over the grid")));
        }
        Ok(Self {
            edges,
            grid: grid.to_vec(),
        })
    }

    pub fn m(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Timesteps at which the reverse model is evaluated, ascending.
    pub fn reverse_timesteps(&self) -> &[f64] {
        &self.edges[1..]
    }

    /// Timesteps at which the forward model is evaluated, ascending.
    pub fn forward_timesteps(&self) -> &[f64] {
        &self.edges[..self.m()]
    }

    /// Boundary targets of a direction: lower edges for reverse, upper
    /// edges for forward.
    pub fn targets(&self, direction: OdeDirection) -> &[f64] {
        match direction {
            OdeDirection::Reverse => &self.edges[..self.m()],
            OdeDirection::Forward => &self.edges[1..],
        }
    }

    fn check_grid(&self, t: f64) -> Result<()> {
        if self.grid.iter().any(|g| (g - t).abs() < 1e-9) {
            Ok(())
        } else {
            Err(IcdError::Range(format!("timestep {t} is not on the plan grid")))
        }
    }

    /// The boundary `s^m_t` that a jump from grid timestep `t` lands on.
    pub fn boundary_for(&self, t: f64, direction: OdeDirection) -> Result<f64> {
        self.check_grid(t)?;
        let e = &self.edges;
        Ok(match direction {
            OdeDirection::Reverse => e.iter().rev().copied().find(|&b| b < t).unwrap_or(e[0]),
            OdeDirection::Forward => e.iter().copied().find(|&b| b > t).unwrap_or(e[self.m()]),
        })
    }

    /// `(start, target)` of every jump, in order of travel.
    pub fn jumps(&self, direction: OdeDirection) -> Vec<(f64, f64)> {
        let e = &self.edges;
        match direction {
            OdeDirection::Reverse => (1..e.len()).rev().map(|i| (e[i], e[i - 1])).collect(),
            OdeDirection::Forward => (0..e.len() - 1).map(|i| (e[i], e[i + 1])).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::NoiseSchedule;

    fn grid() -> Vec<f64> {
        NoiseSchedule::from_params(Default::default())
            .unwrap()
            .grid()
            .to_vec()
    }

    #[test]
    fn reference_tables() {
        let g = grid();
        let p = make_plan(&g, 1000, 4, Some(0.8)).unwrap();
        assert_eq!(p.reverse_timesteps(), &[259.0, 519.0, 779.0, 999.0]);
        assert_eq!(p.forward_timesteps(), &[19.0, 259.0, 519.0, 779.0]);
        let p = make_plan(&g, 1000, 3, Some(0.7)).unwrap();
        assert_eq!(p.reverse_timesteps(), &[339.0, 699.0, 999.0]);
        assert_eq!(p.forward_timesteps(), &[19.0, 339.0, 699.0]);
    }

    #[test]
    fn single_segment_targets_terminal_points() {
        let g = grid();
        let p = make_plan(&g, 1000, 1, None).unwrap();
        assert_eq!(p.targets(OdeDirection::Reverse), &[19.0]);
        assert_eq!(p.targets(OdeDirection::Forward), &[999.0]);
        for &t in &g {
            assert_eq!(p.boundary_for(t, OdeDirection::Reverse).unwrap(), 19.0);
            assert_eq!(p.boundary_for(t, OdeDirection::Forward).unwrap(), 999.0);
        }
    }

    #[test]
    fn two_segments_upper_half_reverses_to_middle_edge() {
        let g = grid();
        let p = make_plan(&g, 1000, 2, None).unwrap();
        let k = p.edges()[1];
        let upper: Vec<f64> = g.iter().copied().filter(|&t| t > k).collect();
        assert!(!upper.is_empty());
        for t in upper {
            assert_eq!(p.boundary_for(t, OdeDirection::Reverse).unwrap(), k);
        }
    }

    #[test]
    fn errors() {
        let g = grid();
        assert!(make_plan(&g, 1000, 50, None).is_err());
        assert!(make_plan(&g, 1000, 0, None).is_err());
        let p = make_plan(&g, 1000, 2, None).unwrap();
        assert!(matches!(
            p.boundary_for(20.0, OdeDirection::Reverse),
            Err(IcdError::Range(_))
        ));
    }

    #[test]
    fn tau_places_top_edge() {
        let g = grid();
        let p = make_plan(&g, 1000, 2, Some(0.7)).unwrap();
        assert_eq!(p.edges(), &[19.0, 699.0, 999.0]);
        let p = make_plan(&g, 1000, 4, Some(0.6)).unwrap();
        assert_eq!(*p.edges().last().unwrap(), 999.0);
        assert_eq!(p.edges()[3], 599.0);
    }
}

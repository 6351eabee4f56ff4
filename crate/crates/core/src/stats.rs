//! Small sample statistics used by the evaluations.

use crate::error::{contract, Result};
use crate::tensor::Tensor;

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(contract(format!(
            "correlation needs two equal-length samples of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Pearson correlation. Zero when either sample is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    pearson(&ranks(a), &ranks(b))
}

fn mean_pair_distance(a: &Tensor, b: &Tensor, skip_diagonal: bool) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            if skip_diagonal && i == j {
                continue;
            }
            let d: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            total += d.sqrt();
            count += 1;
        }
    }
    total / count as f64
}

/// Two-sample energy distance `2E|X−Y| − E|X−X'| − E|Y−Y'|`, with the
/// within-sample terms excluding self-pairs.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rows() < 2 || b.rows() < 2 || a.cols() != b.cols() {
        return Err(contract("energy distance needs two samples of matching width, 2+ rows each"));
    }
    Ok(2.0 * mean_pair_distance(a, b, false)
        - mean_pair_distance(a, a, true)
        - mean_pair_distance(b, b, true))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_of_linear_maps() {
        let a = [1.0, 2.0, 3.0, 5.0];
        let b: Vec<f64> = a.iter().map(|x| -2.0 * x + 1.0).collect();
        assert!((pearson(&a, &b).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&a, &[1.0; 4]).unwrap(), 0.0);
        assert!(pearson(&a, &b[..3]).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_sees_monotone_nonlinear() {
        let a: Vec<f64> = (0..10).map(f64::from).collect();
        let b: Vec<f64> = a.iter().map(|x| x.powi(3)).collect();
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn energy_distance_zero_for_identical_and_positive_for_shift() {
        let a = Tensor::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let shifted = a.map(|v| v + 5.0);
        let same = energy_distance(&a, &a).unwrap();
        assert!(energy_distance(&a, &shifted).unwrap() > 5.0);
        assert!(same.abs() < 1.0);
    }
}

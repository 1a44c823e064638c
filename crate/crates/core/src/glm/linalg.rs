use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value tolerance for rank decisions.
pub const RANK_TOL: f64 = 1e-10;

pub fn rank(x: &DMatrix<f64>) -> usize {
    if x.is_empty() {
        return 0;
    }
    let sv = x.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * max).count()
}

pub fn require_full_rank(x: &DMatrix<f64>) -> Result<()> {
    let r = rank(x);
    if r < x.ncols() {
        return Err(Error::Rank { rank: r, columns: x.ncols() });
    }
    Ok(())
}

/// Inverse of a symmetric positive-definite matrix, falling back to LU.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.inverse());
    }
    a.clone()
        .try_inverse()
        .ok_or_else(|| Error::Rank { rank: rank(a), columns: a.ncols() })
}

pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Rank { rank: rank(a), columns: a.ncols() })
}

/// Least-squares solution by SVD; tolerates rank deficiency.
pub fn lstsq(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let svd = x.clone().svd(true, true);
    let max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    svd.solve(y, RANK_TOL * max.max(f64::MIN_POSITIVE))
        .unwrap_or_else(|_| DVector::zeros(x.ncols()))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

/// Two-sided normal p-value for a z statistic.
pub fn normal_two_sided(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2)
}

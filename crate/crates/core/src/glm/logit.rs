use nalgebra::{DMatrix, DVector};

use super::linalg::{normal_two_sided, require_full_rank, spd_inverse, spd_solve, to_rows};
use super::{aic, Covariance, Design, Family, ModelFit};
use crate::error::{Error, Result};

pub const MAX_ITER: usize = 100;
pub const TOL: f64 = 1e-8;
/// Coefficient magnitude beyond which a still-growing fit is declared separated.
pub const SEPARATION_MAGNITUDE: f64 = 30.0;
/// Consecutive non-shrinking Newton steps, past the magnitude, that signal
/// divergence rather than slow convergence to a large finite estimate.
const SEPARATION_PATIENCE: usize = 4;
const RIDGE: f64 = 1e-8;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn loglik(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    eta.iter().zip(y.iter()).map(|(e, yi)| yi * e - softplus(*e)).sum()
}

/// Log-likelihood of the intercept-only model.
fn null_loglik(y: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let k = y.sum();
    let p = k / n;
    let term = |count: f64, prob: f64| if count > 0.0 { count * prob.ln() } else { 0.0 };
    term(k, p) + term(n - k, 1.0 - p)
}

/// Logistic regression by Newton-Raphson (IRLS) with step halving.
pub fn fit_logit(design: &Design, y: &[f64]) -> Result<ModelFit> {
    let x = &design.x;
    let (n, p) = (x.nrows(), x.ncols());
    if y.len() != n {
        return Err(Error::validation("outcome", format!("length {} differs from {n} rows", y.len())));
    }
    if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::validation("outcome", "must be 0 or 1"));
    }
    if n < p {
        return Err(Error::DegreesOfFreedom(format!("{n} observations for {p} coefficients")));
    }
    require_full_rank(x)?;
    let yv = DVector::from_column_slice(y);

    let mut beta = DVector::zeros(p);
    let mut ll = loglik(x, &yv, &beta);
    let mut prev_step = f64::INFINITY;
    let mut stalled = 0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITER {
        iterations += 1;
        let (grad, hess) = score_and_information(x, &yv, &beta);
        let delta = newton_direction(&hess, &grad)?;
        let mut t = 1.0;
        let mut candidate = &beta + &delta;
        let mut cand_ll = loglik(x, &yv, &candidate);
        while cand_ll < ll - 1e-12 * ll.abs().max(1.0) && t > 1e-10 {
            t *= 0.5;
            candidate = &beta + &delta * t;
            cand_ll = loglik(x, &yv, &candidate);
        }
        let step = (&candidate - &beta).amax();
        beta = candidate;
        ll = cand_ll;
        let (j, magnitude) = beta
            .iter()
            .enumerate()
            .map(|(j, b)| (j, b.abs()))
            .fold((0, 0.0), |acc, v| if v.1 > acc.1 { v } else { acc });
        if magnitude > SEPARATION_MAGNITUDE && step >= 0.5 * prev_step {
            stalled += 1;
            if stalled >= SEPARATION_PATIENCE {
                return Err(Error::Separation { predictor: design.names[j].clone(), magnitude });
            }
        } else {
            stalled = 0;
        }
        prev_step = step;
        if step < TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence(MAX_ITER));
    }
    if !beta.iter().all(|b| b.is_finite()) {
        return Err(Error::Convergence(iterations));
    }

    let (_, hess) = score_and_information(x, &yv, &beta);
    let cov = spd_inverse(&hess).or_else(|_| spd_inverse(&ridged(hess)))?;
    let coef: Vec<f64> = beta.iter().cloned().collect();
    let se: Vec<f64> = (0..p).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let z: Vec<f64> = coef.iter().zip(&se).map(|(b, s)| b / s).collect();
    let p_value = z.iter().map(|z| normal_two_sided(*z)).collect();
    let ll0 = null_loglik(&yv);
    let pseudo_r2 = if ll0 < 0.0 { 1.0 - ll / ll0 } else { f64::NAN };
    Ok(ModelFit {
        predictor_names: design.names.clone(),
        coef,
        se,
        z,
        p_value,
        loglik: ll,
        aic: aic(ll, p),
        pseudo_r2,
        n,
        family: Family::Logit,
        standardized: false,
        covariance_kind: Covariance::Model,
        covariance: to_rows(&cov),
        iterations,
    })
}

fn score_and_information(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eta = x * beta;
    let mu = eta.map(sigmoid);
    let w = mu.map(|m| m * (1.0 - m));
    let grad = x.transpose() * (y - &mu);
    let mut xw = x.clone();
    for (mut row, wi) in xw.row_iter_mut().zip(w.iter()) {
        row *= *wi;
    }
    (grad, x.transpose() * xw)
}

/// Solves H d = g, adding the ridge only when H is numerically singular.
fn newton_direction(hess: &DMatrix<f64>, grad: &DVector<f64>) -> Result<DVector<f64>> {
    match hess.clone().cholesky() {
        Some(ch) => Ok(ch.solve(grad)),
        None => spd_solve(&ridged(hess.clone()), grad),
    }
}

fn ridged(mut hess: DMatrix<f64>) -> DMatrix<f64> {
    for j in 0..hess.nrows() {
        hess[(j, j)] += RIDGE;
    }
    hess
}

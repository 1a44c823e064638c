use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::linalg::lstsq;
use super::{Design, ModelFit};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lrt {
    pub chi2: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Likelihood-ratio test of `reduced` nested in `full`.
pub fn lrt(full: &ModelFit, reduced: &ModelFit) -> Result<Lrt> {
    if full.n_params() <= reduced.n_params() {
        return Err(Error::domain(format!(
            "models are not nested: {} vs {} parameters",
            full.n_params(),
            reduced.n_params()
        )));
    }
    if !full.loglik.is_finite() || !reduced.loglik.is_finite() {
        return Err(Error::domain("log-likelihood undefined"));
    }
    if full.loglik < reduced.loglik - 1e-6 {
        return Err(Error::domain("full model fits worse than the reduced model"));
    }
    let df = full.n_params() - reduced.n_params();
    let chi2 = (2.0 * (full.loglik - reduced.loglik)).max(0.0);
    let dist = ChiSquared::new(df as f64).map_err(|e| Error::domain(e.to_string()))?;
    Ok(Lrt { chi2, df, p_value: dist.sf(chi2) })
}

/// A design rescaled to zero mean and unit sample variance per predictor.
/// `center` and `scale` are 0 and 1 for the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    pub design: Design,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardized {
    /// Converts slopes estimated on raw columns to standardized units.
    pub fn standardize_coef(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().zip(&self.scale).map(|(b, s)| b * s).collect()
    }
}

pub fn standardize(design: &Design) -> Result<Standardized> {
    let n = design.n();
    if n < 2 {
        return Err(Error::DegreesOfFreedom("standardization needs at least 2 rows".into()));
    }
    let mut x = design.x.clone();
    let mut center = vec![0.0; design.p()];
    let mut scale = vec![1.0; design.p()];
    for j in 0..design.p() {
        if design.intercept && j == 0 {
            continue;
        }
        let col = design.x.column(j);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::validation(design.names[j].clone(), "zero variance; cannot standardize"));
        }
        for v in x.column_mut(j).iter_mut() {
            *v = (*v - mean) / sd;
        }
        center[j] = mean;
        scale[j] = sd;
    }
    Ok(Standardized {
        design: Design { x, names: design.names.clone(), intercept: design.intercept },
        center,
        scale,
    })
}

/// Wilson score interval for k successes in n trials, clamped to [0, 1].
pub fn wilson_ci(k: u64, n: u64, z: f64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::domain("Wilson interval needs n >= 1"));
    }
    if k > n {
        return Err(Error::domain(format!("k = {k} exceeds n = {n}")));
    }
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let low = if k == 0 { 0.0 } else { (center - half).max(0.0) };
    let high = if k == n { 1.0 } else { (center + half).min(1.0) };
    Ok((low, high))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VifReport {
    pub names: Vec<String>,
    /// Infinite for a perfectly collinear predictor.
    #[serde(with = "crate::serde_nan::vec")]
    pub values: Vec<f64>,
    pub collinear: Vec<bool>,
}

/// Variance inflation factor 1/(1 - R^2_j) for each non-intercept predictor.
pub fn vif(design: &Design) -> Result<VifReport> {
    let start = usize::from(design.intercept);
    let preds: Vec<usize> = (start..design.p()).collect();
    if preds.len() < 2 {
        return Err(Error::validation("design", "VIF needs at least 2 predictors"));
    }
    let n = design.n();
    let mut values = Vec::new();
    for &j in &preds {
        let target: DVector<f64> = design.x.column(j).into_owned();
        let others: Vec<usize> = preds.iter().cloned().filter(|&k| k != j).collect();
        let mut x = DMatrix::from_element(n, others.len() + 1, 1.0);
        for (c, &k) in others.iter().enumerate() {
            x.set_column(c + 1, &design.x.column(k));
        }
        let beta = lstsq(&x, &target);
        let rss = (&target - &x * beta).norm_squared();
        let mean = target.mean();
        let tss: f64 = target.iter().map(|v| (v - mean).powi(2)).sum();
        let unexplained = if tss > 0.0 { rss / tss } else { 0.0 };
        values.push(if unexplained < 1e-10 { f64::INFINITY } else { 1.0 / unexplained });
    }
    Ok(VifReport {
        names: preds.iter().map(|&j| design.names[j].clone()).collect(),
        collinear: values.iter().map(|v| v.is_infinite()).collect(),
        values,
    })
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let ss = v.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    (m, if v.len() > 1 { ss / (n - 1.0) } else { 0.0 })
}

pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::domain("x and y differ in length"));
    }
    if x.len() < 3 {
        return Err(Error::domain("correlation needs at least 3 points"));
    }
    let (mx, vx) = mean_var(x);
    let (my, vy) = mean_var(y);
    if vx <= 0.0 || vy <= 0.0 {
        return Err(Error::domain("correlation undefined for a constant variable"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    Ok((sxy / (x.len() - 1) as f64 / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

/// Standardized mean difference (mean_a - mean_b) over the pooled sd.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("both groups must be non-empty"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    if na + nb <= 2.0 {
        return Err(Error::domain("pooled sd needs at least 3 observations"));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let pooled = (((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0)).sqrt();
    if pooled <= 0.0 {
        return Err(Error::domain("pooled standard deviation is zero"));
    }
    Ok((ma - mb) / pooled)
}

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::linalg::{normal_two_sided, require_full_rank, spd_inverse, to_rows};
use super::{aic, Covariance, Design, Family, ModelFit};
use crate::error::{Error, Result};

/// A linear design whose rows are grouped into clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredDesign {
    pub design: Design,
    pub y: Vec<f64>,
    pub cluster_id: Vec<String>,
}

struct OlsCore {
    beta: DVector<f64>,
    resid: DVector<f64>,
    xtx_inv: DMatrix<f64>,
    rss: f64,
    tss: f64,
}

fn ols_core(design: &Design, y: &[f64]) -> Result<OlsCore> {
    let x = &design.x;
    let (n, p) = (x.nrows(), x.ncols());
    if y.len() != n {
        return Err(Error::validation("outcome", format!("length {} differs from {n} rows", y.len())));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("outcome", "non-finite value"));
    }
    if n < p {
        return Err(Error::DegreesOfFreedom(format!("{n} observations for {p} coefficients")));
    }
    require_full_rank(x)?;
    let yv = DVector::from_column_slice(y);
    let xtx_inv = spd_inverse(&(x.transpose() * x))?;
    let beta = &xtx_inv * (x.transpose() * &yv);
    let resid = &yv - x * &beta;
    let rss = resid.norm_squared();
    let mean = yv.mean();
    let tss = yv.iter().map(|v| (v - mean).powi(2)).sum();
    Ok(OlsCore { beta, resid, xtx_inv, rss, tss })
}

fn assemble(design: &Design, core: &OlsCore, cov: DMatrix<f64>, kind: Covariance) -> ModelFit {
    let n = design.n();
    let p = design.p();
    let coef: Vec<f64> = core.beta.iter().cloned().collect();
    let se: Vec<f64> = (0..p).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let z: Vec<f64> = coef.iter().zip(&se).map(|(b, s)| b / s).collect();
    let p_value = z.iter().map(|z| normal_two_sided(*z)).collect();
    let nf = n as f64;
    let loglik = -nf / 2.0 * ((2.0 * std::f64::consts::PI * core.rss / nf).ln() + 1.0);
    let pseudo_r2 = if core.tss > 0.0 { 1.0 - core.rss / core.tss } else { f64::NAN };
    ModelFit {
        predictor_names: design.names.clone(),
        coef,
        se,
        z,
        p_value,
        loglik,
        aic: aic(loglik, p),
        pseudo_r2,
        n,
        family: Family::Linear,
        standardized: false,
        covariance_kind: kind,
        covariance: to_rows(&cov),
        iterations: 0,
    }
}

/// Ordinary least squares with classical covariance s^2 (X'X)^-1.
pub fn fit_ols(design: &Design, y: &[f64]) -> Result<ModelFit> {
    let core = ols_core(design, y)?;
    let dof = design.n() - design.p();
    if dof == 0 {
        return Err(Error::DegreesOfFreedom("no residual degrees of freedom".into()));
    }
    let s2 = core.rss / dof as f64;
    let cov = &core.xtx_inv * s2;
    Ok(assemble(design, &core, cov, Covariance::Model))
}

/// OLS with the cluster sandwich (X'X)^-1 (sum_j X_j' e_j e_j' X_j) (X'X)^-1.
pub fn fit_ols_cluster(cd: &ClusteredDesign) -> Result<ModelFit> {
    let design = &cd.design;
    if cd.cluster_id.len() != design.n() {
        return Err(Error::validation("cluster_id", "length differs from design rows"));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in cd.cluster_id.iter().enumerate() {
        groups.entry(c.as_str()).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::DegreesOfFreedom(format!(
            "cluster-robust covariance needs at least 2 clusters, got {}",
            groups.len()
        )));
    }
    let core = ols_core(design, &cd.y)?;
    let p = design.p();
    let mut meat = DMatrix::zeros(p, p);
    for rows in groups.values() {
        let mut s = DVector::zeros(p);
        for &i in rows {
            s += design.x.row(i).transpose() * core.resid[i];
        }
        meat += &s * s.transpose();
    }
    let cov = &core.xtx_inv * meat * &core.xtx_inv;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(assemble(design, &core, cov, Covariance::Cluster))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn recovers_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.1, 4.9, 7.0];
        let f = fit_ols(&Design::from_columns(&[("x", &x)], true).unwrap(), &y).unwrap();
        // Closed-form slope and intercept.
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - 1.5) * (b - 4.0)).sum();
        let sxx: f64 = x.iter().map(|a| (a - 1.5).powi(2)).sum();
        assert_abs_diff_eq!(f.coef[1], sxy / sxx, epsilon = 1e-12);
        assert_abs_diff_eq!(f.coef[0], 4.0 - 1.5 * sxy / sxx, epsilon = 1e-12);
        assert!(f.pseudo_r2 > 0.99);
    }

    #[test]
    fn singleton_clusters_reduce_to_hc0() {
        let x = [0.3, 1.1, 2.4, 3.0, 4.2, 5.5, 6.1];
        let y = [1.0, 2.5, 2.0, 4.1, 3.9, 6.5, 6.0];
        let design = Design::from_columns(&[("x", &x)], true).unwrap();
        let ids: Vec<String> = (0..7).map(|i| i.to_string()).collect();
        let f = fit_ols_cluster(&ClusteredDesign { design: design.clone(), y: y.to_vec(), cluster_id: ids }).unwrap();
        // HC0: (X'X)^-1 X' diag(e^2) X (X'X)^-1
        let xm = &design.x;
        let bread = (xm.transpose() * xm).try_inverse().unwrap();
        let beta = &bread * xm.transpose() * DVector::from_column_slice(&y);
        let e = DVector::from_column_slice(&y) - xm * beta;
        let omega = DMatrix::from_diagonal(&e.map(|v| v * v));
        let hc0 = &bread * xm.transpose() * omega * xm * &bread;
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(f.covariance[i][j], hc0[(i, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn single_cluster_is_an_error() {
        let design = Design::from_columns(&[("x", &[1.0, 2.0, 3.0])], true).unwrap();
        let cd = ClusteredDesign { design, y: vec![1.0, 2.0, 2.5], cluster_id: vec!["a".into(); 3] };
        assert!(matches!(fit_ols_cluster(&cd), Err(Error::DegreesOfFreedom(_))));
    }

    #[test]
    fn cluster_se_near_classical_without_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let reps = 200;
        let (mut cl, mut cs) = (0.0, 0.0);
        for _ in 0..reps {
            let x: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
            let y: Vec<f64> = x.iter().map(|v| { let e: f64 = StandardNormal.sample(&mut rng); 1.0 + 0.5 * v + e }).collect();
            let ids: Vec<String> = (0..200).map(|i| (i % 50).to_string()).collect();
            let design = Design::from_columns(&[("x", &x)], true).unwrap();
            let c = fit_ols_cluster(&ClusteredDesign { design: design.clone(), y: y.clone(), cluster_id: ids }).unwrap();
            let o = fit_ols(&design, &y).unwrap();
            cl += c.se[1];
            cs += o.se[1];
        }
        let ratio = cl / cs;
        assert!((ratio - 1.0).abs() < 0.25, "ratio {ratio}");
    }

    #[test]
    fn sandwich_is_symmetric_psd() {
        let x = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let y = [0.5, 1.7, 1.9, 3.8, 3.9, 5.1, 6.8, 6.9];
        let ids: Vec<String> = ["a", "a", "b", "b", "c", "c", "d", "d"].iter().map(|s| s.to_string()).collect();
        let f = fit_ols_cluster(&ClusteredDesign {
            design: Design::from_columns(&[("x", &x)], true).unwrap(),
            y: y.to_vec(),
            cluster_id: ids,
        })
        .unwrap();
        let m = DMatrix::from_fn(2, 2, |i, j| f.covariance[i][j]);
        assert_abs_diff_eq!(m[(0, 1)], m[(1, 0)], epsilon = 0.0);
        let eig = m.symmetric_eigen().eigenvalues;
        assert!(eig.iter().all(|v| *v >= -1e-14));
    }
}

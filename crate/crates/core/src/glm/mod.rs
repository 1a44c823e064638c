//! Logistic and linear regression by maximum likelihood, sandwich variances,
//! and the small set of comparison and effect-size statistics used by the
//! policy and mediation modules.

mod compare;
pub(crate) mod linalg;
mod logit;
mod ols;

pub use compare::{cohens_d, lrt, pearson_r, standardize, vif, wilson_ci, Lrt, Standardized, VifReport};
pub use logit::{fit_logit, sigmoid, softplus, MAX_ITER, SEPARATION_MAGNITUDE};
pub use ols::{fit_ols, fit_ols_cluster, ClusteredDesign};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Logit,
    Linear,
}

/// Variance estimator behind `se`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Covariance {
    /// Inverse Fisher information (logit) or s^2 (X'X)^-1 (linear).
    #[default]
    Model,
    /// Cluster sandwich without small-sample correction.
    Cluster,
}

/// A fitted GLM or OLS model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFit {
    pub predictor_names: Vec<String>,
    #[serde(with = "crate::serde_nan::vec")]
    pub coef: Vec<f64>,
    #[serde(with = "crate::serde_nan::vec")]
    pub se: Vec<f64>,
    #[serde(with = "crate::serde_nan::vec")]
    pub z: Vec<f64>,
    #[serde(with = "crate::serde_nan::vec")]
    pub p_value: Vec<f64>,
    #[serde(with = "crate::serde_nan")]
    pub loglik: f64,
    #[serde(with = "crate::serde_nan")]
    pub aic: f64,
    /// McFadden for logit, R^2 for linear.
    #[serde(with = "crate::serde_nan")]
    pub pseudo_r2: f64,
    pub n: usize,
    pub family: Family,
    pub standardized: bool,
    #[serde(default)]
    pub covariance_kind: Covariance,
    /// Row-major p x p covariance of `coef`.
    #[serde(default)]
    pub covariance: Vec<Vec<f64>>,
    #[serde(default)]
    pub iterations: usize,
}

impl ModelFit {
    /// A fit with no coefficients.
    pub fn empty() -> ModelFit {
        ModelFit {
            predictor_names: vec![],
            coef: vec![],
            se: vec![],
            z: vec![],
            p_value: vec![],
            loglik: 0.0,
            aic: 0.0,
            pseudo_r2: f64::NAN,
            n: 0,
            family: Family::Logit,
            standardized: false,
            covariance_kind: Covariance::Model,
            covariance: vec![],
            iterations: 0,
        }
    }

    /// Builds a fit from published coefficients alone. Standard errors,
    /// log-likelihood and fit statistics are left undefined.
    pub fn from_coefficients(family: Family, terms: &[(&str, f64)]) -> ModelFit {
        let p = terms.len();
        ModelFit {
            predictor_names: terms.iter().map(|t| t.0.to_string()).collect(),
            coef: terms.iter().map(|t| t.1).collect(),
            se: vec![f64::NAN; p],
            z: vec![f64::NAN; p],
            p_value: vec![f64::NAN; p],
            loglik: f64::NAN,
            aic: f64::NAN,
            pseudo_r2: f64::NAN,
            family,
            ..ModelFit::empty()
        }
    }

    /// Builds a fit from an archived log-likelihood and parameter count, as
    /// printed in model-comparison tables.
    pub fn from_summary(family: Family, loglik: f64, n_params: usize, n: usize) -> ModelFit {
        let names: Vec<String> = (0..n_params).map(|i| format!("b{i}")).collect();
        ModelFit {
            predictor_names: names,
            coef: vec![f64::NAN; n_params],
            se: vec![f64::NAN; n_params],
            z: vec![f64::NAN; n_params],
            p_value: vec![f64::NAN; n_params],
            loglik,
            aic: aic(loglik, n_params),
            n,
            family,
            ..ModelFit::empty()
        }
    }

    pub fn n_params(&self) -> usize {
        self.coef.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.predictor_names.iter().position(|n| n == name)
    }

    pub fn coef_of(&self, name: &str) -> Option<f64> {
        self.index_of(name).map(|i| self.coef[i])
    }

    /// Linear predictor for one row of predictor values.
    pub fn linear_predictor(&self, row: &[f64]) -> f64 {
        self.coef.iter().zip(row).map(|(b, x)| b * x).sum()
    }

    #[cfg(test)]
    pub(crate) fn example() -> ModelFit {
        let mut f = ModelFit::from_coefficients(Family::Logit, &[("intercept", 2.692), ("confidence", -5.575)]);
        f.se = vec![0.31, 0.62];
        f.z = vec![2.692 / 0.31, -5.575 / 0.62];
        f.p_value = vec![1e-12, 1e-16];
        f.loglik = -512.25;
        f.aic = aic(-512.25, 2);
        f.pseudo_r2 = 0.173;
        f.n = 1000;
        f.covariance = vec![vec![0.0961, -0.1], vec![-0.1, 0.3844]];
        f
    }
}

pub(crate) fn aic(loglik: f64, p: usize) -> f64 {
    2.0 * p as f64 - 2.0 * loglik
}

/// A design matrix with named columns. When `intercept` is set, column 0 is
/// the constant column.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub names: Vec<String>,
    pub intercept: bool,
}

impl Design {
    /// Assembles a design from named columns, prepending an intercept if asked.
    pub fn from_columns(columns: &[(&str, &[f64])], intercept: bool) -> Result<Design> {
        let n = match (columns.first(), intercept) {
            (Some(c), _) => c.1.len(),
            (None, true) => return Err(Error::validation("design", "intercept-only design needs a row count")),
            (None, false) => return Err(Error::validation("design", "no columns")),
        };
        let mut names = Vec::new();
        let mut data: Vec<f64> = Vec::new();
        if intercept {
            names.push("intercept".to_string());
            data.extend(std::iter::repeat_n(1.0, n));
        }
        for (name, col) in columns {
            if col.len() != n {
                return Err(Error::validation(*name, format!("length {} differs from {n}", col.len())));
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(*name, "non-finite value"));
            }
            names.push(name.to_string());
            data.extend_from_slice(col);
        }
        let p = names.len();
        Ok(Design { x: DMatrix::from_column_slice(n, p, &data), names, intercept })
    }

    /// An intercept-only design with `n` rows.
    pub fn intercept_only(n: usize) -> Design {
        Design { x: DMatrix::from_element(n, 1, 1.0), names: vec!["intercept".into()], intercept: true }
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn column(&self, name: &str) -> Option<DVector<f64>> {
        self.names.iter().position(|n| n == name).map(|j| self.x.column(j).into_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aic_identity_on_summary_fits() {
        let f = ModelFit::from_summary(Family::Logit, -609.8, 3, 1000);
        assert!((f.aic - 1225.6).abs() < 1e-9);
    }

    #[test]
    fn design_prepends_intercept() {
        let d = Design::from_columns(&[("x", &[1.0, 2.0, 3.0])], true).unwrap();
        assert_eq!(d.names, ["intercept", "x"]);
        assert_eq!(d.x[(2, 0)], 1.0);
        assert_eq!(d.x[(2, 1)], 3.0);
        assert!(Design::from_columns(&[("x", &[1.0]), ("y", &[1.0, 2.0])], true).is_err());
    }

    #[test]
    fn non_finite_fits_serialize_as_null() {
        let f = ModelFit::from_coefficients(Family::Logit, &[("intercept", 1.0)]);
        let s = serde_json::to_string(&f).unwrap();
        assert!(s.contains("\"loglik\":null"));
        let back: ModelFit = serde_json::from_str(&s).unwrap();
        assert!(back.loglik.is_nan());
        assert_eq!(back.coef, vec![1.0]);
    }
}

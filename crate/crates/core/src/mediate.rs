//! Parallel mediation of steering effects on abstention.
//!
//! Two mediators carry the effect of steering strength X on abstention Y:
//!
//! * M1, the net confidence shift: the change in max real-option confidence
//!   minus the change in abstain-option confidence, both relative to the same
//!   item's unsteered baseline;
//! * M2, the policy shift: how much the abstention curve over confidence has
//!   moved, evaluated at the trial's confidence.
//!
//! The a-paths are OLS with item-clustered standard errors; the outcome and
//! total-effect equations are logits. Every equation includes an intercept.
//! Confidence intervals come from a cluster bootstrap over items. Mediators are
//! computed once on the full data and only the path regressions are refit in
//! each replicate.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{fit_logit, fit_ols, fit_ols_cluster, pearson_r, sigmoid, ClusteredDesign, Design};

/// Fraction of failed bootstrap replicates tolerated before giving up.
pub const MAX_FAILED_FRACTION: f64 = 0.2;
pub const MIN_REPLICATES: usize = 100;
/// |c| below which proportions mediated are undefined.
pub const MIN_TOTAL_EFFECT: f64 = 1e-6;

/// One steered trial paired with its item's unsteered baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediationRecord {
    pub item_id: String,
    /// Signed steering strength, never 0.
    pub x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<u32>,
    pub abstained: bool,
    /// Max real-option confidence under steering.
    pub c_max: f64,
    /// Abstain-option confidence under steering.
    pub c_abstain: f64,
    pub baseline_c_max: Option<f64>,
    pub baseline_c_abstain: Option<f64>,
    pub baseline_abstained: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<f64>,
}

impl MediationRecord {
    fn baseline(&self) -> Result<(f64, f64, bool)> {
        match (self.baseline_c_max, self.baseline_c_abstain, self.baseline_abstained) {
            (Some(m), Some(a), Some(y)) => Ok((m, a, y)),
            _ => Err(Error::Pairing(format!("steered row for `{}` has no baseline", self.item_id))),
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.x.is_finite() || self.x == 0.0 {
            return Err(Error::validation("x", "steering strength must be non-zero"));
        }
        for (name, v) in [("c_max", self.c_max), ("c_abstain", self.c_abstain)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(name, format!("{v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<MediationRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MediationRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save_records(records: &[MediationRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// M1 = (C_m - C_m^baseline) - (C_5 - C_5^baseline).
pub fn mediator_confidence_shift(record: &MediationRecord) -> Result<f64> {
    let (bm, ba, _) = record.baseline()?;
    Ok((record.c_max - bm) - (record.c_abstain - ba))
}

/// Logistic curve P(abstain) = sigmoid(alpha + beta * C_m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticCurve {
    pub alpha: f64,
    pub beta: f64,
}

impl LogisticCurve {
    pub fn eval(&self, c: f64) -> f64 {
        sigmoid(self.alpha + self.beta * c)
    }

    /// Fits abstention against max real-option confidence.
    pub fn fit(c_max: &[f64], abstained: &[bool]) -> Result<LogisticCurve> {
        let y: Vec<f64> = abstained.iter().map(|&a| a as u8 as f64).collect();
        let fit = fit_logit(&Design::from_columns(&[("c_max", c_max)], true)?, &y)?;
        Ok(LogisticCurve { alpha: fit.coef[0], beta: fit.coef[1] })
    }
}

/// M2 = sigmoid(alpha_s + beta_s C_m) - sigmoid(alpha_b + beta_b C_m).
pub fn mediator_policy_shift(c_max: f64, baseline: &LogisticCurve, steered: &LogisticCurve) -> f64 {
    steered.eval(c_max) - baseline.eval(c_max)
}

/// A row ready for the path regressions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedRow {
    pub item_id: String,
    pub x: f64,
    pub y: bool,
    pub m1: f64,
    pub m2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<f64>,
}

/// Baseline curve and one steered curve per steering strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurves {
    pub baseline: LogisticCurve,
    /// Keyed by steering strength formatted with one decimal.
    pub steered: BTreeMap<String, LogisticCurve>,
}

fn strength_key(x: f64) -> String {
    format!("{x:+.1}")
}

/// Checks pairing, fits the calibration curves and computes both mediators.
pub fn prepare(records: &[MediationRecord]) -> Result<(Vec<PreparedRow>, CalibrationCurves)> {
    if records.is_empty() {
        return Err(Error::validation("records", "no mediation rows"));
    }
    let mut baselines: BTreeMap<&str, (f64, f64, bool)> = BTreeMap::new();
    for r in records {
        r.validate()?;
        let b = r.baseline()?;
        match baselines.get(r.item_id.as_str()) {
            Some(prev) if *prev != b => {
                return Err(Error::Pairing(format!("item `{}` has inconsistent baselines", r.item_id)))
            }
            _ => {
                baselines.insert(r.item_id.as_str(), b);
            }
        }
    }
    let (bc, ba): (Vec<f64>, Vec<bool>) = baselines.values().map(|b| (b.0, b.2)).unzip();
    let baseline = LogisticCurve::fit(&bc, &ba)?;

    let mut by_strength: BTreeMap<String, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for r in records {
        let e = by_strength.entry(strength_key(r.x)).or_default();
        e.0.push(r.c_max);
        e.1.push(r.abstained);
    }
    let steered = by_strength
        .into_iter()
        .map(|(k, (c, a))| LogisticCurve::fit(&c, &a).map(|curve| (k, curve)))
        .collect::<Result<BTreeMap<_, _>>>()?;

    let rows = records
        .iter()
        .map(|r| {
            Ok(PreparedRow {
                item_id: r.item_id.clone(),
                x: r.x,
                y: r.abstained,
                m1: mediator_confidence_shift(r)?,
                m2: mediator_policy_shift(r.c_max, &baseline, &steered[&strength_key(r.x)]),
                difficulty: r.difficulty,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, CalibrationCurves { baseline, steered }))
}

/// An estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathCoef {
    pub estimate: f64,
    pub se: f64,
}

/// Point estimates of every path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEstimates {
    pub a1: PathCoef,
    pub a2: PathCoef,
    pub b1: PathCoef,
    pub b2: PathCoef,
    pub c_prime: PathCoef,
    pub c: PathCoef,
    /// Difficulty coefficient in the outcome equation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_difficulty: Option<PathCoef>,
}

impl PathEstimates {
    pub fn indirect1(&self) -> f64 {
        self.a1.estimate * self.b1.estimate
    }

    pub fn indirect2(&self) -> f64 {
        self.a2.estimate * self.b2.estimate
    }
}

struct Columns {
    x: Vec<f64>,
    y: Vec<f64>,
    m1: Vec<f64>,
    m2: Vec<f64>,
    diff: Option<Vec<f64>>,
    clusters: Vec<String>,
}

fn columns<'a>(rows: impl Iterator<Item = (&'a PreparedRow, String)>, with_difficulty: bool) -> Result<Columns> {
    let mut c = Columns {
        x: vec![],
        y: vec![],
        m1: vec![],
        m2: vec![],
        diff: with_difficulty.then(Vec::new),
        clusters: vec![],
    };
    for (r, cluster) in rows {
        c.x.push(r.x);
        c.y.push(r.y as u8 as f64);
        c.m1.push(r.m1);
        c.m2.push(r.m2);
        if let Some(d) = &mut c.diff {
            d.push(r.difficulty.ok_or_else(|| Error::validation("difficulty", format!("missing for `{}`", r.item_id)))?);
        }
        c.clusters.push(cluster);
    }
    Ok(c)
}

fn with_diff<'a>(mut cols: Vec<(&'a str, &'a [f64])>, diff: &'a Option<Vec<f64>>) -> Vec<(&'a str, &'a [f64])> {
    if let Some(d) = diff {
        cols.push(("difficulty", d.as_slice()));
    }
    cols
}

fn coef(fit: &crate::glm::ModelFit, name: &str) -> PathCoef {
    let j = fit.index_of(name).expect("predictor present in design");
    PathCoef { estimate: fit.coef[j], se: fit.se[j] }
}

/// Fits the four path equations. `robust` selects item-clustered SEs for
/// the a-paths; bootstrap replicates skip them.
fn fit_columns(c: &Columns, robust: bool) -> Result<PathEstimates> {
    let xd = Design::from_columns(&with_diff(vec![("x", &c.x)], &c.diff), true)?;
    let a_fit = |m: &[f64]| {
        if robust {
            fit_ols_cluster(&ClusteredDesign { design: xd.clone(), y: m.to_vec(), cluster_id: c.clusters.clone() })
        } else {
            fit_ols(&xd, m)
        }
    };
    let a1 = a_fit(&c.m1)?;
    let a2 = a_fit(&c.m2)?;
    let outcome = fit_logit(
        &Design::from_columns(&with_diff(vec![("x", &c.x), ("m1", &c.m1), ("m2", &c.m2)], &c.diff), true)?,
        &c.y,
    )?;
    let total = fit_logit(&xd, &c.y)?;
    Ok(PathEstimates {
        a1: coef(&a1, "x"),
        a2: coef(&a2, "x"),
        b1: coef(&outcome, "m1"),
        b2: coef(&outcome, "m2"),
        c_prime: coef(&outcome, "x"),
        c: coef(&total, "x"),
        gamma_difficulty: c.diff.as_ref().map(|_| coef(&outcome, "difficulty")),
    })
}

fn check_design(rows: &[PreparedRow]) -> Result<()> {
    let mut items: Vec<&str> = rows.iter().map(|r| r.item_id.as_str()).collect();
    items.sort_unstable();
    items.dedup();
    if items.len() < 2 {
        return Err(Error::validation("items", "mediation needs at least 2 items"));
    }
    let mut levels: Vec<f64> = rows.iter().map(|r| r.x).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    if levels.len() < 2 {
        return Err(Error::validation("x", "mediation needs at least 2 steering levels"));
    }
    Ok(())
}

/// Path coefficients with item-clustered SEs on the a-paths.
pub fn fit_paths(rows: &[PreparedRow], with_difficulty: bool) -> Result<PathEstimates> {
    check_design(rows)?;
    let cols = columns(rows.iter().map(|r| (r, r.item_id.clone())), with_difficulty)?;
    fit_columns(&cols, true)
}

/// Percentile confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub indirect1: Interval,
    pub indirect2: Interval,
    pub replicates: usize,
    pub failed: usize,
}

/// Type-7 sample quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Cluster bootstrap over items. Replicate `b` draws from its own ChaCha
/// stream, so results do not depend on the number of worker threads.
pub fn bootstrap_ci(rows: &[PreparedRow], b: usize, seed: u64, with_difficulty: bool) -> Result<BootstrapResult> {
    if b < MIN_REPLICATES {
        return Err(Error::validation("B", format!("need at least {MIN_REPLICATES} replicates, got {b}")));
    }
    check_design(rows)?;
    let mut by_item: BTreeMap<&str, Vec<&PreparedRow>> = BTreeMap::new();
    for r in rows {
        by_item.entry(r.item_id.as_str()).or_default().push(r);
    }
    let items: Vec<&Vec<&PreparedRow>> = by_item.values().collect();
    let j = items.len();

    let outcomes: Vec<std::result::Result<(f64, f64), String>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(rep as u64);
            let draws: Vec<usize> = (0..j).map(|_| rng.gen_range(0..j)).collect();
            let sample = draws
                .iter()
                .enumerate()
                .flat_map(|(k, &i)| items[i].iter().map(move |r| (*r, k.to_string())));
            let est = columns(sample, with_difficulty).and_then(|c| fit_columns(&c, false));
            est.map(|e| (e.indirect1(), e.indirect2())).map_err(|e| e.to_string())
        })
        .collect();

    let failed = outcomes.iter().filter(|o| o.is_err()).count();
    if failed as f64 > MAX_FAILED_FRACTION * b as f64 {
        let last_error = outcomes.iter().rev().find_map(|o| o.as_ref().err().cloned()).unwrap_or_default();
        return Err(Error::Bootstrap { failed, total: b, last_error });
    }
    let (mut i1, mut i2): (Vec<f64>, Vec<f64>) = outcomes.into_iter().filter_map(|o| o.ok()).unzip();
    i1.sort_by(f64::total_cmp);
    i2.sort_by(f64::total_cmp);
    let interval = |v: &[f64]| Interval { low: quantile(v, 0.025), high: quantile(v, 0.975) };
    Ok(BootstrapResult { indirect1: interval(&i1), indirect2: interval(&i2), replicates: b, failed })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Effect {
    pub estimate: f64,
    pub ci: Interval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProportionMediated {
    pub p1: f64,
    pub p2: f64,
    pub total: f64,
}

/// Indirect effects as fractions of the total effect c. Under a logit link
/// c' + a1 b1 + a2 b2 need not equal c, so these need not sum to 1.
pub fn proportions(indirect1: f64, indirect2: f64, c: f64) -> Result<ProportionMediated> {
    if !(c.abs() >= MIN_TOTAL_EFFECT) {
        return Err(Error::domain(format!("proportion mediated undefined: total effect {c} is ~0")));
    }
    let (p1, p2) = (indirect1 / c, indirect2 / c);
    Ok(ProportionMediated { p1, p2, total: p1 + p2 })
}

/// Everything the `mediate` command reports, labelled as in the path diagram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediationReport {
    pub paths: PathEstimates,
    pub indirect1: Effect,
    pub indirect2: Effect,
    /// Fractions of c, not percentages.
    pub proportion1: f64,
    pub proportion2: f64,
    #[serde(with = "crate::serde_nan")]
    pub mediator_correlation: f64,
    #[serde(rename = "B")]
    pub b: usize,
    pub failed_replicates: usize,
    pub n_items: usize,
    pub n_rows: usize,
    pub with_difficulty: bool,
    pub curves: Option<CalibrationCurves>,
}

impl MediationReport {
    pub fn proportion_mediated(&self) -> Result<ProportionMediated> {
        proportions(self.indirect1.estimate, self.indirect2.estimate, self.paths.c.estimate)
    }
}

/// Path fit plus bootstrap on prepared rows.
pub fn analyze_prepared(rows: &[PreparedRow], with_difficulty: bool, b: usize, seed: u64) -> Result<MediationReport> {
    let paths = fit_paths(rows, with_difficulty)?;
    let boot = bootstrap_ci(rows, b, seed, with_difficulty)?;
    let prop = proportions(paths.indirect1(), paths.indirect2(), paths.c.estimate)?;
    let m1: Vec<f64> = rows.iter().map(|r| r.m1).collect();
    let m2: Vec<f64> = rows.iter().map(|r| r.m2).collect();
    let mut items: Vec<&str> = rows.iter().map(|r| r.item_id.as_str()).collect();
    items.sort_unstable();
    items.dedup();
    Ok(MediationReport {
        indirect1: Effect { estimate: paths.indirect1(), ci: boot.indirect1 },
        indirect2: Effect { estimate: paths.indirect2(), ci: boot.indirect2 },
        proportion1: prop.p1,
        proportion2: prop.p2,
        mediator_correlation: pearson_r(&m1, &m2).unwrap_or(f64::NAN),
        b,
        failed_replicates: boot.failed,
        n_items: items.len(),
        n_rows: rows.len(),
        with_difficulty,
        curves: None,
        paths,
    })
}

/// Full analysis from paired records.
pub fn analyze(records: &[MediationRecord], with_difficulty: bool, b: usize, seed: u64) -> Result<MediationReport> {
    let (rows, curves) = prepare(records)?;
    let mut report = analyze_prepared(&rows, with_difficulty, b, seed)?;
    report.curves = Some(curves);
    Ok(report)
}

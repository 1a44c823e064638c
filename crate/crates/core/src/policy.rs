//! The two-stage confidence-to-decision model.
//!
//! Abstention is modelled as a logistic function of confidence (Phase 2) or
//! of an instructed threshold plus confidence (Phase 4). The fitted slopes are
//! turned into interpretable policy quantities: the indifference point, the
//! policy temperature, and for Phase 4 the scale and shift of the implied
//! threshold. Confidence is kept in [0, 1] for Phase 2 and in percent for
//! Phase 4.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{self, fit_logit, fit_ols, lrt, pearson_r, Design, ModelFit};
use crate::trialstore::{JoinedTable, Phase, N_PCS};

pub const INTERCEPT: &str = "intercept";
pub const CONFIDENCE: &str = "confidence";
pub const DIFFICULTY: &str = "difficulty";
pub const RAG: &str = "rag";
pub const THRESHOLD: &str = "threshold";

/// Instructed thresholds on the heatmap grid, in percent.
pub const GRID_THRESHOLDS: [f64; 11] = [0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0];
/// Width of a confidence bin on the heatmap grid.
pub const CONF_BIN_WIDTH: f64 = 0.1;

fn pc_name(i: usize) -> String {
    format!("pc{}", i + 1)
}

/// Covariate blocks that can enter a sub-model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Term {
    Threshold,
    Confidence,
    Difficulty,
    Rag,
    Embeddings,
}

struct Candidate {
    name: &'static str,
    terms: &'static [Term],
    baseline: Option<&'static str>,
}

const PHASE2_SUITE: &[Candidate] = &[
    Candidate { name: "difficulty_only", terms: &[Term::Difficulty], baseline: None },
    Candidate { name: "confidence_only", terms: &[Term::Confidence], baseline: None },
    Candidate { name: "confidence_difficulty", terms: &[Term::Confidence, Term::Difficulty], baseline: Some("difficulty_only") },
    Candidate { name: "confidence_rag", terms: &[Term::Confidence, Term::Rag], baseline: Some("confidence_only") },
    Candidate { name: "confidence_embeddings", terms: &[Term::Confidence, Term::Embeddings], baseline: Some("confidence_only") },
    Candidate {
        name: "full",
        terms: &[Term::Confidence, Term::Difficulty, Term::Rag, Term::Embeddings],
        baseline: Some("confidence_difficulty"),
    },
];

const PHASE4_SUITE: &[Candidate] = &[
    Candidate { name: "threshold_only", terms: &[Term::Threshold], baseline: None },
    Candidate { name: "threshold_confidence", terms: &[Term::Threshold, Term::Confidence], baseline: Some("threshold_only") },
    Candidate { name: "threshold_difficulty", terms: &[Term::Threshold, Term::Difficulty], baseline: Some("threshold_only") },
    Candidate {
        name: "threshold_confidence_difficulty",
        terms: &[Term::Threshold, Term::Confidence, Term::Difficulty],
        baseline: Some("threshold_confidence"),
    },
    Candidate { name: "threshold_rag", terms: &[Term::Threshold, Term::Rag], baseline: Some("threshold_only") },
    Candidate { name: "threshold_embeddings", terms: &[Term::Threshold, Term::Embeddings], baseline: Some("threshold_only") },
    Candidate {
        name: "maximal",
        terms: &[Term::Threshold, Term::Confidence, Term::Difficulty, Term::Rag, Term::Embeddings],
        baseline: Some("threshold_confidence_difficulty"),
    },
];

/// Confidence as it enters each phase's models.
fn confidence_units(phase: Phase) -> f64 {
    if phase == Phase::P4 {
        100.0
    } else {
        1.0
    }
}

fn build_design(table: &JoinedTable, terms: &[Term], phase: Phase) -> Result<Design> {
    let rows = &table.rows;
    let mut cols: Vec<(String, Vec<f64>)> = Vec::new();
    for term in terms {
        match term {
            Term::Threshold => cols.push((
                THRESHOLD.into(),
                rows.iter()
                    .map(|r| {
                        r.trial
                            .instructed_threshold
                            .ok_or_else(|| Error::validation("instructed_threshold", "missing in Phase 4 table"))
                    })
                    .collect::<Result<_>>()?,
            )),
            Term::Confidence => {
                let k = confidence_units(phase);
                cols.push((CONFIDENCE.into(), rows.iter().map(|r| r.confidence * k).collect()))
            }
            Term::Difficulty => cols.push((DIFFICULTY.into(), rows.iter().map(|r| r.difficulty).collect())),
            Term::Rag => cols.push((RAG.into(), rows.iter().map(|r| r.rag_score).collect())),
            Term::Embeddings => {
                for i in 0..N_PCS {
                    cols.push((pc_name(i), rows.iter().map(|r| r.pcs[i]).collect()));
                }
            }
        }
    }
    let refs: Vec<(&str, &[f64])> = cols.iter().map(|(n, c)| (n.as_str(), c.as_slice())).collect();
    Design::from_columns(&refs, true)
}

fn abstained(table: &JoinedTable) -> Vec<f64> {
    table.rows.iter().map(|r| if r.trial.abstained { 1.0 } else { 0.0 }).collect()
}

/// One sub-model of a suite: either a fit or the reason it could not be fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<ModelFit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One line of a model-comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub n_params: usize,
    #[serde(with = "crate::serde_nan")]
    pub loglik: f64,
    #[serde(with = "crate::serde_nan")]
    pub aic: f64,
    #[serde(with = "crate::serde_nan")]
    pub pseudo_r2: f64,
    pub baseline: Option<String>,
    pub delta_aic: Option<f64>,
    pub lrt_chi2: Option<f64>,
    pub lrt_df: Option<usize>,
    pub lrt_p: Option<f64>,
    pub fitted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub phase: Phase,
    pub models: BTreeMap<String, SuiteEntry>,
    pub comparison: Vec<ComparisonRow>,
}

impl Suite {
    pub fn fit(&self, name: &str) -> Option<&ModelFit> {
        self.models.get(name).and_then(|e| e.fit.as_ref())
    }
}

fn fit_suite(table: &JoinedTable, phase: Phase, candidates: &[Candidate]) -> Result<Suite> {
    if table.is_empty() {
        return Err(Error::validation("table", "no rows to fit"));
    }
    if phase == Phase::P4 && table.rows.iter().any(|r| r.trial.instructed_threshold.is_none()) {
        return Err(Error::validation("instructed_threshold", "missing in Phase 4 table"));
    }
    let y = abstained(table);
    let results: Vec<(&'static str, std::result::Result<ModelFit, String>)> = candidates
        .par_iter()
        .map(|cand| {
            let fit = build_design(table, cand.terms, phase)
                .and_then(|d| fit_logit(&d, &y))
                .map_err(|e| e.to_string());
            (cand.name, fit)
        })
        .collect();
    let models: BTreeMap<String, SuiteEntry> = results
        .into_iter()
        .map(|(name, r)| {
            let entry = match r {
                Ok(fit) => SuiteEntry { fit: Some(fit), error: None },
                Err(e) => SuiteEntry { fit: None, error: Some(e) },
            };
            (name.to_string(), entry)
        })
        .collect();
    let comparison = candidates
        .iter()
        .map(|cand| {
            let fit = models[cand.name].fit.as_ref();
            let base = cand.baseline.and_then(|b| models[b].fit.as_ref());
            let test = match (fit, base) {
                (Some(f), Some(b)) => lrt(f, b).ok(),
                _ => None,
            };
            ComparisonRow {
                model: cand.name.to_string(),
                n_params: fit.map_or(0, |f| f.n_params()),
                loglik: fit.map_or(f64::NAN, |f| f.loglik),
                aic: fit.map_or(f64::NAN, |f| f.aic),
                pseudo_r2: fit.map_or(f64::NAN, |f| f.pseudo_r2),
                baseline: cand.baseline.map(str::to_string),
                delta_aic: fit.zip(base).map(|(f, b)| f.aic - b.aic),
                lrt_chi2: test.map(|t| t.chi2),
                lrt_df: test.map(|t| t.df),
                lrt_p: test.map(|t| t.p_value),
                fitted: fit.is_some(),
            }
        })
        .collect();
    Ok(Suite { phase, models, comparison })
}

/// Fits the six nested Phase 2 models of abstention on confidence and covariates.
pub fn fit_phase2_suite(table: &JoinedTable) -> Result<Suite> {
    fit_suite(table, Phase::P2, PHASE2_SUITE)
}

/// Fits the seven nested Phase 4 models with the instructed threshold.
pub fn fit_phase4_suite(table: &JoinedTable) -> Result<Suite> {
    fit_suite(table, Phase::P4, PHASE4_SUITE)
}

/// Writes a comparison table as CSV. Unfitted models keep their row with
/// empty statistics.
pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["model", "n_params", "loglik", "aic", "pseudo_r2", "baseline", "delta_aic", "lrt_chi2", "lrt_df", "lrt_p", "status"])?;
    let num = |v: f64| if v.is_finite() { format!("{v:.4}") } else { String::new() };
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    for r in rows {
        out.write_record([
            r.model.clone(),
            r.n_params.to_string(),
            num(r.loglik),
            num(r.aic),
            num(r.pseudo_r2),
            r.baseline.clone().unwrap_or_default(),
            opt(r.delta_aic),
            opt(r.lrt_chi2),
            r.lrt_df.map(|d| d.to_string()).unwrap_or_default(),
            r.lrt_p.map(|p| format!("{p:.3e}")).unwrap_or_default(),
            if r.fitted { "fitted".into() } else { "not fitted".into() },
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Policy quantities derived from a fitted decision model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionParams {
    pub phase: Phase,
    /// Phase 2: confidence at which abstention is 50%, at the requested
    /// difficulty. Phase 4: the instructed threshold at which abstention is
    /// 50%, at zero confidence and difficulty (equal to `shift`); use
    /// [`DecisionParams::t50_at`] for other points.
    pub t50: f64,
    pub policy_temperature: f64,
    pub scale: Option<f64>,
    pub shift: Option<f64>,
    pub difficulty_adjustment: Option<f64>,
    pub source_fit: ModelFit,
}

fn coef_or_zero(fit: &ModelFit, name: &str) -> f64 {
    fit.coef_of(name).unwrap_or(0.0)
}

/// Indifference point and temperature of a Phase 2 model.
pub fn derive_phase2_params(fit: &ModelFit, diff_at: f64) -> Result<DecisionParams> {
    let bc = fit
        .coef_of(CONFIDENCE)
        .ok_or_else(|| Error::validation("fit", "no confidence coefficient"))?;
    if bc == 0.0 || !bc.is_finite() {
        return Err(Error::DegeneratePolicy("confidence coefficient is zero".into()));
    }
    let b0 = coef_or_zero(fit, INTERCEPT);
    let bd = coef_or_zero(fit, DIFFICULTY);
    Ok(DecisionParams {
        phase: Phase::P2,
        t50: -b0 / bc - (bd / bc) * diff_at,
        policy_temperature: 1.0 / bc.abs(),
        scale: None,
        shift: None,
        difficulty_adjustment: None,
        source_fit: fit.clone(),
    })
}

/// Scale, shift, difficulty adjustment and temperature of a Phase 4 model.
pub fn derive_phase4_params(fit: &ModelFit) -> Result<DecisionParams> {
    let bt = fit
        .coef_of(THRESHOLD)
        .ok_or_else(|| Error::validation("fit", "no threshold coefficient"))?;
    if !(bt > 0.0) {
        return Err(Error::DegeneratePolicy(format!("threshold coefficient non-positive ({bt})")));
    }
    let b0 = coef_or_zero(fit, INTERCEPT);
    let shift = -b0 / bt;
    Ok(DecisionParams {
        phase: Phase::P4,
        t50: shift,
        policy_temperature: 1.0 / bt,
        scale: Some(-coef_or_zero(fit, CONFIDENCE) / bt),
        shift: Some(shift),
        difficulty_adjustment: Some(-coef_or_zero(fit, DIFFICULTY) / bt),
        source_fit: fit.clone(),
    })
}

impl DecisionParams {
    /// Indifference point. Phase 2 ignores `confidence` and returns the
    /// confidence threshold at `difficulty`; Phase 4 returns the instructed
    /// threshold T* = shift + scale * confidence + adjustment * difficulty,
    /// with confidence in percent.
    pub fn t50_at(&self, confidence: f64, difficulty: f64) -> f64 {
        let f = &self.source_fit;
        match self.phase {
            Phase::P4 => {
                self.shift.unwrap_or(0.0)
                    + self.scale.unwrap_or(0.0) * confidence
                    + self.difficulty_adjustment.unwrap_or(0.0) * difficulty
            }
            _ => {
                let bc = coef_or_zero(f, CONFIDENCE);
                -coef_or_zero(f, INTERCEPT) / bc - coef_or_zero(f, DIFFICULTY) / bc * difficulty
            }
        }
    }

    /// Phase 4 threshold at which abstention probability equals `p`.
    pub fn contour(&self, p: f64, confidence: f64, difficulty: f64) -> Result<f64> {
        if self.phase != Phase::P4 {
            return Err(Error::domain("contours are defined for Phase 4 models"));
        }
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::domain(format!("probability {p} outside (0, 1)")));
        }
        let logit = (p / (1.0 - p)).ln();
        Ok(self.t50_at(confidence, difficulty) + logit * self.policy_temperature)
    }
}

/// Abstention rates over a threshold x confidence-bin grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandnessGrid {
    pub thresholds: Vec<f64>,
    /// Lower edges of the confidence bins.
    pub conf_bins: Vec<f64>,
    /// `counts[t][c]` trials in each cell.
    pub counts: Vec<Vec<usize>>,
    pub abstentions: Vec<Vec<usize>>,
}

impl BandnessGrid {
    /// Builds the grid from (threshold %, confidence in [0, 1], abstained).
    pub fn from_observations(obs: impl IntoIterator<Item = (f64, f64, bool)>) -> Result<BandnessGrid> {
        let thresholds = GRID_THRESHOLDS.to_vec();
        let n_bins = (1.0 / CONF_BIN_WIDTH).round() as usize;
        let conf_bins: Vec<f64> = (0..n_bins).map(|i| i as f64 * CONF_BIN_WIDTH).collect();
        let mut counts = vec![vec![0; n_bins]; thresholds.len()];
        let mut abstentions = vec![vec![0; n_bins]; thresholds.len()];
        for (t, c, a) in obs {
            let ti = thresholds
                .iter()
                .position(|g| (g - t).abs() < 1e-9)
                .ok_or_else(|| Error::validation("instructed_threshold", format!("{t} is not on the 0..100 step 10 grid")))?;
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::validation("confidence", format!("{c} outside [0, 1]")));
            }
            let ci = ((c / CONF_BIN_WIDTH).floor() as usize).min(n_bins - 1);
            counts[ti][ci] += 1;
            abstentions[ti][ci] += usize::from(a);
        }
        Ok(BandnessGrid { thresholds, conf_bins, counts, abstentions })
    }

    /// Abstention rate per cell, `None` where the cell is empty.
    pub fn rates(&self) -> Vec<Vec<Option<f64>>> {
        self.counts
            .iter()
            .zip(&self.abstentions)
            .map(|(cs, as_)| {
                cs.iter()
                    .zip(as_)
                    .map(|(&n, &a)| if n == 0 { None } else { Some(a as f64 / n as f64) })
                    .collect()
            })
            .collect()
    }

    /// (threshold, bin centre, rate) for every non-empty cell.
    pub fn cells(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for (ti, row) in self.rates().iter().enumerate() {
            for (ci, r) in row.iter().enumerate() {
                if let Some(r) = r {
                    out.push((self.thresholds[ti], self.conf_bins[ci] + CONF_BIN_WIDTH / 2.0, *r));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bandness {
    pub index: f64,
    pub r_threshold: f64,
    pub r_confidence: f64,
}

/// (|r_C| - |r_T|) / (|r_C| + |r_T|).
pub fn bandness_from_correlations(r_threshold: f64, r_confidence: f64) -> Result<f64> {
    let (t, c) = (r_threshold.abs(), r_confidence.abs());
    if t + c == 0.0 {
        return Err(Error::domain("bandness undefined when both correlations are zero"));
    }
    Ok((c - t) / (c + t))
}

/// Correlates cell abstention rates with threshold and confidence.
pub fn bandness_index(grid: &BandnessGrid) -> Result<Bandness> {
    let cells = grid.cells();
    let distinct = |vals: Vec<f64>| {
        let mut v = vals;
        v.sort_by(f64::total_cmp);
        v.dedup();
        v.len()
    };
    if distinct(cells.iter().map(|c| c.0).collect()) < 2 || distinct(cells.iter().map(|c| c.1).collect()) < 2 {
        return Err(Error::domain("grid degenerate: need at least two thresholds and two confidence bins"));
    }
    let ts: Vec<f64> = cells.iter().map(|c| c.0).collect();
    let cs: Vec<f64> = cells.iter().map(|c| c.1).collect();
    let rs: Vec<f64> = cells.iter().map(|c| c.2).collect();
    if rs.iter().all(|r| *r == rs[0]) {
        return Err(Error::domain("bandness undefined: abstention rate is constant"));
    }
    let r_threshold = pearson_r(&rs, &ts)?;
    let r_confidence = pearson_r(&rs, &cs)?;
    Ok(Bandness { index: bandness_from_correlations(r_threshold, r_confidence)?, r_threshold, r_confidence })
}

/// Linear model of abstention-option confidence on threshold, confidence
/// and difficulty, with the threshold-free model for comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstentionConfidenceFit {
    pub full: ModelFit,
    pub without_threshold: ModelFit,
    pub r2: f64,
    pub delta_aic: f64,
}

/// Regresses the abstain-option probability on T (percent), confidence
/// (percent) and difficulty.
pub fn fit_abstention_confidence(table: &JoinedTable) -> Result<AbstentionConfidenceFit> {
    if table.rows.iter().any(|r| r.trial.option_probs.len() != 5) {
        return Err(Error::validation("option_probs", "abstention confidence needs 5-option trials"));
    }
    let y: Vec<f64> = table.rows.iter().map(|r| r.trial.abstain_prob()).collect();
    let full_d = build_design(table, &[Term::Threshold, Term::Confidence, Term::Difficulty], Phase::P4)?;
    let red_d = build_design(table, &[Term::Confidence, Term::Difficulty], Phase::P4)?;
    let full = fit_ols(&full_d, &y)?;
    let without_threshold = fit_ols(&red_d, &y)?;
    Ok(AbstentionConfidenceFit {
        r2: full.pseudo_r2,
        delta_aic: full.aic - without_threshold.aic,
        full,
        without_threshold,
    })
}

/// Variance inflation factors of the maximal Phase 2 design.
pub fn phase2_vif(table: &JoinedTable) -> Result<glm::VifReport> {
    glm::vif(&build_design(table, &[Term::Confidence, Term::Difficulty, Term::Rag], Phase::P2)?)
}

//! Trials, feature rows and fitted models on disk.
//!
//! Trials are JSON Lines, one object per line, so that collection runs can
//! append as they go. Feature tables are CSV with a fixed header. Every row is
//! validated on load and rejected outright if it breaks an invariant.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::ModelFit;

/// Tolerance on the sum of a probability vector.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Option index that means "abstain".
pub const ABSTAIN: u8 = 5;

/// The eight signed steering strengths used in steered runs.
pub const STEERING_GRID: [f64; 8] = [-2.0, -1.5, -1.0, -0.5, 0.5, 1.0, 1.5, 2.0];

/// Number of embedding principal components carried per item.
pub const N_PCS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    P1,
    P2,
    P3,
    P4,
}

impl Phase {
    pub fn parse(s: &str) -> Result<Phase> {
        match s.to_ascii_uppercase().as_str() {
            "P1" | "1" => Ok(Phase::P1),
            "P2" | "2" => Ok(Phase::P2),
            "P3" | "3" => Ok(Phase::P3),
            "P4" | "4" => Ok(Phase::P4),
            other => Err(Error::validation("phase", format!("unknown phase `{other}`"))),
        }
    }
}

fn default_true() -> bool {
    true
}

/// One presentation of one question.
///
/// Options are numbered from 1; option 5 is the abstain option when present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub item_id: String,
    pub phase: Phase,
    pub seed: u64,
    pub option_probs: Vec<f64>,
    pub chosen: u8,
    pub correct_option: u8,
    pub is_correct: bool,
    pub abstained: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instructed_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steering_strength: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<u32>,
    /// Whether `option_probs` are post-calibration.
    #[serde(default = "default_true")]
    pub calibrated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_logits: Option<Vec<f64>>,
}

impl Trial {
    pub fn validate(&self) -> Result<()> {
        if self.item_id.is_empty() {
            return Err(Error::validation("item_id", "empty"));
        }
        let n = self.option_probs.len();
        if n != 4 && n != 5 {
            return Err(Error::validation("option_probs", format!("expected 4 or 5 entries, got {n}")));
        }
        if self.option_probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(Error::validation("option_probs", "entries must lie in [0, 1]"));
        }
        let sum: f64 = self.option_probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::validation("option_probs", format!("sums to {sum}, expected 1")));
        }
        if self.chosen < 1 || self.chosen as usize > n {
            return Err(Error::validation("chosen", format!("{} is not an option of {n}", self.chosen)));
        }
        if !(1..=4).contains(&self.correct_option) {
            return Err(Error::validation("correct_option", format!("{} is not in 1..=4", self.correct_option)));
        }
        if self.abstained != (self.chosen == ABSTAIN) {
            return Err(Error::validation("abstained", "must be true exactly when chosen = 5"));
        }
        if self.is_correct != (!self.abstained && self.chosen == self.correct_option) {
            return Err(Error::validation("is_correct", "disagrees with chosen and correct_option"));
        }
        match (self.phase, self.instructed_threshold) {
            (Phase::P4, None) => return Err(Error::validation("instructed_threshold", "required for P4")),
            (Phase::P4, Some(t)) if !(0.0..=100.0).contains(&t) => {
                return Err(Error::validation("instructed_threshold", format!("{t} outside [0, 100]")))
            }
            (p, Some(_)) if p != Phase::P4 => {
                return Err(Error::validation("instructed_threshold", "only allowed for P4"))
            }
            _ => {}
        }
        match (self.phase, self.steering_strength, self.layer) {
            (Phase::P3, Some(a), Some(_)) => {
                if !STEERING_GRID.contains(&a) {
                    return Err(Error::validation("steering_strength", format!("{a} is not on the steering grid")));
                }
            }
            (Phase::P3, None, _) => return Err(Error::validation("steering_strength", "required for P3")),
            (Phase::P3, _, None) => return Err(Error::validation("layer", "required for P3")),
            (_, Some(_), _) => return Err(Error::validation("steering_strength", "only allowed for P3")),
            (_, _, Some(_)) => return Err(Error::validation("layer", "only allowed for P3")),
            _ => {}
        }
        if let Some(logits) = &self.raw_logits {
            if logits.len() != n || logits.iter().any(|z| !z.is_finite()) {
                return Err(Error::validation("raw_logits", "must be finite and match option_probs in length"));
            }
        }
        Ok(())
    }

    /// Largest probability among the four real options.
    pub fn max_real_prob(&self) -> f64 {
        self.option_probs[..4].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Probability on the abstain option, 0 when the trial offered none.
    pub fn abstain_prob(&self) -> f64 {
        self.option_probs.get(4).copied().unwrap_or(0.0)
    }

    /// Max real-option probability renormalized over the four real options.
    pub fn real_confidence(&self) -> f64 {
        let real: f64 = self.option_probs[..4].iter().sum();
        if real > 0.0 {
            self.max_real_prob() / real
        } else {
            0.25
        }
    }
}

/// A batch of trials from one phase.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PhaseRun {
    pub run_id: String,
    /// `None` only for an empty run.
    pub phase: Option<Phase>,
    pub trials: Vec<Trial>,
    pub provenance: String,
}

impl PhaseRun {
    pub fn new(run_id: impl Into<String>, trials: Vec<Trial>, provenance: impl Into<String>) -> Result<Self> {
        let run = PhaseRun {
            run_id: run_id.into(),
            phase: trials.first().map(|t| t.phase),
            trials,
            provenance: provenance.into(),
        };
        run.validate()?;
        Ok(run)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for t in &self.trials {
            t.validate()?;
            if Some(t.phase) != self.phase {
                return Err(Error::validation("phase", "all trials in a run must share one phase"));
            }
            let key = (
                t.item_id.as_str(),
                t.seed,
                t.instructed_threshold.map(f64::to_bits),
                t.steering_strength.map(f64::to_bits),
                t.layer,
            );
            if !seen.insert(key) {
                return Err(Error::validation(
                    "item_id",
                    format!("`{}` repeated within one seed/threshold/steering condition", t.item_id),
                ));
            }
        }
        Ok(())
    }
}

/// Reads a JSON Lines trial file. Blank lines are skipped.
pub fn load_trials(path: impl AsRef<Path>) -> Result<PhaseRun> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut trials = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let trial: Trial = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        trial.validate()?;
        trials.push(trial);
    }
    let run_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    PhaseRun::new(run_id, trials, path.display().to_string())
}

pub fn save_trials(trials: &[Trial], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in trials {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Per-item covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub item_id: String,
    pub difficulty: f64,
    pub rag_score: f64,
    pub embedding_pcs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_embedding: Option<Vec<f64>>,
    #[serde(default)]
    pub rag_failed: bool,
}

impl FeatureRow {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(Error::validation("difficulty", format!("{} outside [0, 1]", self.difficulty)));
        }
        if !(-1.0..=1.0).contains(&self.rag_score) {
            return Err(Error::validation("rag_score", format!("{} outside [-1, 1]", self.rag_score)));
        }
        if self.rag_failed && self.rag_score != 0.0 {
            return Err(Error::validation("rag_score", "must be 0 when retrieval failed"));
        }
        if self.embedding_pcs.len() != N_PCS {
            return Err(Error::validation(
                "embedding_pcs",
                format!("expected {N_PCS} components, got {}", self.embedding_pcs.len()),
            ));
        }
        if self.embedding_pcs.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("embedding_pcs", "non-finite component"));
        }
        Ok(())
    }
}

fn feature_header() -> Vec<String> {
    let mut h = vec!["item_id".to_string(), "difficulty".into(), "rag_score".into()];
    h.extend((1..=N_PCS).map(|i| format!("pc{i}")));
    h
}

/// Reads the features CSV (`item_id,difficulty,rag_score,pc1..pc10`).
pub fn load_features(path: impl AsRef<Path>) -> Result<Vec<FeatureRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != feature_header() {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected header {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let num = |j: usize| -> Result<f64> {
            rec[j].trim().parse::<f64>().map_err(|e| Error::Parse {
                line,
                message: format!("column {}: {e}", feature_header()[j]),
            })
        };
        let row = FeatureRow {
            item_id: rec[0].to_string(),
            difficulty: num(1)?,
            rag_score: num(2)?,
            embedding_pcs: (3..3 + N_PCS).map(num).collect::<Result<_>>()?,
            raw_embedding: None,
            rag_failed: false,
        };
        row.validate()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn save_features(rows: &[FeatureRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(feature_header())?;
    for r in rows {
        let mut rec = vec![r.item_id.clone(), r.difficulty.to_string(), r.rag_score.to_string()];
        rec.extend(r.embedding_pcs.iter().map(f64::to_string));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// A trial together with its item's covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinedRow {
    pub trial: Trial,
    pub difficulty: f64,
    pub rag_score: f64,
    pub pcs: Vec<f64>,
    /// Chosen-option confidence in [0, 1]. Taken from Phase 1 when attached,
    /// otherwise from the trial's own real-option probabilities.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct JoinedTable {
    pub rows: Vec<JoinedRow>,
}

impl JoinedTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Replaces each row's confidence with the mean Phase 1 chosen-option
    /// probability of its item.
    pub fn attach_phase1(&mut self, phase1: &PhaseRun) -> Result<()> {
        let conf = phase1_confidence(phase1)?;
        let mut missing: Vec<String> = Vec::new();
        for row in &mut self.rows {
            match conf.get(&row.trial.item_id) {
                Some(c) => row.confidence = *c,
                None => missing.push(row.trial.item_id.clone()),
            }
        }
        if !missing.is_empty() {
            missing.sort();
            missing.dedup();
            return Err(Error::Pairing(format!("no Phase 1 trial for item(s): {}", missing.join(", "))));
        }
        Ok(())
    }
}

/// Mean chosen-option probability per item over a Phase 1 run.
pub fn phase1_confidence(run: &PhaseRun) -> Result<BTreeMap<String, f64>> {
    if run.phase.is_some_and(|p| p != Phase::P1) {
        return Err(Error::validation("phase", "confidence must come from a P1 run"));
    }
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for t in &run.trials {
        let e = acc.entry(t.item_id.clone()).or_default();
        e.0 += t.option_probs[t.chosen as usize - 1];
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}

/// Attaches each trial's item covariates.
pub fn join_features(run: &PhaseRun, features: &[FeatureRow]) -> Result<JoinedTable> {
    let mut index: HashMap<&str, &FeatureRow> = HashMap::with_capacity(features.len());
    for f in features {
        if index.insert(f.item_id.as_str(), f).is_some() {
            return Err(Error::DuplicateFeature(f.item_id.clone()));
        }
    }
    let mut missing: Vec<String> = run
        .trials
        .iter()
        .filter(|t| !index.contains_key(t.item_id.as_str()))
        .map(|t| t.item_id.clone())
        .collect();
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(Error::MissingFeatures { missing });
    }
    let rows = run
        .trials
        .iter()
        .map(|t| {
            let f = index[t.item_id.as_str()];
            JoinedRow {
                trial: t.clone(),
                difficulty: f.difficulty,
                rag_score: f.rag_score,
                pcs: f.embedding_pcs.clone(),
                confidence: t.real_confidence(),
            }
        })
        .collect();
    Ok(JoinedTable { rows })
}

pub fn save_fit(fit: &ModelFit, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, fit)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_fit(path: impl AsRef<Path>) -> Result<ModelFit> {
    let fit: ModelFit = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p1(item: &str, chosen: u8, correct: u8) -> Trial {
        let mut probs = vec![0.1; 4];
        probs[chosen as usize - 1] = 0.7;
        Trial {
            item_id: item.into(),
            phase: Phase::P1,
            seed: 0,
            option_probs: probs,
            chosen,
            correct_option: correct,
            is_correct: chosen == correct,
            abstained: false,
            instructed_threshold: None,
            steering_strength: None,
            layer: None,
            calibrated: true,
            raw_logits: None,
        }
    }

    fn feature(item: &str) -> FeatureRow {
        FeatureRow {
            item_id: item.into(),
            difficulty: 0.5,
            rag_score: 0.3,
            embedding_pcs: (0..10).map(|i| i as f64 * 0.1).collect(),
            raw_embedding: None,
            rag_failed: false,
        }
    }

    fn write_lines(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_three_rows_in_order() {
        let rows: Vec<String> = ["a", "b", "c"]
            .iter()
            .map(|id| serde_json::to_string(&p1(id, 1, 2)).unwrap())
            .collect();
        let f = write_lines(&rows);
        let run = load_trials(f.path()).unwrap();
        assert_eq!(run.trials.len(), 3);
        assert_eq!(run.phase, Some(Phase::P1));
        let ids: Vec<_> = run.trials.iter().map(|t| t.item_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn rejects_probabilities_not_summing_to_one() {
        let mut t = p1("a", 1, 1);
        t.option_probs = vec![0.5, 0.1, 0.1, 0.1];
        let f = write_lines(&[serde_json::to_string(&t).unwrap()]);
        match load_trials(f.path()) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "option_probs"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_empty_run() {
        let f = write_lines(&[]);
        let run = load_trials(f.path()).unwrap();
        assert!(run.trials.is_empty());
        assert_eq!(run.phase, None);
    }

    #[test]
    fn malformed_line_names_its_number() {
        let good = serde_json::to_string(&p1("a", 1, 1)).unwrap();
        let f = write_lines(&[good, "{not json".into()]);
        match load_trials(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn phase_specific_fields_are_enforced() {
        let mut t = p1("a", 1, 1);
        t.instructed_threshold = Some(50.0);
        assert!(matches!(t.validate(), Err(Error::Validation { field, .. }) if field == "instructed_threshold"));

        let mut t = p1("a", 1, 1);
        t.phase = Phase::P4;
        t.option_probs = vec![0.6, 0.1, 0.1, 0.1, 0.1];
        assert!(t.validate().is_err());
        t.instructed_threshold = Some(50.0);
        t.validate().unwrap();

        let mut t = p1("a", 1, 1);
        t.phase = Phase::P3;
        t.steering_strength = Some(1.0);
        assert!(matches!(t.validate(), Err(Error::Validation { field, .. }) if field == "layer"));
        t.layer = Some(3);
        t.validate().unwrap();
        t.steering_strength = Some(0.7);
        assert!(t.validate().is_err());
    }

    #[test]
    fn abstention_must_match_choice() {
        let mut t = p1("a", 1, 1);
        t.option_probs = vec![0.1, 0.1, 0.1, 0.1, 0.6];
        t.chosen = 5;
        t.is_correct = false;
        assert!(t.validate().is_err());
        t.abstained = true;
        t.validate().unwrap();
    }

    #[test]
    fn duplicate_items_in_one_condition_are_rejected() {
        let err = PhaseRun::new("r", vec![p1("a", 1, 1), p1("a", 2, 1)], "").unwrap_err();
        assert!(matches!(err, Error::Validation { field, .. } if field == "item_id"));
        let mut other_seed = p1("a", 2, 1);
        other_seed.seed = 1;
        PhaseRun::new("r", vec![p1("a", 1, 1), other_seed], "").unwrap();
    }

    #[test]
    fn join_matches_each_trial() {
        let run = PhaseRun::new("r", vec![p1("a", 1, 1), p1("b", 1, 2)], "").unwrap();
        let table = join_features(&run, &[feature("a"), feature("b")]).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(table.rows[1].pcs.len(), 10);
        assert!((table.rows[0].confidence - 0.7).abs() < 1e-12);
    }

    #[test]
    fn join_lists_missing_ids() {
        let run = PhaseRun::new("r", vec![p1("a", 1, 1), p1("b", 1, 2)], "").unwrap();
        match join_features(&run, &[feature("a")]) {
            Err(Error::MissingFeatures { missing }) => assert_eq!(missing, vec!["b".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn join_rejects_duplicate_features() {
        let run = PhaseRun::new("r", vec![p1("a", 1, 1)], "").unwrap();
        let err = join_features(&run, &[feature("a"), feature("a")]).unwrap_err();
        assert!(err.to_string().contains("duplicate feature"));
    }

    #[test]
    fn phase1_confidence_replaces_own_confidence() {
        let mut t = p1("a", 1, 1);
        t.phase = Phase::P2;
        t.option_probs = vec![0.2, 0.1, 0.1, 0.1, 0.5];
        t.chosen = 5;
        t.abstained = true;
        t.is_correct = false;
        let run = PhaseRun::new("r", vec![t], "").unwrap();
        let mut table = join_features(&run, &[feature("a")]).unwrap();
        assert!((table.rows[0].confidence - 0.4).abs() < 1e-12);
        let p1run = PhaseRun::new("p1", vec![p1("a", 3, 1)], "").unwrap();
        table.attach_phase1(&p1run).unwrap();
        assert!((table.rows[0].confidence - 0.7).abs() < 1e-12);
        let other = PhaseRun::new("p1", vec![p1("z", 3, 1)], "").unwrap();
        assert!(matches!(table.attach_phase1(&other), Err(Error::Pairing(_))));
    }

    #[test]
    fn features_csv_round_trip() {
        let rows = vec![feature("a"), FeatureRow { rag_score: -0.165, ..feature("b") }];
        let f = tempfile::NamedTempFile::new().unwrap();
        save_features(&rows, f.path()).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        assert!(text.starts_with("item_id,difficulty,rag_score,pc1,pc2,pc3,pc4,pc5,pc6,pc7,pc8,pc9,pc10\n"));
        assert_eq!(load_features(f.path()).unwrap(), rows);
    }

    #[test]
    fn fit_round_trip() {
        let fit = ModelFit::example();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_fit(&fit, f.path()).unwrap();
        let back = load_fit(f.path()).unwrap();
        for (a, b) in fit.coef.iter().zip(&back.coef) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(back.predictor_names, fit.predictor_names);
    }

    #[test]
    fn empty_fit_is_a_valid_document() {
        let fit = ModelFit::empty();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_fit(&fit, f.path()).unwrap();
        assert!(load_fit(f.path()).unwrap().coef.is_empty());
    }

    #[test]
    fn save_to_missing_directory_is_io_error() {
        let err = save_fit(&ModelFit::empty(), "/nonexistent-dir/fit.json").unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    fn arb_trial() -> impl Strategy<Value = Trial> {
        (
            "[a-z]{1,8}",
            any::<u64>(),
            proptest::collection::vec(0.01f64..1.0, 5),
            1u8..=5,
            1u8..=4,
            prop::sample::select(vec![0.0, 10.0, 50.0, 100.0]),
        )
            .prop_map(|(id, seed, w, chosen, correct, thr)| {
                let s: f64 = w.iter().sum();
                let mut probs: Vec<f64> = w.iter().map(|x| x / s).collect();
                let tail: f64 = probs[..4].iter().sum();
                probs[4] = 1.0 - tail;
                Trial {
                    item_id: id,
                    phase: Phase::P4,
                    seed,
                    option_probs: probs,
                    chosen,
                    correct_option: correct,
                    is_correct: chosen == correct,
                    abstained: chosen == 5,
                    instructed_threshold: Some(thr),
                    steering_strength: None,
                    layer: None,
                    calibrated: true,
                    raw_logits: None,
                }
            })
    }

    proptest! {
        #[test]
        fn trial_json_round_trip(t in arb_trial()) {
            prop_assume!(t.validate().is_ok());
            let back: Trial = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn scaled_probabilities_are_always_rejected(t in arb_trial(), k in 0.5f64..0.99) {
            let mut bad = t;
            for p in &mut bad.option_probs { *p *= k; }
            prop_assert!(bad.validate().is_err());
        }

        #[test]
        fn feature_round_trip(d in 0.0f64..=1.0, r in -1.0f64..=1.0, pcs in proptest::collection::vec(-50.0f64..50.0, 10)) {
            let row = FeatureRow { item_id: "q".into(), difficulty: d, rag_score: r, embedding_pcs: pcs, raw_embedding: None, rag_failed: false };
            let f = tempfile::NamedTempFile::new().unwrap();
            save_features(std::slice::from_ref(&row), f.path()).unwrap();
            prop_assert_eq!(load_features(f.path()).unwrap(), vec![row]);
        }
    }
}

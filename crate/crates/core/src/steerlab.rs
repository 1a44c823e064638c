//! A synthetic two-stage agent and the activation-steering pipeline.
//!
//! The agent is a stack of residual layers acting on a `dim`-dimensional
//! stream: `x[l+1] = (I + W_l) x[l]`, with small random `W_l`. Each item
//! embeds as a large shared bias along the constant direction (so residual
//! norms are realistic), some item
//! content, a knowledge component along `confidence_direction`, and evidence
//! for each answer option along orthonormal option directions.
//!
//! Two readouts turn the stream into behaviour, both applied to the
//! layer-normed state (centred, which removes the bias, and unit length).
//! Confidence is read at the middle layer, so only steering at or before that
//! layer moves it:
//! `C = 0.25 + 0.75 * sigmoid(kappa)`. The answer is the argmax of the option
//! readouts at the last layer. The abstention policy then applies
//! `sigmoid((t50 - C) / tau)` (Phase 2) or
//! `sigmoid((T - shift - scale * C%) / tau%)` (Phase 4).
//!
//! Everything is deterministic given the seed. Randomness for an item comes
//! from a ChaCha stream keyed by SHA-256 of (seed, item, purpose), so the
//! result does not depend on thread scheduling.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::glm::sigmoid;
use crate::mediate::{MediationRecord, PreparedRow};
use crate::policy::GRID_THRESHOLDS;
use crate::trialstore::{Phase, PhaseRun, Trial, ABSTAIN, STEERING_GRID};

/// Steering vectors are scaled to this fraction of the mean residual norm.
pub const SCALE_FRACTION: f64 = 0.03;
/// Trials drawn from each end of the margin ranking.
pub const POOL_SIZE: usize = 75;
/// Trials kept in each contrast set.
pub const SET_SIZE: usize = 25;
/// Per-option cap in a contrast set (28% of 25).
pub const MAX_PER_OPTION: usize = 7;

/// ChaCha stream keyed by (seed, item, purpose).
pub fn derived_rng(seed: u64, item: &str, tag: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(item.as_bytes());
    h.update([0u8]);
    h.update(tag.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Parameters of the synthetic agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub n_layers: usize,
    pub dim: usize,
    /// Layer whose state feeds the confidence readout.
    pub readout_layer: usize,
    /// Scale of the random residual updates.
    pub mixing: f64,
    /// Norm of the shared bias, which lies along the constant direction.
    pub bias_norm: f64,
    /// Items scale their non-bias embedding by a factor drawn uniformly from
    /// `1 ± norm_spread`. Readouts normalize it away, so it only changes how
    /// strongly a fixed-norm steering vector moves the item.
    pub norm_spread: f64,
    /// Per-dimension sd of item content.
    pub content_sd: f64,
    pub knowledge_mean: f64,
    pub knowledge_sd: f64,
    /// Evidence for the correct option per unit of knowledge.
    pub evidence_gain: f64,
    pub evidence_noise: f64,
    pub option_gain: f64,
    pub confidence_gain: f64,
    pub confidence_bias: f64,
    /// Cosine between the confidence readout and `confidence_direction`.
    pub readout_alignment: f64,
    pub policy_t50: f64,
    pub policy_tau: f64,
    /// Phase 4 policy: abstain with sigmoid((T - shift - scale * C%) / tau).
    pub p4_scale: f64,
    pub p4_shift: f64,
    pub p4_tau: f64,
    /// How far one unit of steering moves the Phase 2 threshold. Zero means
    /// steering acts only through confidence.
    pub policy_steering_coupling: f64,
    pub seed: u64,
}

impl Default for AgentConfig {
    /// The tuned steering agent. Its high- and low-margin contrast sets have
    /// mean confidence near 0.64 and 0.29, and its policy is the fitted
    /// Gemma Phase 2 policy (T50 0.384, temperature 0.179).
    fn default() -> Self {
        AgentConfig {
            n_layers: 16,
            dim: 48,
            readout_layer: 8,
            mixing: 0.04,
            bias_norm: 100.0,
            norm_spread: 0.3,
            content_sd: 0.6,
            knowledge_mean: 1.0,
            knowledge_sd: 2.0,
            evidence_gain: 1.0,
            evidence_noise: 1.0,
            option_gain: 10.0,
            confidence_gain: 4.5,
            confidence_bias: -2.7,
            readout_alignment: 1.0,
            policy_t50: 0.384,
            policy_tau: 0.179,
            p4_scale: 1.0,
            p4_shift: 0.0,
            p4_tau: 10.0,
            policy_steering_coupling: 0.0,
            seed: 0,
        }
    }
}

impl AgentConfig {
    /// An agent for parameter recovery: an unbiased confidence readout, so
    /// confidence spans most of [0.25, 1], and the given Phase 2 policy.
    pub fn recovery(t50: f64, tau: f64, seed: u64) -> Self {
        AgentConfig { confidence_bias: 0.0, policy_t50: t50, policy_tau: tau, seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 8 {
            return Err(Error::validation("dim", "must be at least 8"));
        }
        if self.n_layers < 2 {
            return Err(Error::validation("n_layers", "must be at least 2"));
        }
        if self.readout_layer >= self.n_layers {
            return Err(Error::validation("readout_layer", "must be below n_layers"));
        }
        if !(self.policy_tau > 0.0) {
            return Err(Error::validation("policy_tau", "must be positive"));
        }
        if !(self.p4_tau > 0.0) {
            return Err(Error::validation("p4_tau", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.readout_alignment) {
            return Err(Error::validation("readout_alignment", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.norm_spread) {
            return Err(Error::validation("norm_spread", "must lie in [0, 1)"));
        }
        if !(self.knowledge_sd > 0.0) {
            return Err(Error::validation("knowledge_sd", "must be positive"));
        }
        Ok(())
    }
}

/// Per-layer activations of one item at the final prompt token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualTrace {
    pub item_id: String,
    pub layer_vectors: Vec<Vec<f64>>,
}

impl ResidualTrace {
    fn layer(&self, l: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.layer_vectors[l])
    }
}

/// A built agent: fixed weights derived from the config seed.
#[derive(Debug, Clone)]
pub struct Agent {
    pub config: AgentConfig,
    bias_dir: DVector<f64>,
    option_dirs: Vec<DVector<f64>>,
    /// Unit direction along which knowledge is encoded.
    pub confidence_direction: DVector<f64>,
    /// Rows 0-3 read option logits, row 4 reads confidence.
    pub readout: DMatrix<f64>,
    layers: Vec<DMatrix<f64>>,
    /// Projects onto the complement of the bias, option and confidence directions.
    content_projector: DMatrix<f64>,
}

/// One simulated presentation.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub trial: Trial,
    /// The agent's internal confidence C.
    pub confidence: f64,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// `k` orthonormal vectors, the first being the constant direction.
fn orthonormal_basis(rng: &mut ChaCha8Rng, dim: usize, k: usize) -> Vec<DVector<f64>> {
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(k);
    basis.push(DVector::from_element(dim, 1.0 / (dim as f64).sqrt()));
    while basis.len() < k {
        let mut v = gaussian_vec(rng, dim);
        for b in &basis {
            v -= b * b.dot(&v);
        }
        let n = v.norm();
        if n > 1e-8 {
            basis.push(v / n);
        }
    }
    basis
}

impl Agent {
    pub fn new(config: AgentConfig) -> Result<Agent> {
        config.validate()?;
        let dim = config.dim;
        let mut rng = derived_rng(config.seed, "", "agent");
        // bias, four options, confidence direction, and an orthogonal readout partner
        let basis = orthonormal_basis(&mut rng, dim, 7);
        let bias_dir = basis[0].clone();
        let option_dirs: Vec<DVector<f64>> = basis[1..5].to_vec();
        let u = basis[5].clone();
        let partner = basis[6].clone();
        let a = config.readout_alignment;
        let conf_readout = &u * a + &partner * (1.0 - a * a).max(0.0).sqrt();

        let mut readout = DMatrix::zeros(5, dim);
        for (i, o) in option_dirs.iter().enumerate() {
            readout.set_row(i, &(o * config.option_gain).transpose());
        }
        readout.set_row(4, &(conf_readout * config.confidence_gain).transpose());

        let keep_bias = DMatrix::identity(dim, dim) - &bias_dir * bias_dir.transpose();
        let scale = config.mixing / (dim as f64).sqrt();
        let layers = (0..config.n_layers - 1)
            .map(|_| {
                let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal) * scale);
                &keep_bias * g * &keep_bias
            })
            .collect();
        let mut content_projector = DMatrix::identity(dim, dim);
        for b in &basis {
            content_projector -= b * b.transpose();
        }
        Ok(Agent { config, bias_dir, option_dirs, confidence_direction: u, readout, layers, content_projector })
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    /// Input embedding of an item for one run. Knowledge and content are
    /// fixed per item; option positions and evidence noise vary with `run_seed`.
    pub fn embed(&self, item_id: &str, run_seed: u64) -> (DVector<f64>, u8) {
        let c = &self.config;
        let mut item_rng = derived_rng(c.seed, item_id, "item");
        let knowledge = c.knowledge_mean + c.knowledge_sd * item_rng.sample::<f64, _>(StandardNormal);
        let content = &self.content_projector * gaussian_vec(&mut item_rng, c.dim) * c.content_sd;
        let scale = 1.0 + c.norm_spread * item_rng.gen_range(-1.0..=1.0);

        let mut run_rng = derived_rng(c.seed, item_id, &format!("run:{run_seed}"));
        let correct = run_rng.gen_range(0..4usize);
        let mut x = content + &self.confidence_direction * knowledge;
        for (j, o) in self.option_dirs.iter().enumerate() {
            let noise: f64 = run_rng.sample(StandardNormal);
            let signal = if j == correct { c.evidence_gain * knowledge } else { 0.0 };
            x += o * (signal + c.evidence_noise * noise);
        }
        (x * scale + &self.bias_dir * c.bias_norm, correct as u8 + 1)
    }

    /// Runs layers `from..` starting from `start`, which becomes layer `from`.
    fn propagate(&self, vectors: &mut Vec<Vec<f64>>, from: usize, start: DVector<f64>) {
        vectors.truncate(from);
        let mut x = start;
        vectors.push(x.iter().cloned().collect());
        for w in &self.layers[from..] {
            x = &x + w * &x;
            vectors.push(x.iter().cloned().collect());
        }
    }

    pub fn forward(&self, item_id: &str, x0: DVector<f64>) -> ResidualTrace {
        let mut v = Vec::with_capacity(self.n_layers());
        self.propagate(&mut v, 0, x0);
        ResidualTrace { item_id: item_id.to_string(), layer_vectors: v }
    }

    /// Layer norm: the state centred (which removes the shared bias) and
    /// scaled to unit length.
    fn normalized(&self, trace: &ResidualTrace, l: usize) -> DVector<f64> {
        let h = trace.layer(l);
        let centred = h.add_scalar(-h.mean());
        let n = centred.norm();
        if n > 0.0 {
            centred / n
        } else {
            centred
        }
    }

    /// Internal confidence C in [0.25, 1].
    pub fn confidence(&self, trace: &ResidualTrace) -> f64 {
        let h = self.normalized(trace, self.config.readout_layer);
        let kappa = self.readout.row(4).dot(&h.transpose()) + self.config.confidence_bias;
        0.25 + 0.75 * sigmoid(kappa)
    }

    fn option_logits(&self, trace: &ResidualTrace) -> [f64; 4] {
        let h = self.normalized(trace, self.n_layers() - 1);
        let mut z = [0.0; 4];
        for (i, zi) in z.iter_mut().enumerate() {
            *zi = self.readout.row(i).dot(&h.transpose());
        }
        z
    }

    /// Probabilities over the four real options: the chosen option gets C and
    /// the rest share 1 - C by their logits, never exceeding C.
    fn real_probs(&self, z: &[f64; 4], conf: f64) -> (Vec<f64>, usize) {
        let chosen = (0..4).fold(0, |b, i| if z[i] > z[b] { i } else { b });
        let others: Vec<usize> = (0..4).filter(|&i| i != chosen).collect();
        let m = others.iter().map(|&i| z[i]).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = others.iter().map(|&i| (z[i] - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let w: Vec<f64> = e.iter().map(|v| v / s).collect();
        let w_max = w.iter().cloned().fold(0.0, f64::max);
        let rest = 1.0 - conf;
        let mix = if w_max > 1.0 / 3.0 + 1e-15 {
            ((conf / rest - 1.0 / 3.0) / (w_max - 1.0 / 3.0)).clamp(0.0, 1.0)
        } else {
            1.0
        };
        let mut p = vec![0.0; 4];
        p[chosen] = conf;
        for (k, &i) in others.iter().enumerate() {
            p[i] = rest * (mix * w[k] + (1.0 - mix) / 3.0);
        }
        (p, chosen)
    }

    /// Abstain-option probability under the phase's policy.
    pub fn abstain_probability(&self, conf: f64, phase: Phase, threshold: Option<f64>, steering: f64) -> f64 {
        let c = &self.config;
        match phase {
            Phase::P4 => {
                let t = threshold.unwrap_or(50.0);
                sigmoid((t - c.p4_shift - c.p4_scale * 100.0 * conf) / c.p4_tau)
            }
            _ => {
                let t50 = c.policy_t50 - c.policy_steering_coupling * steering;
                sigmoid((t50 - conf) / c.policy_tau)
            }
        }
    }

    /// Turns a trace into a trial. `rng` supplies the abstention draw.
    #[allow(clippy::too_many_arguments)]
    pub fn decide(
        &self,
        trace: &ResidualTrace,
        correct: u8,
        phase: Phase,
        threshold: Option<f64>,
        steering: Option<(f64, u32)>,
        run_seed: u64,
        rng: &mut ChaCha8Rng,
    ) -> Simulated {
        let conf = self.confidence(trace);
        let z = self.option_logits(trace);
        let (real, chosen) = self.real_probs(&z, conf);
        let alpha = steering.map_or(0.0, |s| s.0);
        let (option_probs, chosen) = if phase == Phase::P1 {
            (real, chosen as u8 + 1)
        } else {
            let p5 = self.abstain_probability(conf, phase, threshold, alpha);
            let mut probs: Vec<f64> = real.iter().map(|p| p * (1.0 - p5)).collect();
            probs.push(p5);
            let abstain = rng.gen::<f64>() < p5;
            (probs, if abstain { ABSTAIN } else { chosen as u8 + 1 })
        };
        let abstained = chosen == ABSTAIN;
        let trial = Trial {
            item_id: trace.item_id.clone(),
            phase: if steering.is_some() { Phase::P3 } else { phase },
            seed: run_seed,
            option_probs,
            chosen,
            correct_option: correct,
            is_correct: !abstained && chosen == correct,
            abstained,
            instructed_threshold: if phase == Phase::P4 { threshold } else { None },
            steering_strength: steering.map(|s| s.0),
            layer: steering.map(|s| s.1),
            calibrated: true,
            raw_logits: None,
        };
        Simulated { trial, confidence: conf }
    }

    /// Simulates one unsteered presentation of an item.
    pub fn present(&self, item_id: &str, phase: Phase, threshold: Option<f64>, run_seed: u64) -> (Simulated, ResidualTrace) {
        let (x0, correct) = self.embed(item_id, run_seed);
        let trace = self.forward(item_id, x0);
        let tag = match threshold {
            Some(t) => format!("decide:{phase:?}:{run_seed}:{t}"),
            None => format!("decide:{phase:?}:{run_seed}"),
        };
        let mut rng = derived_rng(self.config.seed, item_id, &tag);
        (self.decide(&trace, correct, phase, threshold, None, run_seed, &mut rng), trace)
    }
}

/// Output of [`simulate_phase`].
#[derive(Debug, Clone)]
pub struct SimRun {
    pub run: PhaseRun,
    pub traces: Vec<ResidualTrace>,
    /// Internal confidence of each trial, aligned with `run.trials`.
    pub confidences: Vec<f64>,
}

/// Item identifiers `q0000`, `q0001`, ...
pub fn item_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("q{i:04}")).collect()
}

/// Simulates a phase over `items`. Phase 4 presents every item at every
/// threshold in `thresholds`; other phases ignore them.
pub fn simulate_phase(agent: &Agent, items: &[String], phase: Phase, thresholds: &[f64], run_seed: u64) -> Result<SimRun> {
    if items.is_empty() {
        return Err(Error::validation("items", "no items to simulate"));
    }
    if phase == Phase::P3 {
        return Err(Error::validation("phase", "steered trials come from steering_sweep"));
    }
    let conditions: Vec<Option<f64>> = if phase == Phase::P4 {
        if thresholds.is_empty() {
            return Err(Error::validation("instructed_threshold", "Phase 4 needs at least one threshold"));
        }
        for t in thresholds {
            if !(0.0..=100.0).contains(t) {
                return Err(Error::validation("instructed_threshold", format!("{t} outside [0, 100]")));
            }
        }
        thresholds.iter().map(|t| Some(*t)).collect()
    } else {
        vec![None]
    };
    let jobs: Vec<(&String, Option<f64>)> = conditions.iter().flat_map(|t| items.iter().map(move |i| (i, *t))).collect();
    let out: Vec<(Simulated, ResidualTrace)> =
        jobs.par_iter().map(|(item, t)| agent.present(item, phase, *t, run_seed)).collect();
    let mut trials = Vec::with_capacity(out.len());
    let mut traces = Vec::with_capacity(out.len());
    let mut confidences = Vec::with_capacity(out.len());
    for (s, tr) in out {
        trials.push(s.trial);
        confidences.push(s.confidence);
        traces.push(tr);
    }
    let provenance = format!("synthetic agent seed {} run {run_seed}", agent.config.seed);
    Ok(SimRun { run: PhaseRun::new(format!("sim-{phase:?}-{run_seed}"), trials, provenance)?, traces, confidences })
}

/// Max real-option confidence minus abstain-option confidence.
pub fn confidence_margin(probs: &[f64]) -> Result<f64> {
    if probs.len() != 5 {
        return Err(Error::validation("option_probs", format!("margin needs 5 entries, got {}", probs.len())));
    }
    let max_real = probs[..4].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(max_real - probs[4])
}

/// Indices of the high- and low-margin contrast sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub high: Vec<usize>,
    pub low: Vec<usize>,
    pub mean_margin_high: f64,
    pub mean_margin_low: f64,
}

fn pick_balanced(order: &[usize], trials: &[Trial], pool: &'static str) -> Result<Vec<usize>> {
    let mut counts = [0usize; 4];
    for &i in order {
        counts[trials[i].chosen as usize - 1] += 1;
    }
    if counts.iter().map(|&c| c.min(MAX_PER_OPTION)).sum::<usize>() < SET_SIZE {
        return Err(Error::SelectionInfeasible { pool, counts });
    }
    let mut taken = [0usize; 4];
    let mut out = Vec::with_capacity(SET_SIZE);
    for &i in order {
        let o = trials[i].chosen as usize - 1;
        if taken[o] < MAX_PER_OPTION {
            taken[o] += 1;
            out.push(i);
            if out.len() == SET_SIZE {
                break;
            }
        }
    }
    Ok(out)
}

/// Picks 25 high-margin and 25 low-margin trials among correct, answered
/// trials, with at most 7 per chosen option in each set. Within each pool of
/// 75, trials are taken in margin order (highest first for the high set,
/// lowest first for the low set), skipping options that reached the cap.
pub fn select_contrast_trials(trials: &[Trial]) -> Result<Contrast> {
    let mut eligible: Vec<(usize, f64)> = Vec::new();
    for (i, t) in trials.iter().enumerate() {
        if t.is_correct && !t.abstained {
            eligible.push((i, confidence_margin(&t.option_probs)?));
        }
    }
    if eligible.len() < 2 * POOL_SIZE {
        return Err(Error::validation(
            "trials",
            format!("need at least {} correct answered trials, got {}", 2 * POOL_SIZE, eligible.len()),
        ));
    }
    eligible.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let top: Vec<usize> = eligible[..POOL_SIZE].iter().map(|e| e.0).collect();
    let bottom: Vec<usize> = eligible[eligible.len() - POOL_SIZE..].iter().rev().map(|e| e.0).collect();
    let high = pick_balanced(&top, trials, "high")?;
    let low = pick_balanced(&bottom, trials, "low")?;
    let margin = |i: &usize| confidence_margin(&trials[*i].option_probs).unwrap_or(f64::NAN);
    let mean = |v: &[usize]| v.iter().map(margin).sum::<f64>() / v.len() as f64;
    Ok(Contrast { mean_margin_high: mean(&high), mean_margin_low: mean(&low), high, low })
}

/// Per-layer steering directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    pub layers: Vec<Vec<f64>>,
    pub scale_fraction: f64,
    /// Mean residual norm per layer over the contrast trials.
    pub mean_norms: Vec<f64>,
    pub n_high: usize,
    pub n_low: usize,
    /// True when the two groups had identical means at some layer.
    pub degenerate: bool,
}

impl SteeringVector {
    /// The opposite vector, v_low = -v_high.
    pub fn negated(&self) -> SteeringVector {
        SteeringVector { layers: self.layers.iter().map(|v| v.iter().map(|x| -x).collect()).collect(), ..self.clone() }
    }

    /// A vector along a fixed direction at every layer, scaled like a
    /// contrast vector.
    pub fn along(direction: &[f64], mean_norms: &[f64], scale_fraction: f64) -> Result<SteeringVector> {
        let n = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::domain("zero steering direction"));
        }
        let layers = mean_norms
            .iter()
            .map(|m| direction.iter().map(|x| x / n * scale_fraction * m).collect())
            .collect();
        Ok(SteeringVector {
            layers,
            scale_fraction,
            mean_norms: mean_norms.to_vec(),
            n_high: 0,
            n_low: 0,
            degenerate: false,
        })
    }
}

/// v = mean(H) - mean(L) per layer, rescaled to `scale_fraction` times the
/// mean residual norm of that layer over H and L.
pub fn build_steering_vector(high: &[ResidualTrace], low: &[ResidualTrace], scale_fraction: f64) -> Result<SteeringVector> {
    if high.is_empty() || low.is_empty() {
        return Err(Error::validation("traces", "both contrast groups must be non-empty"));
    }
    let n_layers = high[0].layer_vectors.len();
    let dim = high[0].layer_vectors.first().map_or(0, Vec::len);
    for t in high.iter().chain(low) {
        if t.layer_vectors.len() != n_layers || t.layer_vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::validation("traces", "traces differ in layer count or width"));
        }
    }
    let mean_at = |set: &[ResidualTrace], l: usize| {
        let mut m = vec![0.0; dim];
        for t in set {
            for (a, b) in m.iter_mut().zip(&t.layer_vectors[l]) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|a| *a /= set.len() as f64);
        m
    };
    let mut layers = Vec::with_capacity(n_layers);
    let mut mean_norms = Vec::with_capacity(n_layers);
    let mut degenerate = false;
    for l in 0..n_layers {
        let (mh, ml) = (mean_at(high, l), mean_at(low, l));
        let diff: Vec<f64> = mh.iter().zip(&ml).map(|(a, b)| a - b).collect();
        let norm = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mean_norm = high
            .iter()
            .chain(low)
            .map(|t| t.layer_vectors[l].iter().map(|x| x * x).sum::<f64>().sqrt())
            .sum::<f64>()
            / (high.len() + low.len()) as f64;
        mean_norms.push(mean_norm);
        if norm == 0.0 {
            degenerate = true;
            layers.push(diff);
        } else {
            let k = scale_fraction * mean_norm / norm;
            layers.push(diff.iter().map(|x| x * k).collect());
        }
    }
    Ok(SteeringVector { layers, scale_fraction, mean_norms, n_high: high.len(), n_low: low.len(), degenerate })
}

/// Adds `alpha * v[layer]` to the residual at `layer` and recomputes every
/// later layer.
pub fn apply_steering(agent: &Agent, trace: &ResidualTrace, vector: &SteeringVector, alpha: f64, layer: usize) -> Result<ResidualTrace> {
    if layer >= trace.layer_vectors.len() || layer >= vector.layers.len() {
        return Err(Error::validation("layer", format!("{layer} is out of range")));
    }
    if !alpha.is_finite() || alpha.abs() > 2.0 + 1e-12 {
        return Err(Error::validation("alpha", format!("{alpha} outside [-2, 2]")));
    }
    let x = trace.layer(layer) + DVector::from_column_slice(&vector.layers[layer]) * alpha;
    let mut out = trace.clone();
    agent.propagate(&mut out.layer_vectors, layer, x);
    Ok(out)
}

/// One cell of a steering sweep; `alpha = 0` marks the unsteered baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub layer: Option<u32>,
    pub n: usize,
    pub abstention_rate: f64,
    pub delta_max_real_conf: f64,
    pub delta_abstain_conf: f64,
    #[serde(with = "crate::serde_nan")]
    pub accuracy_on_answered: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub records: Vec<MediationRecord>,
}

impl SweepResult {
    /// Abstention rate per alpha, averaged over layers, in alpha order.
    pub fn abstention_by_alpha(&self) -> Vec<(f64, f64)> {
        let mut acc: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.layer.is_some()) {
            let e = acc.entry((r.alpha * 1000.0).round() as i64).or_default();
            e.0 += r.abstention_rate;
            e.1 += 1.0;
        }
        acc.into_iter().map(|(k, (s, n))| (k as f64 / 1000.0, s / n)).collect()
    }
}

/// Steers every item at every (alpha, layer) and pairs each steered trial
/// with the item's unsteered Phase 2 baseline. Difficulty is attached to the
/// mediation records when given.
pub fn steering_sweep(
    agent: &Agent,
    items: &[String],
    vector: &SteeringVector,
    alphas: &[f64],
    layers: &[usize],
    run_seed: u64,
    difficulty: Option<&BTreeMap<String, f64>>,
) -> Result<SweepResult> {
    if items.is_empty() || alphas.is_empty() || layers.is_empty() {
        return Err(Error::validation("sweep", "items, alphas and layers must be non-empty"));
    }
    for a in alphas {
        if !STEERING_GRID.contains(a) {
            return Err(Error::validation("alpha", format!("{a} is not on the steering grid")));
        }
    }
    struct ItemOut {
        base: Trial,
        steered: Vec<(f64, usize, Trial)>,
    }
    let per_item: Vec<ItemOut> = items
        .par_iter()
        .map(|item| {
            let (base, trace) = agent.present(item, Phase::P2, None, run_seed);
            let (_, correct) = agent.embed(item, run_seed);
            let mut steered = Vec::with_capacity(alphas.len() * layers.len());
            for &l in layers {
                for &a in alphas {
                    let t = apply_steering(agent, &trace, vector, a, l)?;
                    // Common random numbers: every cell reuses the item's draw, so
                    // sampled abstention inherits the monotonicity of its probability.
                    let mut rng = derived_rng(agent.config.seed, item, &format!("steer:{run_seed}"));
                    let s = agent.decide(&t, correct, Phase::P2, None, Some((a, l as u32)), run_seed, &mut rng);
                    steered.push((a, l, s.trial));
                }
            }
            Ok(ItemOut { base: base.trial, steered })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let summarize = |alpha: f64, layer: Option<u32>, pairs: &[(&Trial, &Trial)]| {
        let n = pairs.len();
        let abst = pairs.iter().filter(|p| p.1.abstained).count();
        let answered: Vec<&&Trial> = pairs.iter().map(|p| &p.1).filter(|t| !t.abstained).collect();
        let correct = answered.iter().filter(|t| t.is_correct).count();
        SweepRow {
            alpha,
            layer,
            n,
            abstention_rate: abst as f64 / n as f64,
            delta_max_real_conf: pairs.iter().map(|(b, s)| s.max_real_prob() - b.max_real_prob()).sum::<f64>() / n as f64,
            delta_abstain_conf: pairs.iter().map(|(b, s)| s.abstain_prob() - b.abstain_prob()).sum::<f64>() / n as f64,
            accuracy_on_answered: if answered.is_empty() { f64::NAN } else { correct as f64 / answered.len() as f64 },
        }
    };
    let base_pairs: Vec<(&Trial, &Trial)> = per_item.iter().map(|o| (&o.base, &o.base)).collect();
    rows.push(summarize(0.0, None, &base_pairs));
    for (k, &l) in layers.iter().enumerate() {
        for (j, &a) in alphas.iter().enumerate() {
            let idx = k * alphas.len() + j;
            let pairs: Vec<(&Trial, &Trial)> = per_item.iter().map(|o| (&o.base, &o.steered[idx].2)).collect();
            rows.push(summarize(a, Some(l as u32), &pairs));
        }
    }

    let mut records = Vec::with_capacity(items.len() * alphas.len() * layers.len());
    for o in &per_item {
        for (a, l, t) in &o.steered {
            records.push(MediationRecord {
                item_id: t.item_id.clone(),
                x: *a,
                layer: Some(*l as u32),
                abstained: t.abstained,
                c_max: t.max_real_prob(),
                c_abstain: t.abstain_prob(),
                baseline_c_max: Some(o.base.max_real_prob()),
                baseline_c_abstain: Some(o.base.abstain_prob()),
                baseline_abstained: Some(o.base.abstained),
                difficulty: difficulty.and_then(|d| d.get(&t.item_id).copied()),
            });
        }
    }
    Ok(SweepResult { rows, records })
}

/// Runs the whole steering pipeline: a Phase 2 calibration run, contrast
/// selection, vector construction, and a sweep over `eval_items`.
pub fn steering_pipeline(
    agent: &Agent,
    train_items: &[String],
    eval_items: &[String],
    alphas: &[f64],
    layers: &[usize],
    run_seed: u64,
    difficulty: Option<&BTreeMap<String, f64>>,
) -> Result<(Contrast, SteeringVector, SweepResult)> {
    let sim = simulate_phase(agent, train_items, Phase::P2, &[], run_seed)?;
    let contrast = select_contrast_trials(&sim.run.trials)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| sim.traces[i].clone()).collect::<Vec<_>>();
    let vector = build_steering_vector(&pick(&contrast.high), &pick(&contrast.low), SCALE_FRACTION)?;
    let sweep = steering_sweep(agent, eval_items, &vector, alphas, layers, run_seed.wrapping_add(1), difficulty)?;
    Ok((contrast, vector, sweep))
}

/// How the confidence reported alongside a Phase 4 decision is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceTiming {
    /// Reported confidence is the input to the decision.
    PreDecisional,
    /// Reported confidence is produced after, and encodes, the decision.
    PostDecisional,
}

/// (threshold %, reported confidence, abstained) observations for the
/// bandness diagnostic. Thresholds are uniform on the 0..100 grid and latent
/// confidence is uniform on [0, 1].
pub fn bandness_observations(timing: ConfidenceTiming, n: usize, tau: f64, seed: u64) -> Vec<(f64, f64, bool)> {
    let mut rng = derived_rng(seed, "", "bandness");
    (0..n)
        .map(|_| {
            let t = GRID_THRESHOLDS[rng.gen_range(0..GRID_THRESHOLDS.len())];
            let c: f64 = rng.gen();
            let abstain = rng.gen::<f64>() < sigmoid((t / 100.0 - c) / tau);
            let reported = match timing {
                ConfidenceTiming::PreDecisional => c,
                ConfidenceTiming::PostDecisional => {
                    if abstain {
                        rng.gen_range(0.0..0.5)
                    } else {
                        rng.gen_range(0.5..1.0)
                    }
                }
            };
            (t, reported, abstain)
        })
        .collect()
}

/// Row-level mediation data with known paths:
/// `m1 = a1 x + u_item + e1`, `m2 = a2 x + e2`,
/// `y ~ Bernoulli(sigmoid(intercept + c_prime x + b1 m1 + b2 m2))`,
/// with `u_item ~ U(-0.1, 0.1)`, `e1 ~ U(-0.15, 0.15)`, `e2 ~ U(-0.06, 0.06)`,
/// and one row per item at each grid strength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MediationGenerator {
    pub n_items: usize,
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    pub b2: f64,
    pub c_prime: f64,
    pub intercept: f64,
}

impl MediationGenerator {
    pub fn new(n_items: usize, b1: f64, b2: f64) -> Self {
        MediationGenerator { n_items, a1: 0.1, a2: -0.02, b1, b2, c_prime: -0.1, intercept: -0.5 }
    }

    pub fn indirect1(&self) -> f64 {
        self.a1 * self.b1
    }

    pub fn indirect2(&self) -> f64 {
        self.a2 * self.b2
    }

    pub fn rows(&self, seed: u64) -> Vec<PreparedRow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::with_capacity(self.n_items * STEERING_GRID.len());
        for i in 0..self.n_items {
            let u: f64 = rng.gen_range(-0.1..0.1);
            for &x in &STEERING_GRID {
                let m1 = self.a1 * x + u + rng.gen_range(-0.15..0.15);
                let m2 = self.a2 * x + rng.gen_range(-0.06..0.06);
                let eta = self.intercept + self.c_prime * x + self.b1 * m1 + self.b2 * m2;
                let y = rng.gen::<f64>() < sigmoid(eta);
                rows.push(PreparedRow { item_id: format!("i{i}"), x, y, m1, m2, difficulty: Some(rng.gen()) });
            }
        }
        rows
    }
}

//! Item covariates: multi-seed difficulty, retrieval similarity and
//! embedding principal components.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::linalg::rank;
use crate::steerlab::{derived_rng, Agent};
use crate::trialstore::{FeatureRow, Phase, PhaseRun, N_PCS};

/// Seeded runs per item for the difficulty score.
pub const DIFFICULTY_SEEDS: usize = 20;
pub const RETRIEVE_TOP_K: usize = 5;
pub const MAX_CONTEXTS: usize = 3;
pub const SNIPPET_CHARS: usize = 500;
pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyScore {
    pub item_id: String,
    pub n_seeds: usize,
    pub n_correct: usize,
    pub score: f64,
}

/// Fraction of runs answering each item correctly. Every item must appear in
/// every run; repeated trials of an item within a run are all counted.
pub fn difficulty(runs: &[PhaseRun]) -> Result<Vec<DifficultyScore>> {
    if runs.is_empty() {
        return Err(Error::validation("runs", "need at least one run"));
    }
    let per_run: Vec<BTreeMap<&str, (usize, usize)>> = runs
        .iter()
        .map(|r| {
            let mut m: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
            for t in &r.trials {
                let e = m.entry(t.item_id.as_str()).or_default();
                e.0 += t.is_correct as usize;
                e.1 += 1;
            }
            m
        })
        .collect();
    let mut items: Vec<&str> = per_run.iter().flat_map(|m| m.keys().copied()).collect();
    items.sort_unstable();
    items.dedup();
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let (mut k, mut n) = (0, 0);
        for (run, m) in runs.iter().zip(&per_run) {
            let (c, t) = m.get(item).ok_or_else(|| {
                Error::validation("runs", format!("item `{item}` missing from run `{}`", run.run_id))
            })?;
            k += c;
            n += t;
        }
        out.push(DifficultyScore { item_id: item.to_string(), n_seeds: n, n_correct: k, score: k as f64 / n as f64 });
    }
    Ok(out)
}

/// Phase 1 runs of the synthetic agent under `n_seeds` run seeds. Each seed
/// redraws the position of the correct option.
pub fn simulate_difficulty_runs(agent: &Agent, items: &[String], n_seeds: usize) -> Result<Vec<PhaseRun>> {
    (0..n_seeds as u64)
        .map(|s| crate::steerlab::simulate_phase(agent, items, Phase::P1, &[], s).map(|r| r.run))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RagScore {
    pub score: f64,
    pub n_retrieved: usize,
    pub failed: bool,
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::domain(format!("embedding dimensions differ ({} vs {})", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::domain("zero-norm embedding"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Maximum cosine similarity between a question and its retrieved contexts.
/// An empty retrieval scores 0 and is flagged as failed.
pub fn rag_score(question: &[f64], retrieved: &[Vec<f64>]) -> Result<RagScore> {
    if retrieved.is_empty() {
        if norm(question) == 0.0 {
            return Err(Error::domain("zero-norm embedding"));
        }
        return Ok(RagScore { score: 0.0, n_retrieved: 0, failed: true });
    }
    let mut best = f64::NEG_INFINITY;
    for r in retrieved {
        best = best.max(cosine(question, r)?);
    }
    Ok(RagScore { score: best, n_retrieved: retrieved.len(), failed: false })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// k x d, orthonormal rows.
    pub components: DMatrix<f64>,
    /// n x k.
    pub scores: DMatrix<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

/// Centred (unscaled) PCA via SVD. Each component is signed so that its
/// largest-magnitude loading is positive.
pub fn pca_components(x: &DMatrix<f64>, k: usize) -> Result<Pca> {
    let (n, d) = x.shape();
    if k == 0 || n <= k || d < k {
        return Err(Error::validation("k", format!("need 0 < k < n and k <= d (n = {n}, d = {d}, k = {k})")));
    }
    let means = x.row_mean();
    let mut centred = x.clone();
    for mut row in centred.row_iter_mut() {
        row -= &means;
    }
    let r = rank(&centred);
    if r < k {
        return Err(Error::Rank { rank: r, columns: k });
    }
    let svd = centred.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let mut components = DMatrix::zeros(k, d);
    let mut ratios = Vec::with_capacity(k);
    for (i, &j) in order.iter().take(k).enumerate() {
        let mut row = v_t.row(j).clone_owned();
        let pivot = row.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            row = -row;
        }
        components.set_row(i, &row);
        ratios.push(svd.singular_values[j].powi(2) / total);
    }
    let scores = &centred * components.transpose();
    Ok(Pca { components, scores, explained_variance_ratio: ratios })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub text: String,
}

/// Reads a JSON Lines corpus of `{doc_id, title, text}`.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let reader = BufReader::new(File::open(path)?);
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?);
    }
    Ok(docs)
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Okapi BM25 over title and text.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    docs: Vec<Document>,
    term_freqs: Vec<HashMap<String, usize>>,
    doc_lens: Vec<usize>,
    avg_len: f64,
    doc_freq: HashMap<String, usize>,
}

impl Bm25Index {
    pub fn new(docs: Vec<Document>) -> Bm25Index {
        let mut term_freqs = Vec::with_capacity(docs.len());
        let mut doc_lens = Vec::with_capacity(docs.len());
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        for d in &docs {
            let tokens = tokenize(&format!("{} {}", d.title, d.text));
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            doc_lens.push(tokens.len());
            term_freqs.push(tf);
        }
        let avg_len = if docs.is_empty() { 0.0 } else { doc_lens.iter().sum::<usize>() as f64 / docs.len() as f64 };
        Bm25Index { docs, term_freqs, doc_lens, avg_len, doc_freq }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = *self.doc_freq.get(term).unwrap_or(&0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Documents with a positive score, best first; ties break on corpus order.
    pub fn search(&self, query: &str, top_k: usize) -> Vec<(&Document, f64)> {
        let mut terms = tokenize(query);
        terms.sort_unstable();
        terms.dedup();
        let mut scored: Vec<(usize, f64)> = (0..self.docs.len())
            .filter_map(|i| {
                let tf = &self.term_freqs[i];
                let norm = BM25_K1 * (1.0 - BM25_B + BM25_B * self.doc_lens[i] as f64 / self.avg_len.max(1e-12));
                let s: f64 = terms
                    .iter()
                    .filter_map(|t| tf.get(t).map(|&f| (t, f as f64)))
                    .map(|(t, f)| self.idf(t) * f * (BM25_K1 + 1.0) / (f + norm))
                    .sum();
                (s > 0.0).then_some((i, s))
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(top_k);
        scored.into_iter().map(|(i, s)| (&self.docs[i], s)).collect()
    }
}

fn snippet(text: &str) -> String {
    text.chars().take(SNIPPET_CHARS).collect()
}

/// Up to three snippets of at most 500 characters from the top five matches.
/// No match gives an empty list, which scores as a failed retrieval.
pub fn retrieve_contexts(question: &str, index: &Bm25Index) -> Vec<String> {
    index
        .search(question, RETRIEVE_TOP_K)
        .into_iter()
        .take(MAX_CONTEXTS)
        .map(|(d, _)| snippet(&d.text))
        .collect()
}

/// Pre-computed embeddings for one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemEmbeddings {
    pub item_id: String,
    pub question: Vec<f64>,
    #[serde(default)]
    pub contexts: Vec<Vec<f64>>,
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<ItemEmbeddings>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

/// Random question and context embeddings. Context similarity to the question
/// varies per item and does not depend on anything else about the item.
pub fn synthetic_embeddings(items: &[String], dim: usize, seed: u64) -> Vec<ItemEmbeddings> {
    items
        .par_iter()
        .map(|id| {
            let mut rng: ChaCha8Rng = derived_rng(seed, id, "embedding");
            let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
            let question = gauss(dim);
            let n_ctx = (gauss(1)[0].abs() * 2.0) as usize % (MAX_CONTEXTS + 1);
            let overlap = gauss(1)[0].abs().min(2.0);
            let contexts = (0..n_ctx)
                .map(|_| gauss(dim).into_iter().zip(&question).map(|(z, q)| z + overlap * q).collect())
                .collect();
            ItemEmbeddings { item_id: id.clone(), question, contexts }
        })
        .collect()
}

/// Assembles feature rows. Items are ordered by id; the first `N_PCS`
/// principal components of the question embeddings become `embedding_pcs`.
pub fn build_features(difficulty: &[DifficultyScore], embeddings: &[ItemEmbeddings]) -> Result<Vec<FeatureRow>> {
    let diff: HashMap<&str, f64> = difficulty.iter().map(|d| (d.item_id.as_str(), d.score)).collect();
    let mut emb: Vec<&ItemEmbeddings> = embeddings.iter().collect();
    emb.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    if let Some(w) = emb.windows(2).find(|w| w[0].item_id == w[1].item_id) {
        return Err(Error::DuplicateFeature(w[0].item_id.clone()));
    }
    let missing: Vec<String> = emb.iter().filter(|e| !diff.contains_key(e.item_id.as_str())).map(|e| e.item_id.clone()).collect();
    if !missing.is_empty() {
        return Err(Error::validation("difficulty", format!("no score for item(s): {}", missing.join(", "))));
    }
    let d = emb.first().map_or(0, |e| e.question.len());
    if emb.iter().any(|e| e.question.len() != d) {
        return Err(Error::validation("embeddings", "question embeddings differ in dimension"));
    }
    let x = DMatrix::from_row_iterator(emb.len(), d, emb.iter().flat_map(|e| e.question.iter().cloned()));
    let pca = pca_components(&x, N_PCS)?;
    emb.iter()
        .enumerate()
        .map(|(i, e)| {
            let rag = rag_score(&e.question, &e.contexts)?;
            let row = FeatureRow {
                item_id: e.item_id.clone(),
                difficulty: diff[e.item_id.as_str()],
                rag_score: rag.score,
                embedding_pcs: pca.scores.row(i).iter().cloned().collect(),
                raw_embedding: None,
                rag_failed: rag.failed,
            };
            row.validate()?;
            Ok(row)
        })
        .collect()
}

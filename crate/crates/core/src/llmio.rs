//! Chat-completion client for collecting real-model trials.
//!
//! Requests go through a [`Transport`]. The [`Client`] adds record/replay on
//! top: recordings are JSON Lines of `{hash, request, response}` keyed by the
//! SHA-256 of the canonical request, and replay never touches the transport.
//! The API key is read from `ABSTAIN_API_KEY` and never written anywhere.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::trialstore::{Phase, Trial, ABSTAIN};

pub const API_KEY_VAR: &str = "ABSTAIN_API_KEY";
pub const API_BASE_VAR: &str = "ABSTAIN_API_BASE";
pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";
pub const ANSWER_MAX_TOKENS: u32 = 3;
pub const TOP_LOGPROBS: u32 = 20;
const MAX_ATTEMPTS: u32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_name: String,
    pub prompt: String,
    pub max_tokens: u32,
    pub sampling_temperature: f64,
    pub want_logprobs: bool,
}

impl CompletionRequest {
    /// Greedy decoding with room for a short numeric answer.
    pub fn greedy(model_name: impl Into<String>, prompt: impl Into<String>) -> Self {
        CompletionRequest {
            model_name: model_name.into(),
            prompt: prompt.into(),
            max_tokens: ANSWER_MAX_TOKENS,
            sampling_temperature: 0.0,
            want_logprobs: true,
        }
    }

    /// For APIs that only expose logprobs when sampling.
    pub fn sampled(model_name: impl Into<String>, prompt: impl Into<String>, temperature: f64) -> Self {
        CompletionRequest { sampling_temperature: temperature, ..Self::greedy(model_name, prompt) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tokens < 1 {
            return Err(Error::validation("max_tokens", "must be at least 1"));
        }
        if !(self.sampling_temperature >= 0.0) {
            return Err(Error::validation("sampling_temperature", "must be >= 0"));
        }
        Ok(())
    }

    /// Hex SHA-256 over model, prompt and every decoding parameter.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(canonical))
    }

    /// OpenAI-compatible request body.
    pub fn wire_body(&self) -> Value {
        let mut body = json!({
            "model": self.model_name,
            "messages": [{"role": "user", "content": self.prompt}],
            "max_tokens": self.max_tokens,
            "temperature": self.sampling_temperature,
        });
        if self.want_logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(TOP_LOGPROBS);
        }
        body
    }
}

/// Sends one request and returns the raw response body.
pub trait Transport: Send + Sync {
    fn send(&self, request: &CompletionRequest) -> Result<String>;
}

/// HTTP transport with basic exponential backoff.
pub struct LiveTransport {
    endpoint: String,
    api_key: String,
    agent: ureq::Agent,
}

impl LiveTransport {
    /// Reads the key from `ABSTAIN_API_KEY` and the endpoint from
    /// `ABSTAIN_API_BASE`, falling back to the public chat endpoint.
    pub fn from_env() -> Result<LiveTransport> {
        let api_key = std::env::var(API_KEY_VAR)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| Error::Config(format!("live mode needs {API_KEY_VAR} to be set")))?;
        let endpoint = std::env::var(API_BASE_VAR).unwrap_or_else(|_| DEFAULT_ENDPOINT.to_string());
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(60)).build();
        Ok(LiveTransport { endpoint, api_key, agent })
    }
}

impl Transport for LiveTransport {
    fn send(&self, request: &CompletionRequest) -> Result<String> {
        let body = request.wire_body();
        let mut last = String::new();
        for attempt in 0..MAX_ATTEMPTS {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(500 << attempt));
            }
            let resp = self
                .agent
                .post(&self.endpoint)
                .set("Authorization", &format!("Bearer {}", self.api_key))
                .send_json(body.clone());
            match resp {
                Ok(r) => return r.into_string().map_err(|e| Error::Transport(e.to_string())),
                Err(ureq::Error::Status(code, r)) if code == 429 || code >= 500 => {
                    last = format!("HTTP {code}: {}", r.into_string().unwrap_or_default());
                }
                Err(ureq::Error::Status(code, r)) => {
                    return Err(Error::Transport(format!("HTTP {code}: {}", r.into_string().unwrap_or_default())));
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(Error::Transport(last))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Live,
    Record,
    Replay,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "live" => Ok(Mode::Live),
            "record" => Ok(Mode::Record),
            "replay" => Ok(Mode::Replay),
            other => Err(Error::validation("mode", format!("expected live, record or replay, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub hash: String,
    pub request: CompletionRequest,
    pub response: String,
}

pub fn load_recordings(path: impl AsRef<Path>) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    let reader = BufReader::new(File::open(path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Recording = serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        out.insert(rec.hash, rec.response);
    }
    Ok(out)
}

pub struct Client {
    mode: Mode,
    transport: Option<Box<dyn Transport>>,
    cache: HashMap<String, String>,
    writer: Option<Mutex<File>>,
}

impl Client {
    /// `transport` is required for live and record modes and unused in
    /// replay. `recordings` is required for record and replay modes.
    pub fn new(mode: Mode, transport: Option<Box<dyn Transport>>, recordings: Option<PathBuf>) -> Result<Client> {
        let needs_file = || Error::Config(format!("{mode:?} mode needs a recordings file"));
        let (cache, writer) = match mode {
            Mode::Live => (HashMap::new(), None),
            Mode::Record => {
                let path = recordings.ok_or_else(needs_file)?;
                let f = OpenOptions::new().create(true).append(true).open(path)?;
                (HashMap::new(), Some(Mutex::new(f)))
            }
            Mode::Replay => (load_recordings(recordings.ok_or_else(needs_file)?)?, None),
        };
        if mode != Mode::Replay && transport.is_none() {
            return Err(Error::Config(format!("{mode:?} mode needs a transport")));
        }
        Ok(Client { mode, transport, cache, writer })
    }

    /// A client whose live transport reads credentials from the environment.
    pub fn from_env(mode: Mode, recordings: Option<PathBuf>) -> Result<Client> {
        let transport: Option<Box<dyn Transport>> = match mode {
            Mode::Replay => None,
            _ => Some(Box::new(LiveTransport::from_env()?)),
        };
        Client::new(mode, transport, recordings)
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<String> {
        request.validate()?;
        let hash = request.hash();
        if self.mode == Mode::Replay {
            return self.cache.get(&hash).cloned().ok_or(Error::CacheMiss { hash });
        }
        let response = self.transport.as_ref().expect("checked in new").send(request)?;
        if let Some(w) = &self.writer {
            let rec = Recording { hash, request: request.clone(), response: response.clone() };
            let mut line = serde_json::to_vec(&rec)?;
            line.push(b'\n');
            let mut f = w.lock().expect("recording writer poisoned");
            f.write_all(&line)?;
            f.flush()?;
        }
        Ok(response)
    }

    /// Runs requests with at most `max_in_flight` outstanding; results keep
    /// the input order.
    pub fn complete_many(&self, requests: &[CompletionRequest], max_in_flight: usize) -> Result<Vec<Result<String>>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(max_in_flight.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(pool.install(|| requests.par_iter().map(|r| self.complete(r)).collect()))
    }
}

/// Top alternatives at the first generated position.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerLogprobs {
    pub top: Vec<(String, f64)>,
    /// The answer spanned more than one generated token with content.
    pub multi_token: bool,
}

/// Reads `choices[0].logprobs.content` from a chat-completion body.
pub fn parse_answer_logprobs(body: &str) -> Result<AnswerLogprobs> {
    let v: Value = serde_json::from_str(body)?;
    let content = v["choices"][0]["logprobs"]["content"]
        .as_array()
        .filter(|c| !c.is_empty())
        .ok_or_else(|| Error::Extraction { dump: "response carries no logprobs".into() })?;
    let top = content[0]["top_logprobs"]
        .as_array()
        .ok_or_else(|| Error::Extraction { dump: "first position has no top_logprobs".into() })?
        .iter()
        .filter_map(|t| Some((t["token"].as_str()?.to_string(), t["logprob"].as_f64()?)))
        .collect();
    let multi_token = content.iter().filter(|c| c["token"].as_str().is_some_and(|s| !s.trim().is_empty())).count() > 1;
    Ok(AnswerLogprobs { top, multi_token })
}

/// Probability over options 1..=n_options from one position's top
/// logprobs. `"k"` and `" k"` are merged, then the found mass is renormalized.
pub fn extract_answer_distribution(top: &[(String, f64)], n_options: usize) -> Result<Vec<f64>> {
    if !(n_options == 4 || n_options == 5) {
        return Err(Error::validation("n_options", format!("expected 4 or 5, got {n_options}")));
    }
    let mut mass = vec![0.0; n_options];
    for (token, lp) in top {
        let t = token.strip_prefix(' ').unwrap_or(token);
        if let Ok(k) = t.parse::<usize>() {
            if (1..=n_options).contains(&k) && t.len() == 1 {
                mass[k - 1] += lp.exp();
            }
        }
    }
    let total: f64 = mass.iter().sum();
    if !(total > 0.0) {
        let dump = top.iter().map(|(t, lp)| format!("{t:?}:{lp:.3}")).collect::<Vec<_>>().join(", ");
        return Err(Error::Extraction { dump });
    }
    Ok(mass.into_iter().map(|m| m / total).collect())
}

/// Phase 4 prompt wording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PromptVariant {
    #[default]
    Standard,
    /// The paraphrase that elicited reliable abstention from Gemma-class models.
    Gemma,
}

const RULE: &str = "Remember, that your answer should be a single number, no spaces, no punctuation, no words.";

const PHASE1: &str = "You will be given a 4-way multiple choice question, with options 1-4. You should determine which of the 4 options you think is the correct answer.";

const PHASE2: &str = "You will be given a 4-way multiple choice question. Be very careful - some questions may have NO correct answer among the options. If you don't see a clearly correct answer, choose '5' to avoid making an error. It's better to be safe than sorry.";

const PHASE4: &str = "You will be given a 4-way multiple choice question, with options 1-4. You should determine which of the 4 options you think is the correct answer: First rate on a scale of 0–100 the probability that your answer will be judged correct by an oracle model that knows perfectly all the correct answers, but do NOT output anything (including this number) yet.Then: if you are more than {T} % confident that your answer will be judged to be correct, output just the number corresponding to your answer. However, if you are less than {T} % confident that your answer will be judged to be correct, then output the number '5' which means you wish to seek the advice of an oracle LLM.";

const PHASE4_GEMMA: &str = "You are given a 4-way multiple choice question, with choices numbered 1-4. Identify the choice that is correct: Begin by judging on a 0–100 scale what probability there is that your choice will be verified as correct by an oracle model having perfect information, maintaining this judgment internally. Then: should your confidence be above {T}%, state only the number of your choice. Should your confidence be below {T}%, state the number '5' which signals you wish to access an oracle LLM for help.";

/// Instructed thresholds must be 0, 10, ..., 100.
pub fn validate_threshold(t: f64) -> Result<u32> {
    if (0.0..=100.0).contains(&t) && t % 10.0 == 0.0 {
        Ok(t as u32)
    } else {
        Err(Error::validation("threshold", format!("{t} is not one of 0, 10, ..., 100")))
    }
}

/// The exact instruction for a phase followed by the question and its four
/// numbered options. Phase 3 reuses the Phase 2 prompt.
pub fn build_phase_prompt(
    phase: Phase,
    question: &str,
    options: &[String],
    threshold: Option<f64>,
    variant: PromptVariant,
) -> Result<String> {
    if options.len() != 4 {
        return Err(Error::validation("options", format!("expected 4 options, got {}", options.len())));
    }
    let instruction = match (phase, threshold) {
        (Phase::P4, Some(t)) => {
            let t = validate_threshold(t)?.to_string();
            let template = if variant == PromptVariant::Gemma { PHASE4_GEMMA } else { PHASE4 };
            template.replace("{T}", &t)
        }
        (Phase::P4, None) => return Err(Error::validation("threshold", "Phase 4 needs an instructed threshold")),
        (_, Some(_)) => return Err(Error::validation("threshold", "only Phase 4 takes a threshold")),
        (Phase::P1, None) => PHASE1.to_string(),
        (Phase::P2 | Phase::P3, None) => PHASE2.to_string(),
    };
    let listing: String = options.iter().enumerate().map(|(i, o)| format!("\n{}. {o}", i + 1)).collect();
    Ok(format!("{instruction} {RULE} Question: {question}{listing}\nAnswer:"))
}

/// A trial from an extracted distribution. The chosen option is the mode.
pub fn trial_from_distribution(
    item_id: &str,
    phase: Phase,
    seed: u64,
    probs: Vec<f64>,
    correct_option: u8,
    threshold: Option<f64>,
) -> Result<Trial> {
    let chosen = probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i as u8 + 1)
        .ok_or_else(|| Error::validation("option_probs", "empty"))?;
    let trial = Trial {
        item_id: item_id.to_string(),
        phase,
        seed,
        option_probs: probs,
        chosen,
        correct_option,
        is_correct: chosen == correct_option,
        abstained: chosen == ABSTAIN,
        instructed_threshold: threshold,
        steering_strength: None,
        layer: None,
        calibrated: false,
        raw_logits: None,
    };
    trial.validate()?;
    Ok(trial)
}

//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage or validation error, 1 internal error.
//! Every artifact is written under `--out`; the same arguments and seed give
//! byte-identical files.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::calib::{fit_temperature, Binning, CalibrationSample, EceConfig};
use crate::error::{Error, Result};
use crate::features::{
    build_features, difficulty, load_corpus, load_embeddings, retrieve_contexts, simulate_difficulty_runs,
    synthetic_embeddings, Bm25Index, DIFFICULTY_SEEDS,
};
use crate::glm::ModelFit;
use crate::mediate::{analyze, load_records, save_records, MediationReport, MIN_REPLICATES};
use crate::policy::{
    bandness_index, derive_phase2_params, derive_phase4_params, fit_abstention_confidence, fit_phase2_suite,
    fit_phase4_suite, phase2_vif, write_comparison_csv, BandnessGrid, Suite, CONF_BIN_WIDTH, GRID_THRESHOLDS,
};
use crate::steerlab::{item_ids, simulate_phase, steering_pipeline, Agent, AgentConfig};
use crate::trialstore::{
    join_features, load_features, load_trials, save_features, save_trials, JoinedTable, Phase, PhaseRun, STEERING_GRID,
};

#[derive(Debug, Parser)]
#[command(name = "abstention", version, about = "Confidence-guided abstention analysis", args_override_self = true)]
struct Cli {
    /// Flat key=value file of defaults; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Directory receiving all artifacts.
    #[arg(long, global = true, default_value = ".", value_name = "DIR")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a temperature that minimizes ECE on a calibration set.
    Calibrate(CalibrateArgs),
    /// Run the synthetic agent through one phase.
    Simulate(SimulateArgs),
    /// Fit the nested Phase 2 model suite.
    #[command(name = "fit-phase2")]
    FitPhase2(FitArgs),
    /// Fit the nested Phase 4 model suite and emit the heatmap grid.
    #[command(name = "fit-phase4")]
    FitPhase4(FitArgs),
    /// Build a steering vector on the agent and sweep strengths and layers.
    Steer(SteerArgs),
    /// Decompose the steering effect through the two mediators.
    Mediate(MediateArgs),
    /// Build the per-item covariate table.
    Features(FeaturesArgs),
    /// Render a fit, suite or mediation report as Markdown.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BinningArg {
    EqualWidth,
    EqualMass,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// JSON Lines of `{logits, correct}` with a zero-based correct index.
    #[arg(long, conflicts_with = "trials", required_unless_present = "trials")]
    samples: Option<PathBuf>,
    /// Phase 1 trials; raw logits are used when stored.
    #[arg(long)]
    trials: Option<PathBuf>,
    #[arg(long, default_value_t = crate::calib::DEFAULT_BINS)]
    bins: usize,
    #[arg(long, value_enum, default_value = "equal-width")]
    binning: BinningArg,
}

#[derive(Debug, Args)]
struct AgentArgs {
    /// AgentConfig JSON; defaults to the built-in tuned agent.
    #[arg(long, value_name = "FILE")]
    agent: Option<PathBuf>,
    /// Overrides the agent's Phase 2 indifference point.
    #[arg(long)]
    t50: Option<f64>,
    /// Overrides the agent's Phase 2 policy temperature.
    #[arg(long)]
    tau: Option<f64>,
}

impl AgentArgs {
    fn build(&self) -> Result<Agent> {
        let mut config: AgentConfig = match &self.agent {
            Some(p) => read_json(p)?,
            None => AgentConfig::default(),
        };
        if let Some(t) = self.t50 {
            config.policy_t50 = t;
        }
        if let Some(t) = self.tau {
            config.policy_tau = t;
        }
        Agent::new(config)
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    seed: u64,
    /// P1, P2 or P4.
    #[arg(long, value_parser = parse_phase)]
    phase: Phase,
    #[arg(long, default_value_t = 1000)]
    items: usize,
    /// Phase 4 instructed thresholds in percent.
    #[arg(long, value_delimiter = ',', default_values_t = GRID_THRESHOLDS.to_vec())]
    thresholds: Vec<f64>,
    #[command(flatten)]
    agent: AgentArgs,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    trials: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Phase 1 run supplying each item's confidence.
    #[arg(long)]
    phase1: Option<PathBuf>,
    /// Difficulty at which to report indifference points; defaults to the
    /// mean.
    #[arg(long)]
    difficulty_at: Option<f64>,
}

#[derive(Debug, Args)]
struct SteerArgs {
    #[arg(long)]
    seed: u64,
    /// Items used to build the steering vector.
    #[arg(long, default_value_t = 1000)]
    train_items: usize,
    /// Items steered in the sweep.
    #[arg(long, default_value_t = 500)]
    items: usize,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = STEERING_GRID.to_vec())]
    alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![2usize, 4, 6])]
    layers: Vec<usize>,
    /// Features CSV whose difficulty is attached to the mediation records.
    #[arg(long)]
    features: Option<PathBuf>,
    #[command(flatten)]
    agent: AgentArgs,
}

#[derive(Debug, Args)]
struct MediateArgs {
    #[arg(long)]
    seed: u64,
    /// Mediation records (JSON Lines), as written by `steer`.
    #[arg(long)]
    records: PathBuf,
    /// Bootstrap replicates.
    #[arg(long = "bootstrap", short = 'B', default_value_t = 1000)]
    bootstrap: usize,
    /// Add difficulty to the outcome equation.
    #[arg(long)]
    with_difficulty: bool,
}

#[derive(Debug, Args)]
struct FeaturesArgs {
    /// Seeded Phase 1 runs for the difficulty score.
    #[arg(long, num_args = 1.., value_delimiter = ',', conflicts_with = "simulate_items")]
    runs: Vec<PathBuf>,
    /// Score difficulty on this many synthetic agent items instead.
    #[arg(long, requires = "seed")]
    simulate_items: Option<usize>,
    #[arg(long, default_value_t = DIFFICULTY_SEEDS)]
    n_seeds: usize,
    /// JSON Lines of `{item_id, question, contexts}` embedding vectors;
    /// synthetic embeddings are drawn when absent.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 24)]
    embedding_dim: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Offline corpus (JSON Lines of `{doc_id, title, text}`) for retrieval.
    #[arg(long, requires = "questions")]
    corpus: Option<PathBuf>,
    /// JSON Lines of `{item_id, question}` to retrieve contexts for.
    #[arg(long, requires = "corpus")]
    questions: Option<PathBuf>,
    #[command(flatten)]
    agent: AgentArgs,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// A model fit, model suite or mediation report JSON.
    #[arg(long)]
    fit: PathBuf,
}

fn parse_phase(s: &str) -> std::result::Result<Phase, String> {
    Phase::parse(s).map_err(|e| e.to_string())
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match merge_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                2
            } else {
                1
            }
        }
    }
}

const SUBCOMMANDS: [&str; 8] = ["calibrate", "simulate", "fit-phase2", "fit-phase4", "steer", "mediate", "features", "report"];

/// Inserts `--key value` pairs from the `--config` file right after the
/// subcommand, so that later command-line flags override them.
fn merge_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let strs: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut path = None;
    for (i, a) in strs.iter().enumerate() {
        if a == "--config" {
            path = strs.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let Some(sub) = strs.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else { return Ok(argv) };
    let text = fs::read_to_string(&path).map_err(|e| Error::Config(format!("cannot read {path}: {e}")))?;
    let mut extra: Vec<OsString> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{path}:{}: expected key=value", n + 1)))?;
        let flag = format!("--{}", k.trim().replace('_', "-"));
        match v.trim() {
            "true" => extra.push(flag.into()),
            "false" => {}
            v => {
                extra.push(flag.into());
                extra.push(v.into());
            }
        }
    }
    let mut out = argv[..=sub].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[sub + 1..]);
    Ok(out)
}

fn dispatch(cli: Cli) -> Result<()> {
    fs::create_dir_all(&cli.out)?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Calibrate(a) => calibrate(a, out),
        Command::Simulate(a) => simulate(a, out),
        Command::FitPhase2(a) => fit_phase2(a, out),
        Command::FitPhase4(a) => fit_phase4(a, out),
        Command::Steer(a) => steer(a, out),
        Command::Mediate(a) => mediate(a, out),
        Command::Features(a) => features(a, out),
        Command::Report(a) => report(a, out),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() }))
        .collect()
}

fn calibrate(a: CalibrateArgs, out: &Path) -> Result<()> {
    let samples: Vec<CalibrationSample> = match (&a.samples, &a.trials) {
        (Some(p), _) => read_jsonl(p)?,
        (None, Some(p)) => load_trials(p)?.trials.iter().map(CalibrationSample::from_trial).collect(),
        (None, None) => return Err(Error::validation("samples", "give --samples or --trials")),
    };
    if a.bins == 0 {
        return Err(Error::validation("bins", "must be at least 1"));
    }
    let binning = match a.binning {
        BinningArg::EqualWidth => Binning::EqualWidth,
        BinningArg::EqualMass => Binning::EqualMass,
    };
    let result = fit_temperature(&samples, &EceConfig { binning, ..EceConfig::with_bins(a.bins) })?;
    if let Some(w) = &result.warning {
        eprintln!("warning: {w}");
    }
    write_json(&out.join("calibration.json"), &result)?;
    println!("tau_scale {:.4}  ECE {:.4} -> {:.4}", result.tau_scale, result.ece_before, result.ece_after);
    Ok(())
}

fn phase_tag(p: Phase) -> &'static str {
    match p {
        Phase::P1 => "p1",
        Phase::P2 => "p2",
        Phase::P3 => "p3",
        Phase::P4 => "p4",
    }
}

fn simulate(a: SimulateArgs, out: &Path) -> Result<()> {
    let agent = a.agent.build()?;
    let thresholds = if a.phase == Phase::P4 { a.thresholds.clone() } else { vec![] };
    let sim = simulate_phase(&agent, &item_ids(a.items), a.phase, &thresholds, a.seed)?;
    let path = out.join(format!("{}_trials.jsonl", phase_tag(a.phase)));
    save_trials(&sim.run.trials, &path)?;
    write_json(&out.join("agent.json"), &agent.config)?;
    let abst = sim.run.trials.iter().filter(|t| t.abstained).count();
    println!("{} trials, abstention {:.3} -> {}", sim.run.trials.len(), abst as f64 / sim.run.trials.len() as f64, path.display());
    Ok(())
}

fn joined(a: &FitArgs) -> Result<JoinedTable> {
    let run = load_trials(&a.trials)?;
    let features = load_features(&a.features)?;
    let mut table = join_features(&run, &features)?;
    if let Some(p) = &a.phase1 {
        table.attach_phase1(&load_trials(p)?)?;
    }
    Ok(table)
}

fn write_suite(suite: &Suite, prefix: &str, out: &Path) -> Result<()> {
    write_json(&out.join(format!("{prefix}_suite.json")), suite)?;
    write_comparison_csv(&suite.comparison, fs::File::create(out.join(format!("{prefix}_comparison.csv")))?)?;
    for e in suite.models.iter().filter_map(|(n, e)| e.error.as_ref().map(|err| (n, err))) {
        eprintln!("warning: model {} not fitted: {}", e.0, e.1);
    }
    Ok(())
}

fn fit_phase2(a: FitArgs, out: &Path) -> Result<()> {
    let table = joined(&a)?;
    let suite = fit_phase2_suite(&table)?;
    write_suite(&suite, "phase2", out)?;
    let diff_at = a
        .difficulty_at
        .unwrap_or_else(|| table.rows.iter().map(|r| r.difficulty).sum::<f64>() / table.len() as f64);
    let mut params = BTreeMap::new();
    for name in ["confidence_only", "confidence_difficulty", "full"] {
        if let Some(fit) = suite.fit(name) {
            match derive_phase2_params(fit, diff_at) {
                Ok(p) => {
                    params.insert(name, p);
                }
                Err(e) => eprintln!("warning: {name}: {e}"),
            }
        }
    }
    write_json(&out.join("phase2_params.json"), &params)?;
    match phase2_vif(&table) {
        Ok(v) => write_json(&out.join("phase2_vif.json"), &v)?,
        Err(e) => eprintln!("warning: VIF not computed: {e}"),
    }
    print!("{}", comparison_markdown(&suite));
    Ok(())
}

fn fit_phase4(a: FitArgs, out: &Path) -> Result<()> {
    let table = joined(&a)?;
    let suite = fit_phase4_suite(&table)?;
    write_suite(&suite, "phase4", out)?;
    let mut params = BTreeMap::new();
    for name in ["threshold_confidence", "threshold_confidence_difficulty", "maximal"] {
        if let Some(fit) = suite.fit(name) {
            match derive_phase4_params(fit) {
                Ok(p) => {
                    params.insert(name, p);
                }
                Err(e) => eprintln!("warning: {name}: {e}"),
            }
        }
    }
    write_json(&out.join("phase4_params.json"), &params)?;
    match emit_heatmap_data(&table) {
        Ok(csv) => fs::write(out.join("heatmap.csv"), csv)?,
        Err(e) => eprintln!("warning: heatmap not written: {e}"),
    }
    if table.rows.iter().all(|r| r.trial.option_probs.len() == 5) {
        write_json(&out.join("abstention_confidence.json"), &fit_abstention_confidence(&table)?)?;
    }
    print!("{}", comparison_markdown(&suite));
    Ok(())
}

/// Threshold x confidence-bin abstention grid as CSV, empty cells as `NA`,
/// followed by a `# bandness` footer.
pub fn emit_heatmap_data(table: &JoinedTable) -> Result<String> {
    let obs = table
        .rows
        .iter()
        .map(|r| {
            let t = r
                .trial
                .instructed_threshold
                .ok_or_else(|| Error::validation("instructed_threshold", "heatmap needs Phase 4 trials"))?;
            Ok((t, r.confidence, r.trial.abstained))
        })
        .collect::<Result<Vec<_>>>()?;
    let grid = BandnessGrid::from_observations(obs)?;
    let bandness = bandness_index(&grid)?;
    let mut s = String::from("threshold");
    for c in &grid.conf_bins {
        write!(s, ",conf_{:.1}_{:.1}", c, c + CONF_BIN_WIDTH).unwrap();
    }
    s.push('\n');
    for (t, row) in grid.thresholds.iter().zip(grid.rates()) {
        write!(s, "{t}").unwrap();
        for r in row {
            match r {
                Some(r) => write!(s, ",{r:.6}").unwrap(),
                None => s.push_str(",NA"),
            }
        }
        s.push('\n');
    }
    writeln!(
        s,
        "# bandness_index={:.6},r_threshold={:.6},r_confidence={:.6}",
        bandness.index, bandness.r_threshold, bandness.r_confidence
    )
    .unwrap();
    Ok(s)
}

fn steer(a: SteerArgs, out: &Path) -> Result<()> {
    let agent = a.agent.build()?;
    let difficulty: Option<BTreeMap<String, f64>> = match &a.features {
        Some(p) => Some(load_features(p)?.into_iter().map(|f| (f.item_id, f.difficulty)).collect()),
        None => None,
    };
    let train = item_ids(a.train_items);
    let eval: Vec<String> = (a.train_items..a.train_items + a.items).map(|i| format!("q{i:04}")).collect();
    let (contrast, vector, sweep) =
        steering_pipeline(&agent, &train, &eval, &a.alphas, &a.layers, a.seed, difficulty.as_ref())?;
    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    w.write_record(["alpha", "layer", "n", "abstention_rate", "delta_max_real_conf", "delta_abstain_conf", "accuracy_on_answered"])?;
    for r in &sweep.rows {
        w.write_record([
            r.alpha.to_string(),
            r.layer.map_or_else(|| "baseline".to_string(), |l| l.to_string()),
            r.n.to_string(),
            format!("{:.6}", r.abstention_rate),
            format!("{:.6}", r.delta_max_real_conf),
            format!("{:.6}", r.delta_abstain_conf),
            if r.accuracy_on_answered.is_nan() { "NA".into() } else { format!("{:.6}", r.accuracy_on_answered) },
        ])?;
    }
    w.flush()?;
    save_records(&sweep.records, out.join("mediation.jsonl"))?;
    write_json(&out.join("steering_vector.json"), &vector)?;
    write_json(&out.join("contrast.json"), &contrast)?;
    write_json(&out.join("agent.json"), &agent.config)?;
    for (alpha, rate) in sweep.abstention_by_alpha() {
        println!("alpha {alpha:+.1}  abstention {rate:.3}");
    }
    Ok(())
}

fn mediate(a: MediateArgs, out: &Path) -> Result<()> {
    if a.bootstrap < MIN_REPLICATES {
        return Err(Error::validation("B", format!("need at least {MIN_REPLICATES} replicates, got {}", a.bootstrap)));
    }
    let records = load_records(&a.records)?;
    let report = analyze(&records, a.with_difficulty, a.bootstrap, a.seed)?;
    write_json(&out.join("mediation.json"), &report)?;
    print!("{}", mediation_markdown(&report));
    Ok(())
}

#[derive(serde::Deserialize)]
struct Question {
    item_id: String,
    question: String,
}

#[derive(Serialize)]
struct Retrieved<'a> {
    item_id: &'a str,
    contexts: Vec<String>,
}

fn features(a: FeaturesArgs, out: &Path) -> Result<()> {
    let need_seed = |what: &str| a.seed.ok_or_else(|| Error::validation("seed", format!("{what} needs --seed")));
    if let (Some(c), Some(q)) = (&a.corpus, &a.questions) {
        let index = Bm25Index::new(load_corpus(c)?);
        let questions: Vec<Question> = read_jsonl(q)?;
        let mut s = String::new();
        for q in &questions {
            s.push_str(&serde_json::to_string(&Retrieved { item_id: &q.item_id, contexts: retrieve_contexts(&q.question, &index) })?);
            s.push('\n');
        }
        fs::write(out.join("contexts.jsonl"), s)?;
        println!("retrieved contexts for {} questions", questions.len());
    }
    let scores = if !a.runs.is_empty() {
        let runs: Vec<PhaseRun> = a.runs.iter().map(load_trials).collect::<Result<_>>()?;
        difficulty(&runs)?
    } else if let Some(n) = a.simulate_items {
        let agent = a.agent.build()?;
        let items = item_ids(n);
        let runs = simulate_difficulty_runs(&agent, &items, a.n_seeds)?;
        difficulty(&runs)?
    } else if a.corpus.is_some() {
        return Ok(());
    } else {
        return Err(Error::validation("runs", "give --runs, --simulate-items or --corpus/--questions"));
    };
    let embeddings = match &a.embeddings {
        Some(p) => load_embeddings(p)?,
        None => {
            let items: Vec<String> = scores.iter().map(|s| s.item_id.clone()).collect();
            synthetic_embeddings(&items, a.embedding_dim, need_seed("synthetic embeddings")?)
        }
    };
    let rows = build_features(&scores, &embeddings)?;
    save_features(&rows, out.join("features.csv"))?;
    let failed = rows.iter().filter(|r| r.rag_failed).count();
    println!("{} items, {failed} failed retrievals", rows.len());
    Ok(())
}

fn report(a: ReportArgs, out: &Path) -> Result<()> {
    let value: serde_json::Value = read_json(&a.fit)?;
    let md = if value.get("models").is_some() {
        suite_markdown(&serde_json::from_value(value)?)
    } else if value.get("paths").is_some() {
        mediation_markdown(&serde_json::from_value(value)?)
    } else {
        let fit: ModelFit = serde_json::from_value(value)?;
        fit_markdown(&fit)
    };
    fs::write(out.join("report.md"), &md)?;
    print!("{md}");
    Ok(())
}

fn num(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v:.4}")
    }
}

fn pval(p: f64) -> String {
    if p.is_nan() {
        "NA".into()
    } else if p < 1e-3 {
        format!("{p:.2e}")
    } else {
        format!("{p:.4}")
    }
}

/// Coefficient table with SE, z and p columns.
pub fn fit_markdown(fit: &ModelFit) -> String {
    let mut s = String::from("| Predictor | Coefficient | SE | z | p |\n|---|---:|---:|---:|---:|\n");
    for i in 0..fit.n_params() {
        writeln!(s, "| {} | {} | {} | {} | {} |", fit.predictor_names[i], num(fit.coef[i]), num(fit.se[i]), num(fit.z[i]), pval(fit.p_value[i])).unwrap();
    }
    writeln!(s, "\nn = {}, log-likelihood = {}, AIC = {}, pseudo-R2 = {}", fit.n, num(fit.loglik), num(fit.aic), num(fit.pseudo_r2)).unwrap();
    s
}

fn comparison_markdown(suite: &Suite) -> String {
    let mut s = String::from("| Model | k | LogLik | AIC | Pseudo-R2 | vs | dAIC | LRT chi2 | df | p |\n|---|---:|---:|---:|---:|---|---:|---:|---:|---:|\n");
    let opt = |v: Option<f64>| v.map_or_else(|| "".to_string(), num);
    for r in &suite.comparison {
        writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.model,
            r.n_params,
            num(r.loglik),
            num(r.aic),
            num(r.pseudo_r2),
            r.baseline.as_deref().unwrap_or(""),
            opt(r.delta_aic),
            opt(r.lrt_chi2),
            r.lrt_df.map_or_else(String::new, |d| d.to_string()),
            r.lrt_p.map_or_else(String::new, pval),
        )
        .unwrap();
    }
    s
}

pub fn suite_markdown(suite: &Suite) -> String {
    let mut s = format!("# {:?} model comparison\n\n{}", suite.phase, comparison_markdown(suite));
    for (name, entry) in &suite.models {
        write!(s, "\n## {name}\n\n").unwrap();
        match (&entry.fit, &entry.error) {
            (Some(f), _) => s.push_str(&fit_markdown(f)),
            (None, Some(e)) => writeln!(s, "Not fitted: {e}").unwrap(),
            (None, None) => s.push_str("Not fitted.\n"),
        }
    }
    s
}

pub fn mediation_markdown(r: &MediationReport) -> String {
    let p = &r.paths;
    let mut s = String::from("| Path | Estimate | SE |\n|---|---:|---:|\n");
    for (name, c) in [("a1", p.a1), ("a2", p.a2), ("b1", p.b1), ("b2", p.b2), ("c'", p.c_prime), ("c", p.c)] {
        writeln!(s, "| {name} | {} | {} |", num(c.estimate), num(c.se)).unwrap();
    }
    if let Some(g) = p.gamma_difficulty {
        writeln!(s, "| difficulty | {} | {} |", num(g.estimate), num(g.se)).unwrap();
    }
    s.push_str("\n| Effect | Estimate | 95% CI | Proportion of c |\n|---|---:|---|---:|\n");
    for (name, e, prop) in [("a1*b1", &r.indirect1, r.proportion1), ("a2*b2", &r.indirect2, r.proportion2)] {
        writeln!(s, "| {name} | {} | [{}, {}] | {:.1}% |", num(e.estimate), num(e.ci.low), num(e.ci.high), prop * 100.0).unwrap();
    }
    writeln!(s, "\nB = {}, failed replicates = {}, items = {}, rows = {}", r.b, r.failed_replicates, r.n_items, r.n_rows).unwrap();
    s
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ddc_core::engine::{Engine, EngineConfig, EngineError, PathSource, RunReport, StopCause};
use ddc_core::synthetic::{
    compare_stopping, engine_monte_carlo, pruning_separation_experiment, sufficient_condition, theorem_grid,
    CompareSettings, Family, GeneratorSpec, GridSpec, PruningSettings, SyntheticError,
};
use ddc_gateway::{load_traces, EndpointConfig, EndpointSource, GatewayError, RecordingSource};
use serde::{Deserialize, Serialize};

use crate::dataset::{answers_match, load_dataset, Query};
use crate::settings::{
    resolve, CheckCmd, Experiment, FileConfig, Format, ReplayCmd, ReportCmd, RunCmd, SimulateCmd,
};
use crate::CliError;

pub const AGGREGATE_SCHEMA_VERSION: u32 = 1;
pub const AGGREGATE_FILE: &str = "aggregate.json";
pub const TOKEN_UNIT: f64 = 1e7;

impl From<SyntheticError> for CliError {
    fn from(e: SyntheticError) -> Self {
        match e {
            SyntheticError::InvalidSpec(_) | SyntheticError::InconsistentMoments(_) => CliError::Usage(e.to_string()),
            SyntheticError::Engine(EngineError::InvalidConfig(_)) => CliError::Usage(e.to_string()),
            SyntheticError::Engine(EngineError::Aborted { .. }) => CliError::Transport(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Io(_) => CliError::Io(e.to_string()),
            GatewayError::Unreachable(_) | GatewayError::Transport(_) | GatewayError::Http { .. } => {
                CliError::Transport(e.to_string())
            }
            _ => CliError::Usage(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Pretty JSON with a trailing newline; the byte layout of every output
/// document.
pub fn to_document<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("outputs serialize");
    s.push('\n');
    s
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r).expect("outputs serialize"));
        s.push('\n');
    }
    write_file(path, &s)
}

fn emit<T: Serialize>(doc: &T, out: Option<&Path>, name: &str) -> Result<(), CliError> {
    let text = to_document(doc);
    if let Some(dir) = out {
        write_file(&dir.join(name), &text)?;
    }
    std::io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::Io(e.to_string()))
}

pub fn engine_config(args: &crate::settings::EngineArgs) -> EngineConfig {
    let mut cfg = EngineConfig::default();
    args.apply(&mut cfg);
    cfg
}

pub fn simulate(cmd: SimulateCmd, file: &FileConfig, seed: Option<u64>) -> Result<(), CliError> {
    let engine = resolve(cmd.engine, file)?;
    let cfg = engine_config(&engine);
    let generator = resolve(cmd.generator, file)?;
    let sim = resolve(cmd.sim, file)?;
    let out = resolve(cmd.out, file)?.out;

    let mut spec = GeneratorSpec::default();
    generator.apply(&mut spec);
    spec.top_k = cfg.top_k;
    spec.seed = seed.unwrap_or(0);
    spec.validate()?;
    let defaults = CompareSettings::default();
    let compare = CompareSettings {
        trials: sim.trials.unwrap_or(defaults.trials),
        max_votes: sim.max_votes.unwrap_or(defaults.max_votes),
        sc_budget: sim.sc_budget.unwrap_or(defaults.sc_budget),
        weight_scale: sim.weight_scale.unwrap_or(defaults.weight_scale),
        policy: cfg.stop_policy(),
        execution: sim.execution.unwrap_or(defaults.execution),
    };
    if compare.trials < 1 {
        return Err(CliError::Usage("trials must be >= 1".into()));
    }
    let out = out.as_deref();
    match sim.experiment.unwrap_or_default() {
        Experiment::Stopping => {
            let result = compare_stopping(&spec, &compare)?;
            if let Some(dir) = out {
                write_jsonl(&dir.join("trials.jsonl"), &result.records)?;
            }
            emit(&result.summary, out, "summary.json")
        }
        Experiment::Grid => {
            let default_grid = GridSpec::default();
            let grid = GridSpec {
                p: sim.grid_p.unwrap_or(default_grid.p),
                mu_c: sim.grid_mu_c.unwrap_or(default_grid.mu_c),
                mu_i: sim.grid_mu_i.unwrap_or(default_grid.mu_i),
            };
            let report = theorem_grid(&spec, &grid, &compare)?;
            emit(&report, out, "grid.json")
        }
        Experiment::Pruning => {
            let d = PruningSettings::default();
            let settings = PruningSettings {
                init_paths_per_family: sim.init_paths_per_family.unwrap_or(d.init_paths_per_family),
                paths_per_family: sim.paths_per_family.unwrap_or(d.paths_per_family),
                window: engine.window.unwrap_or(d.window),
                eta: cfg.eta,
                stride: cfg.stride,
                calibration: cfg.calibration(),
                execution: compare.execution,
                ..d
            };
            if settings.window > spec.path_len.saturating_sub(spec.path_len_jitter) {
                return Err(CliError::Usage(format!(
                    "window {} is longer than the shortest path ({} tokens)",
                    settings.window,
                    spec.path_len.saturating_sub(spec.path_len_jitter)
                )));
            }
            let report = pruning_separation_experiment(&spec, &Family::ALL, &settings)?;
            emit(&report, out, "pruning.json")
        }
        Experiment::Engine => {
            let result = engine_monte_carlo(&spec, &cfg, compare.trials, compare.execution)?;
            if let Some(dir) = out {
                write_jsonl(&dir.join("trials.jsonl"), &result.records)?;
            }
            emit(&result.summary, out, "summary.json")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub id: String,
    pub final_answer: Option<String>,
    pub gold: Option<String>,
    pub correct: Option<bool>,
    pub tokens: usize,
    pub paths_generated: usize,
    pub stop_cause: StopCause,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub queries: usize,
    pub answered: usize,
    pub graded: usize,
    pub correct: usize,
    /// Over graded queries; absent when no query has a gold answer.
    pub accuracy: Option<f64>,
    pub tokens_total: usize,
    /// `tokens_total / 1e7`.
    pub tokens_1e7: f64,
    pub paths_total: usize,
    pub mean_paths: f64,
    pub early_stops: usize,
    pub aborted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub schema_version: u32,
    pub command: String,
    pub queries: Vec<QueryOutcome>,
    pub summary: AggregateSummary,
}

impl Aggregate {
    pub fn new(command: &str, queries: Vec<QueryOutcome>) -> Self {
        let graded: Vec<bool> = queries.iter().filter_map(|q| q.correct).collect();
        let tokens_total: usize = queries.iter().map(|q| q.tokens).sum();
        let paths_total: usize = queries.iter().map(|q| q.paths_generated).sum();
        let summary = AggregateSummary {
            queries: queries.len(),
            answered: queries.iter().filter(|q| q.final_answer.is_some()).count(),
            graded: graded.len(),
            correct: graded.iter().filter(|&&c| c).count(),
            accuracy: (!graded.is_empty())
                .then(|| graded.iter().filter(|&&c| c).count() as f64 / graded.len() as f64),
            tokens_total,
            tokens_1e7: tokens_total as f64 / TOKEN_UNIT,
            paths_total,
            mean_paths: if queries.is_empty() {
                0.0
            } else {
                paths_total as f64 / queries.len() as f64
            },
            early_stops: queries
                .iter()
                .filter(|q| q.stop_cause == StopCause::BayesianEarlyStop)
                .count(),
            aborted: queries.iter().filter(|q| q.stop_cause == StopCause::Aborted).count(),
        };
        Self {
            schema_version: AGGREGATE_SCHEMA_VERSION,
            command: command.into(),
            queries,
            summary,
        }
    }
}

fn outcome(id: &str, gold: Option<&str>, report: &RunReport, error: Option<String>) -> QueryOutcome {
    QueryOutcome {
        id: id.into(),
        final_answer: report.final_answer.clone(),
        gold: gold.map(String::from),
        correct: gold.map(|g| report.final_answer.as_deref().is_some_and(|a| answers_match(a, g))),
        tokens: report.tokens_consumed_total,
        paths_generated: report.paths_generated,
        stop_cause: report.stop_cause,
        error,
    }
}

pub fn report_path(out: &Path, id: &str) -> PathBuf {
    out.join("reports").join(format!("{id}.json"))
}

enum QueryResult {
    Done(QueryOutcome),
    Aborted(QueryOutcome, String),
}

fn run_query(engine: &Engine, source: &dyn PathSource, q_id: &str, gold: Option<&str>, out: &Path) -> Result<QueryResult, CliError> {
    match engine.run(source) {
        Ok(report) => {
            write_file(&report_path(out, q_id), &to_document(&report))?;
            Ok(QueryResult::Done(outcome(q_id, gold, &report, None)))
        }
        Err(EngineError::Aborted { message, report }) => {
            write_file(&report_path(out, q_id), &to_document(&*report))?;
            Ok(QueryResult::Aborted(outcome(q_id, gold, &report, Some(message.clone())), message))
        }
        Err(EngineError::Numeric(e)) => Err(CliError::Numeric(format!("query {q_id}: {e}"))),
        Err(e) => Err(CliError::Usage(format!("query {q_id}: {e}"))),
    }
}

fn finish(command: &str, out: &Path, outcomes: Vec<QueryOutcome>) -> Result<Aggregate, CliError> {
    let agg = Aggregate::new(command, outcomes);
    write_file(&out.join(AGGREGATE_FILE), &to_document(&agg))?;
    Ok(agg)
}

fn print_summary(agg: &Aggregate) -> Result<(), CliError> {
    std::io::stdout()
        .write_all(to_document(&agg.summary).as_bytes())
        .map_err(|e| CliError::Io(e.to_string()))
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Usage(format!("--{flag} (or config key {}) is required", flag.replace('-', "_"))))
}

pub fn run(cmd: RunCmd, file: &FileConfig, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = engine_config(&resolve(cmd.engine, file)?);
    let endpoint_args = resolve(cmd.endpoint, file)?;
    let data = resolve(cmd.data, file)?;
    let out = required(resolve(cmd.out, file)?.out, "out")?;
    let dataset = load_dataset(&required(data.dataset, "dataset")?)?;
    let traces = data.traces.unwrap_or_else(|| out.join("traces"));

    let mut ep = EndpointConfig::default().with_env();
    endpoint_args.apply(&mut ep);
    ep.top_logprobs = cfg.top_k;
    ep.max_tokens = cfg.max_tokens_per_path;
    ep.seed = seed;
    ep.validate()?;
    let engine = Engine::new(cfg).map_err(|e| CliError::Usage(e.to_string()))?;

    let mut outcomes = Vec::new();
    for q in &dataset {
        let source = EndpointSource::new(ep.clone(), &q.prompt)?;
        let recording = RecordingSource::new(source, &traces, &q.id)?;
        log::info!("query {}", q.id);
        match run_query(&engine, &recording, &q.id, q.gold.as_deref(), &out)? {
            QueryResult::Done(o) => outcomes.push(o),
            QueryResult::Aborted(o, message) => {
                outcomes.push(o);
                finish("run", &out, outcomes)?;
                return Err(CliError::Transport(format!("query {}: {message}", q.id)));
            }
        }
    }
    let agg = finish("run", &out, outcomes)?;
    print_summary(&agg)
}

pub fn replay(cmd: ReplayCmd, file: &FileConfig) -> Result<(), CliError> {
    let cfg = engine_config(&resolve(cmd.engine, file)?);
    let data = resolve(cmd.data, file)?;
    let out = required(resolve(cmd.out, file)?.out, "out")?;
    let store = load_traces(&required(data.traces, "traces")?)?;
    let engine = Engine::new(cfg).map_err(|e| CliError::Usage(e.to_string()))?;

    let queries: Vec<Query> = match &data.dataset {
        Some(path) => load_dataset(path)?,
        None => store
            .queries
            .keys()
            .map(|id| Query {
                id: id.clone(),
                prompt: String::new(),
                gold: None,
            })
            .collect(),
    };
    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for q in &queries {
        let Some(traces) = store.query(&q.id) else {
            failures.push(format!("query {}: no traces", q.id));
            continue;
        };
        match run_query(&engine, traces, &q.id, q.gold.as_deref(), &out)? {
            QueryResult::Done(o) => outcomes.push(o),
            QueryResult::Aborted(o, message) => {
                failures.push(format!("query {}: {message}", q.id));
                outcomes.push(o);
            }
        }
    }
    let agg = finish("replay", &out, outcomes)?;
    print_summary(&agg)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Transport(failures.join("; ")))
    }
}

fn load_aggregate(path: &Path) -> Result<(String, Aggregate), CliError> {
    let file = if path.is_dir() { path.join(AGGREGATE_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| CliError::Usage(format!("{}: {e}", file.display())))?;
    let agg: Aggregate =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", file.display())))?;
    if agg.schema_version != AGGREGATE_SCHEMA_VERSION {
        return Err(CliError::Usage(format!(
            "{}: aggregate schema version {}, expected {AGGREGATE_SCHEMA_VERSION}",
            file.display(),
            agg.schema_version
        )));
    }
    let name = file
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| file.display().to_string());
    Ok((name, agg))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub name: String,
    pub queries: usize,
    pub accuracy: Option<f64>,
    pub tokens_1e7: f64,
    pub mean_paths: f64,
}

pub fn report_rows(inputs: &[PathBuf]) -> Result<Vec<ReportRow>, CliError> {
    inputs
        .iter()
        .map(|p| {
            let (name, agg) = load_aggregate(p)?;
            Ok(ReportRow {
                name,
                queries: agg.summary.queries,
                accuracy: agg.summary.accuracy,
                tokens_1e7: agg.summary.tokens_1e7,
                mean_paths: agg.summary.mean_paths,
            })
        })
        .collect()
}

pub fn render_table(rows: &[ReportRow]) -> String {
    let name_w = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(3);
    let mut s = format!("{:<name_w$}  {:>7}  {:>7}  {:>12}  {:>10}\n", "run", "queries", "Acc.", "Tokens(1e7)", "mean paths");
    for r in rows {
        let acc = r.accuracy.map_or_else(|| "-".to_string(), |a| format!("{:.1}", 100.0 * a));
        s.push_str(&format!(
            "{:<name_w$}  {:>7}  {:>7}  {:>12.4}  {:>10.2}\n",
            r.name, r.queries, acc, r.tokens_1e7, r.mean_paths
        ));
    }
    s
}

pub fn report(cmd: ReportCmd, file: &FileConfig) -> Result<(), CliError> {
    let format = resolve(cmd.format, file)?.format.unwrap_or_default();
    let rows = report_rows(&cmd.inputs)?;
    let text = match format {
        Format::Table => render_table(&rows),
        Format::Json => to_document(&rows),
    };
    std::io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::Io(e.to_string()))
}

pub fn check_condition(cmd: CheckCmd, file: &FileConfig) -> Result<(), CliError> {
    let m = resolve(cmd.moments, file)?;
    let d = GeneratorSpec::default();
    let spec = GeneratorSpec {
        p: m.p.unwrap_or(d.p),
        mu_c: m.mu_c.unwrap_or(d.mu_c),
        mu_i: m.mu_i.unwrap_or(d.mu_i),
        weight_spread: m.weight_spread.unwrap_or(d.weight_spread),
        ..d
    };
    let m2_c = m.m2_c.unwrap_or_else(|| spec.second_moment(spec.mu_c));
    let m2_i = m.m2_i.unwrap_or_else(|| spec.second_moment(spec.mu_i));
    let r = sufficient_condition(spec.p, spec.mu_c, spec.mu_i, m2_c, m2_i)?;
    let verdict = if r.holds { "holds" } else { "fails" };
    println!("lhs      {:.6}", r.lhs);
    println!("rhs      {:.6}", r.rhs);
    println!("verdict  {verdict}");
    Ok(())
}

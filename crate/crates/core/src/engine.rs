//! Adaptive sampling controller.
//!
//! The engine draws an unpruned calibration population, derives per-query
//! gating thresholds and seeds the evidence ledger from it, then keeps
//! launching gated paths until the stopping rule fires or the budget is
//! spent. The answer is the confidence-weighted vote over every completed
//! path.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::{ConfidenceError, PathConfidenceTracker, TokenEvent};
use crate::pruning::{
    stratified_decision, window_instability, CalibrationPools, CalibrationSettings, GateDecision,
    PruneReason, PruningError, Thresholds,
};
use crate::termination::{should_stop, EvidenceLedger, StopDecision, StopPolicy, TerminationError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine configuration: {0}")]
    InvalidConfig(String),
    #[error("numeric failure: {0}")]
    Numeric(#[from] TerminationError),
    #[error("no completed path produced an answer")]
    NoAnswer,
    #[error("source failed, run aborted: {message}")]
    Aborted {
        message: String,
        report: Box<RunReport>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SourceError {
    /// Only this path is lost; the run continues.
    #[error("path failed: {0}")]
    Path(String),
    /// The source as a whole is unusable; the run aborts.
    #[error("source unavailable: {0}")]
    Systemic(String),
    /// The source cannot deliver what the engine needs; the run aborts.
    #[error("source misconfigured: {0}")]
    Capability(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PathEvent {
    Token(TokenEvent),
    Finished { text: String },
}

/// A live stream of token events for one path.
///
/// `close` is called exactly once, with the path's terminal status, when
/// the engine is done with the stream. After a close that is not
/// `Completed` the stream must stop generating.
pub trait PathStream: Send {
    fn next_event(&mut self) -> Result<PathEvent, SourceError>;

    fn close(&mut self, _status: &PathStatus) {}
}

/// Anything that can start reasoning paths: a simulator, a replayed trace
/// set, or a live completion endpoint.
pub trait PathSource: Sync {
    fn start_path(&self, path_index: usize) -> Result<Box<dyn PathStream + '_>, SourceError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMapping {
    /// Min-max over the calibration population, floored.
    InitMinMax,
    /// Path confidence used as is, clamped to [0, 1].
    Identity,
    /// Affine map of `[weight_lo, weight_hi]` onto [0, 1], floored.
    FixedRange,
}

/// Engine settings. Field names double as configuration-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Maximum number of paths launched, calibration included.
    pub budget: usize,
    pub init_budget: usize,
    /// Group / trend window length in tokens.
    pub window: usize,
    pub gamma: f64,
    pub tau_stop: f64,
    pub eta: f64,
    pub top_k: usize,
    pub pass_percentile: f64,
    pub drop_percentile: f64,
    pub tukey_multiplier: f64,
    pub max_tokens_per_path: usize,
    /// Gate every `stride` tokens once the window is full.
    pub stride: usize,
    /// Add every `calibration_stride`-th window to the calibration pools.
    pub calibration_stride: usize,
    /// Concurrent paths in flight.
    pub parallelism: usize,
    pub weight_mapping: WeightMapping,
    pub weight_floor: f64,
    pub weight_lo: f64,
    pub weight_hi: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            budget: 512,
            init_budget: 16,
            window: 2048,
            gamma: 0.5,
            tau_stop: 0.95,
            eta: 0.5,
            top_k: 20,
            pass_percentile: 90.0,
            drop_percentile: 20.0,
            tukey_multiplier: 1.5,
            max_tokens_per_path: 32_768,
            stride: 1,
            calibration_stride: 1,
            parallelism: 1,
            weight_mapping: WeightMapping::InitMinMax,
            weight_floor: 0.05,
            weight_lo: 0.0,
            weight_hi: 1.0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::InvalidConfig(m));
        if self.init_budget < 1 || self.init_budget > self.budget {
            return bad(format!(
                "need 1 <= init_budget <= budget, got init_budget={} budget={}",
                self.init_budget, self.budget
            ));
        }
        if self.window < 2 {
            return bad(format!("window must be >= 2, got {}", self.window));
        }
        for (name, p) in [("pass_percentile", self.pass_percentile), ("drop_percentile", self.drop_percentile)] {
            if !(p > 0.0 && p < 100.0) {
                return bad(format!("{name} must lie in (0, 100), got {p}"));
            }
        }
        self.stop_policy().validate()?;
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be finite and >= 0, got {}", self.eta));
        }
        if !(self.tukey_multiplier >= 0.0 && self.tukey_multiplier.is_finite()) {
            return bad(format!("tukey_multiplier must be >= 0, got {}", self.tukey_multiplier));
        }
        if self.top_k < 1 {
            return bad("top_k must be >= 1".into());
        }
        if self.stride < 1 || self.calibration_stride < 1 || self.parallelism < 1 || self.max_tokens_per_path < 1 {
            return bad("stride, calibration_stride, parallelism and max_tokens_per_path must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.weight_floor) {
            return bad(format!("weight_floor must lie in [0, 1], got {}", self.weight_floor));
        }
        if self.weight_mapping == WeightMapping::FixedRange && !(self.weight_lo < self.weight_hi) {
            return bad(format!(
                "fixed_range mapping needs weight_lo < weight_hi, got {} and {}",
                self.weight_lo, self.weight_hi
            ));
        }
        Ok(())
    }

    pub fn stop_policy(&self) -> StopPolicy {
        StopPolicy {
            gamma: self.gamma,
            tau_stop: self.tau_stop,
        }
    }

    pub fn calibration(&self) -> CalibrationSettings {
        CalibrationSettings {
            pass_percentile: self.pass_percentile,
            drop_percentile: self.drop_percentile,
            tukey_multiplier: self.tukey_multiplier,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PathStatus {
    Active,
    Completed {
        answer: Option<String>,
        path_confidence: f64,
    },
    Pruned {
        reason: PruneReason,
        at_token: usize,
    },
    /// Hit `max_tokens_per_path` before finishing.
    BudgetExhausted,
    /// Still running when the stopping rule fired.
    Cancelled,
    Failed {
        message: String,
    },
}

impl PathStatus {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, PathStatus::Active)
    }
}

/// Lifecycle of one path while a worker drives it.
#[derive(Debug, Clone)]
pub struct PathState {
    pub id: usize,
    pub phase: Phase,
    status: PathStatus,
}

impl PathState {
    pub fn new(id: usize, phase: Phase) -> Self {
        Self {
            id,
            phase,
            status: PathStatus::Active,
        }
    }

    pub fn status(&self) -> &PathStatus {
        &self.status
    }

    /// Moves an active path to a terminal status. Terminal statuses are final.
    pub fn finish(&mut self, status: PathStatus) -> Result<(), PathStatus> {
        if self.status.is_terminal() || !status.is_terminal() {
            return Err(status);
        }
        self.status = status;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSummary {
    pub id: usize,
    pub phase: Phase,
    pub tokens: usize,
    #[serde(flatten)]
    pub status: PathStatus,
    /// Vote weight, for paths that voted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopCause {
    BayesianEarlyStop,
    BudgetExhausted,
    Aborted,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneCounts {
    pub low_confidence: usize,
    pub instability: usize,
}

impl PruneCounts {
    pub fn total(&self) -> usize {
        self.low_confidence + self.instability
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub final_answer: Option<String>,
    pub stop_cause: StopCause,
    pub paths_generated: usize,
    pub paths_completed: usize,
    pub paths_pruned: PruneCounts,
    pub paths_failed: usize,
    pub paths_cancelled: usize,
    pub tokens_consumed_total: usize,
    pub init_tokens: usize,
    pub thresholds: Option<Thresholds>,
    /// Posterior majority probability of the leader at the last check.
    pub posterior: f64,
    /// Summed path confidence per answer, in first-completion order.
    pub vote_totals: IndexMap<String, f64>,
    pub paths: Vec<PathSummary>,
}

/// Maps raw path confidence onto a vote weight in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightNormalizer {
    mapping: WeightMapping,
    lo: f64,
    hi: f64,
    floor: f64,
}

impl WeightNormalizer {
    pub fn from_config(cfg: &EngineConfig, init_confidences: &[f64]) -> Self {
        let (lo, hi) = match cfg.weight_mapping {
            WeightMapping::InitMinMax => {
                let lo = init_confidences.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = init_confidences.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            }
            WeightMapping::Identity => (0.0, 1.0),
            WeightMapping::FixedRange => (cfg.weight_lo, cfg.weight_hi),
        };
        Self {
            mapping: cfg.weight_mapping,
            lo,
            hi,
            floor: cfg.weight_floor,
        }
    }

    pub fn weight(&self, path_confidence: f64) -> f64 {
        match self.mapping {
            WeightMapping::Identity => path_confidence.clamp(0.0, 1.0),
            WeightMapping::InitMinMax | WeightMapping::FixedRange => {
                let span = self.hi - self.lo;
                // a flat calibration population carries no ordering
                if !(span > f64::EPSILON) {
                    return 1.0;
                }
                ((path_confidence - self.lo) / span).clamp(self.floor, 1.0)
            }
        }
    }
}

/// Last `\boxed{...}` expression, else the text after the last `answer:`
/// marker on its line.
pub fn extract_answer(text: &str) -> Option<String> {
    const BOXED: &str = "\\boxed{";
    let mut found = None;
    let mut search = 0;
    while let Some(rel) = text[search..].find(BOXED) {
        let start = search + rel + BOXED.len();
        let mut depth = 1usize;
        let mut end = None;
        for (i, ch) in text[start..].char_indices() {
            match ch {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(start + i);
                        break;
                    }
                }
                _ => {}
            }
        }
        match end {
            Some(end) => {
                let inner = text[start..end].trim();
                if !inner.is_empty() {
                    found = Some(inner.to_string());
                }
                search = end + 1;
            }
            None => break,
        }
    }
    if found.is_some() {
        return found;
    }
    let lower = text.to_ascii_lowercase();
    let marker = "answer:";
    let pos = lower.rfind(marker)?;
    let rest = &text[pos + marker.len()..];
    let line = rest.lines().next().unwrap_or("").trim();
    (!line.is_empty()).then(|| line.to_string())
}

/// Per-answer weight totals in first-seen order.
pub fn vote_totals<'a, I>(votes: I) -> IndexMap<String, f64>
where
    I: IntoIterator<Item = (&'a str, f64)>,
{
    let mut totals: IndexMap<String, f64> = IndexMap::new();
    for (answer, w) in votes {
        *totals.entry(answer.to_string()).or_insert(0.0) += w;
    }
    totals
}

/// Confidence-weighted plurality over `(answer, weight)` votes in completion
/// order. Ties go to the answer that completed first.
pub fn weighted_vote<'a, I>(votes: I) -> Result<String, EngineError>
where
    I: IntoIterator<Item = (&'a str, f64)>,
{
    let totals = vote_totals(votes);
    let mut best: Option<(&str, f64)> = None;
    for (answer, &w) in &totals {
        match best {
            Some((_, bw)) if w <= bw => {}
            _ => best = Some((answer, w)),
        }
    }
    best.map(|(a, _)| a.to_string()).ok_or(EngineError::NoAnswer)
}

/// Per-token gating state for one path: confidence tracking, optional
/// calibration sampling and the three-tier decision.
#[derive(Debug, Clone)]
pub struct PathGate {
    tracker: PathConfidenceTracker,
    thresholds: Option<Thresholds>,
    collect_pools: bool,
    stride: usize,
    calibration_stride: usize,
    eta: f64,
    pools: CalibrationPools,
    trend: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GateError {
    #[error(transparent)]
    Confidence(#[from] ConfidenceError),
    #[error(transparent)]
    Pruning(#[from] PruningError),
}

impl PathGate {
    /// A gate that prunes against `thresholds` (none: never prunes) and,
    /// when `collect_pools` is set, samples calibration statistics.
    pub fn new(cfg: &EngineConfig, thresholds: Option<Thresholds>, collect_pools: bool) -> Result<Self, GateError> {
        Ok(Self {
            tracker: PathConfidenceTracker::new(cfg.window)?,
            thresholds,
            collect_pools,
            stride: cfg.stride.max(1),
            calibration_stride: cfg.calibration_stride.max(1),
            eta: cfg.eta,
            pools: CalibrationPools::default(),
            trend: Vec::with_capacity(cfg.window),
        })
    }

    /// Feeds one token. Returns the pruning reason if the path must stop.
    pub fn observe(&mut self, event: &TokenEvent) -> Result<Option<PruneReason>, GateError> {
        let obs = self.tracker.observe(event)?;
        let (Some(local_group), Some(global_group)) = (obs.local_group, obs.global_group) else {
            return Ok(None);
        };
        let offset = self.tracker.token_count() - self.tracker.window_len();
        let sample = self.collect_pools && offset % self.calibration_stride == 0;
        let gate = self.thresholds.is_some() && offset % self.stride == 0;
        if !(sample || gate) {
            return Ok(None);
        }
        self.trend.clear();
        self.trend.extend(self.tracker.global_window().values());
        let prev = self.tracker.preceding_global();
        if sample {
            self.pools.local_groups.push(local_group);
            self.pools.global_groups.push(global_group);
            if let Some(r) = window_instability(&self.trend, prev, self.eta)? {
                self.pools.instability.push(r);
            }
        }
        if let (true, Some(th)) = (gate, self.thresholds.as_ref()) {
            if let GateDecision::Prune(reason) =
                stratified_decision(local_group, global_group, &self.trend, prev, th, self.eta)?
            {
                return Ok(Some(reason));
            }
        }
        Ok(None)
    }

    pub fn tracker(&self) -> &PathConfidenceTracker {
        &self.tracker
    }

    pub fn token_count(&self) -> usize {
        self.tracker.token_count()
    }

    pub fn take_pools(&mut self) -> CalibrationPools {
        std::mem::take(&mut self.pools)
    }
}

/// Result of the calibration phase.
#[derive(Debug, Clone)]
pub struct InitOutcome {
    pub paths: Vec<PathSummary>,
    pub thresholds: Option<Thresholds>,
    pub ledger: EvidenceLedger,
    pub normalizer: WeightNormalizer,
    pub pools: CalibrationPools,
    /// Completed answered paths as (answer, raw path confidence).
    pub votes: Vec<(String, f64)>,
    pub tokens: usize,
}

struct PathRun {
    id: usize,
    phase: Phase,
    tokens: usize,
    status: PathStatus,
    pools: CalibrationPools,
}

struct GateContext<'a> {
    cfg: &'a EngineConfig,
    thresholds: Option<Thresholds>,
    collect_pools: bool,
}

type Extractor = dyn Fn(&str) -> Option<String> + Send + Sync;

pub struct Engine {
    cfg: EngineConfig,
    extractor: Box<Extractor>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Result<Self, EngineError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            extractor: Box::new(extract_answer),
        })
    }

    pub fn with_extractor<F>(mut self, extractor: F) -> Self
    where
        F: Fn(&str) -> Option<String> + Send + Sync + 'static,
    {
        self.extractor = Box::new(extractor);
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    fn drive_path(
        &self,
        source: &dyn PathSource,
        id: usize,
        phase: Phase,
        ctx: &GateContext<'_>,
        cancel: &AtomicBool,
    ) -> Result<PathRun, SourceError> {
        let cfg = ctx.cfg;
        let mut state = PathState::new(id, phase);
        let mut gate = PathGate::new(cfg, ctx.thresholds, ctx.collect_pools).expect("window validated >= 2");
        let mut stream = match source.start_path(id) {
            Ok(s) => s,
            Err(SourceError::Path(message)) => {
                return Ok(PathRun {
                    id,
                    phase,
                    tokens: 0,
                    status: PathStatus::Failed { message },
                    pools: CalibrationPools::default(),
                })
            }
            Err(e) => return Err(e),
        };
        let status = loop {
            if cancel.load(Ordering::Acquire) {
                break PathStatus::Cancelled;
            }
            if gate.token_count() >= cfg.max_tokens_per_path {
                break PathStatus::BudgetExhausted;
            }
            match stream.next_event() {
                Ok(PathEvent::Finished { text }) => match gate.tracker().path_confidence() {
                    Ok(c) => {
                        break PathStatus::Completed {
                            answer: (self.extractor)(&text),
                            path_confidence: c,
                        }
                    }
                    Err(e) => break PathStatus::Failed { message: e.to_string() },
                },
                Ok(PathEvent::Token(ev)) => match gate.observe(&ev) {
                    Ok(None) => {}
                    Ok(Some(reason)) => {
                        break PathStatus::Pruned {
                            reason,
                            at_token: gate.token_count(),
                        }
                    }
                    Err(e) => break PathStatus::Failed { message: e.to_string() },
                },
                Err(SourceError::Path(m)) => break PathStatus::Failed { message: m },
                Err(e) => {
                    stream.close(&PathStatus::Failed { message: e.to_string() });
                    return Err(e);
                }
            }
        };
        stream.close(&status);
        state.finish(status.clone()).expect("fresh path is active");
        Ok(PathRun {
            id,
            phase,
            tokens: gate.token_count(),
            status,
            pools: gate.take_pools(),
        })
    }

    /// Runs `ids` with up to `parallelism` in flight, handing each finished
    /// path to `on_done` in completion order. `on_done` returns `true` to
    /// cancel everything still in flight and launch nothing more.
    fn execute<F>(
        &self,
        source: &dyn PathSource,
        phase: Phase,
        ctx: &GateContext<'_>,
        mut next_id: impl FnMut() -> Option<usize>,
        mut on_done: F,
    ) -> Result<(), SourceError>
    where
        F: FnMut(PathRun) -> Result<bool, SourceError>,
    {
        let never = AtomicBool::new(false);
        if self.cfg.parallelism == 1 {
            while let Some(id) = next_id() {
                let run = self.drive_path(source, id, phase, ctx, &never)?;
                if on_done(run)? {
                    break;
                }
            }
            return Ok(());
        }
        std::thread::scope(|scope| {
            let (tx, rx) = mpsc::channel::<(usize, Result<PathRun, SourceError>)>();
            let mut in_flight: BTreeMap<usize, Arc<AtomicBool>> = BTreeMap::new();
            let mut halted = false;
            let mut first_error: Option<SourceError> = None;
            loop {
                while !halted && in_flight.len() < self.cfg.parallelism {
                    let Some(id) = next_id() else { break };
                    let flag = Arc::new(AtomicBool::new(false));
                    in_flight.insert(id, Arc::clone(&flag));
                    let tx = tx.clone();
                    scope.spawn(move || {
                        let result = self.drive_path(source, id, phase, ctx, &flag);
                        let _ = tx.send((id, result));
                    });
                }
                if in_flight.is_empty() {
                    break;
                }
                let (id, result) = rx.recv().expect("workers hold a sender until they report");
                in_flight.remove(&id);
                let halt_now = match result {
                    Ok(run) => match on_done(run) {
                        Ok(h) => h,
                        Err(e) => {
                            first_error.get_or_insert(e);
                            true
                        }
                    },
                    Err(e) => {
                        first_error.get_or_insert(e);
                        true
                    }
                };
                if halt_now && !halted {
                    halted = true;
                    for flag in in_flight.values() {
                        flag.store(true, Ordering::Release);
                    }
                }
            }
            match first_error {
                Some(e) => Err(e),
                None => Ok(()),
            }
        })
    }

    /// Generates the calibration population without pruning and derives
    /// thresholds, weight normalisation and the seeded ledger from it.
    pub fn init_phase(&self, source: &dyn PathSource) -> Result<InitOutcome, EngineError> {
        let cfg = &self.cfg;
        let ctx = GateContext {
            cfg,
            thresholds: None,
            collect_pools: true,
        };
        let mut runs: Vec<PathRun> = Vec::with_capacity(cfg.init_budget);
        let mut ids = 0..cfg.init_budget;
        let outcome = self.execute(source, Phase::Init, &ctx, || ids.next(), |run| {
            runs.push(run);
            Ok(false)
        });
        runs.sort_by_key(|r| r.id);
        if let Err(e) = outcome {
            let paths: Vec<PathSummary> = runs.iter().map(|r| summary(r, None)).collect();
            let votes: Vec<(String, f64)> = runs
                .iter()
                .filter_map(|r| match &r.status {
                    PathStatus::Completed {
                        answer: Some(a),
                        path_confidence,
                    } => Some((a.clone(), *path_confidence)),
                    _ => None,
                })
                .collect();
            let tokens = paths.iter().map(|p| p.tokens).sum();
            let undecided = StopDecision::Continue {
                leader: None,
                posterior: 0.0,
            };
            let report = assemble(paths, &votes, None, &undecided, StopCause::Aborted, tokens);
            return Err(EngineError::Aborted {
                message: e.to_string(),
                report: Box::new(report),
            });
        }

        let mut pools = CalibrationPools::default();
        let mut completed = Vec::new();
        for run in &mut runs {
            pools.extend(std::mem::take(&mut run.pools));
            if let PathStatus::Completed { path_confidence, .. } = run.status {
                completed.push(path_confidence);
            }
        }
        // too few full windows leaves the engine ungated
        let thresholds = pools.calibrate(&cfg.calibration()).ok();
        let normalizer = WeightNormalizer::from_config(cfg, &completed);
        let mut ledger = EvidenceLedger::new();
        let mut votes = Vec::new();
        let mut paths = Vec::with_capacity(runs.len());
        for run in &runs {
            let mut weight = None;
            if let PathStatus::Completed {
                answer: Some(answer),
                path_confidence,
            } = &run.status
            {
                let w = normalizer.weight(*path_confidence);
                ledger.update(answer, w)?;
                votes.push((answer.clone(), *path_confidence));
                weight = Some(w);
            }
            paths.push(summary(run, weight));
        }
        let tokens = paths.iter().map(|p| p.tokens).sum();
        Ok(InitOutcome {
            paths,
            thresholds,
            ledger,
            normalizer,
            pools,
            votes,
            tokens,
        })
    }

    pub fn run(&self, source: &dyn PathSource) -> Result<RunReport, EngineError> {
        let cfg = &self.cfg;
        let policy = cfg.stop_policy();
        let init = self.init_phase(source)?;
        let InitOutcome {
            paths: init_paths,
            thresholds,
            mut ledger,
            normalizer,
            mut votes,
            tokens: init_tokens,
            ..
        } = init;
        let mut paths = init_paths;
        let mut generated = cfg.init_budget;
        let decision = should_stop(&ledger, &policy)?;
        let mut ctl = Controller {
            ledger: &mut ledger,
            votes: &mut votes,
            normalizer,
            policy,
            halted: generated < cfg.budget && decision.is_stop(),
            decision,
            numeric: None,
            runs: Vec::new(),
        };

        let mut source_error = None;
        if !ctl.halted && generated < cfg.budget {
            let ctx = GateContext {
                cfg,
                thresholds,
                collect_pools: false,
            };
            let next = || {
                (generated < cfg.budget).then(|| {
                    generated += 1;
                    generated - 1
                })
            };
            source_error = self
                .execute(source, Phase::Adaptive, &ctx, next, |run| Ok(ctl.absorb(run)))
                .err();
        }
        let Controller {
            halted,
            decision,
            numeric,
            mut runs,
            normalizer,
            ..
        } = ctl;
        if let Some(e) = numeric {
            return Err(EngineError::Numeric(e));
        }
        runs.sort_by_key(|r| r.id);
        for run in &runs {
            let weight = match &run.status {
                PathStatus::Completed {
                    answer: Some(_),
                    path_confidence,
                } => Some(normalizer.weight(*path_confidence)),
                _ => None,
            };
            paths.push(summary(run, weight));
        }
        if let Some(e) = source_error {
            let mut report = assemble(paths, &votes, thresholds, &decision, StopCause::Aborted, init_tokens);
            report.paths_generated = generated;
            return Err(EngineError::Aborted {
                message: e.to_string(),
                report: Box::new(report),
            });
        }
        let cause = if halted {
            StopCause::BayesianEarlyStop
        } else {
            StopCause::BudgetExhausted
        };
        Ok(assemble(paths, &votes, thresholds, &decision, cause, init_tokens))
    }
}

/// Single writer for the ledger during the adaptive phase.
struct Controller<'a> {
    ledger: &'a mut EvidenceLedger,
    votes: &'a mut Vec<(String, f64)>,
    normalizer: WeightNormalizer,
    policy: StopPolicy,
    halted: bool,
    decision: StopDecision,
    numeric: Option<TerminationError>,
    runs: Vec<PathRun>,
}

impl Controller<'_> {
    /// Applies one finished path and re-checks the stopping rule. Returns
    /// `true` once generation should halt.
    fn absorb(&mut self, mut run: PathRun) -> bool {
        if self.halted {
            // finished after the stop fired; excluded from the vote
            if matches!(run.status, PathStatus::Completed { .. }) {
                run.status = PathStatus::Cancelled;
            }
            self.runs.push(run);
            return true;
        }
        if let PathStatus::Completed {
            answer: Some(answer),
            path_confidence,
        } = &run.status
        {
            let w = self.normalizer.weight(*path_confidence);
            if let Err(e) = self.ledger.update(answer, w) {
                self.numeric.get_or_insert(e);
            }
            self.votes.push((answer.clone(), *path_confidence));
        }
        self.runs.push(run);
        match should_stop(self.ledger, &self.policy) {
            Ok(d) => {
                self.halted = d.is_stop();
                self.decision = d;
            }
            Err(e) => {
                self.numeric.get_or_insert(e);
                self.halted = true;
            }
        }
        self.halted
    }
}

fn summary(run: &PathRun, weight: Option<f64>) -> PathSummary {
    PathSummary {
        id: run.id,
        phase: run.phase,
        tokens: run.tokens,
        status: run.status.clone(),
        weight,
    }
}

fn assemble(
    paths: Vec<PathSummary>,
    votes: &[(String, f64)],
    thresholds: Option<Thresholds>,
    decision: &StopDecision,
    stop_cause: StopCause,
    init_tokens: usize,
) -> RunReport {
    let mut pruned = PruneCounts::default();
    let (mut completed, mut failed, mut cancelled) = (0, 0, 0);
    for p in &paths {
        match &p.status {
            PathStatus::Completed { .. } => completed += 1,
            PathStatus::Pruned { reason, .. } => match reason {
                PruneReason::LowConfidence => pruned.low_confidence += 1,
                PruneReason::Instability => pruned.instability += 1,
            },
            PathStatus::Failed { .. } | PathStatus::BudgetExhausted => failed += 1,
            PathStatus::Cancelled => cancelled += 1,
            PathStatus::Active => {}
        }
    }
    let final_answer = weighted_vote(votes.iter().map(|(a, c)| (a.as_str(), *c))).ok();
    let vote_totals = vote_totals(votes.iter().map(|(a, c)| (a.as_str(), *c)));
    RunReport {
        final_answer,
        stop_cause,
        paths_generated: paths.len(),
        paths_completed: completed,
        paths_pruned: pruned,
        paths_failed: failed,
        paths_cancelled: cancelled,
        tokens_consumed_total: paths.iter().map(|p| p.tokens).sum(),
        init_tokens,
        thresholds,
        posterior: decision.posterior(),
        vote_totals,
        paths,
    }
}

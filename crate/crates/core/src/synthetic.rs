//! Monte Carlo laboratory.
//!
//! Synthetic reasoning paths with controlled correctness, vote weight and
//! confidence shape; stopping-time comparison of weighted, frequency and
//! fixed-budget voting; the acceleration condition; pruning separation
//! between trajectory families; and whole-engine runs.
//!
//! Every draw for path `i` of a source with seed `s` comes from
//! `stream_rng(s, i)`, vote first, so vote sequences can be replayed without
//! generating tokens. Trial `t` of an experiment seeded with `s` uses the
//! source seed `mix_seed(s, t)`.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::TokenEvent;
use crate::engine::{Engine, EngineConfig, EngineError, PathEvent, PathGate, PathSource, PathStatus, PathStream, SourceError, StopCause};
use crate::parallel::{mix_seed, stream_rng, Execution};
use crate::pruning::{percentile, CalibrationPools, CalibrationSettings, PruneReason, PruningError, Thresholds};
use crate::termination::{should_stop, EvidenceLedger, StopPolicy, TerminationError};

pub const SCHEMA_VERSION: u32 = 1;

/// Answer label carried by correct paths.
pub const CORRECT: &str = "correct";

/// Lower clamp on the simulated global confidence.
const MIN_LEVEL: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("inconsistent moments: {0}")]
    InconsistentMoments(String),
    #[error(transparent)]
    Termination(#[from] TerminationError),
    #[error(transparent)]
    Pruning(#[from] PruningError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Flat, high global confidence.
    StableHigh,
    /// Flat with one smooth dip that fully recovers.
    DipRecover,
    /// Linear downward drift plus noise.
    Degenerating,
    /// Uncorrelated jitter around a stagnant mean.
    IsotropicNoise,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::StableHigh,
        Family::DipRecover,
        Family::Degenerating,
        Family::IsotropicNoise,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Family::StableHigh => "stable_high",
            Family::DipRecover => "dip_recover",
            Family::Degenerating => "degenerating",
            Family::IsotropicNoise => "isotropic_noise",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = SyntheticError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| SyntheticError::InvalidSpec(format!("unknown family {s:?}")))
    }
}

/// Generator parameters. Confidence levels, noise, dip depth and drift are
/// in units of global confidence; lengths are in tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    /// Probability a path is correct.
    pub p: f64,
    pub mu_c: f64,
    pub mu_i: f64,
    /// Weight variance as a fraction of its maximum `mu (1 - mu)`. Zero is
    /// a point mass; otherwise weights are Beta with the given mean.
    pub weight_spread: f64,
    /// Number of distinct wrong answers, drawn uniformly.
    pub distractors: usize,
    pub family: Family,
    pub path_len: usize,
    /// Path length is uniform on `path_len ± path_len_jitter`.
    pub path_len_jitter: usize,
    pub top_k: usize,
    /// Base confidence level of a weight-0 path.
    pub level_lo: f64,
    /// Base confidence level of a weight-1 path.
    pub level_hi: f64,
    pub noise: f64,
    /// Noise on stable_high paths; zero gives a constant trajectory.
    pub stable_noise: f64,
    /// Noise on isotropic_noise paths.
    pub jitter: f64,
    pub dip_depth: f64,
    pub dip_width: usize,
    /// Total decline of a degenerating path over its length.
    pub drift: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            p: 0.6,
            mu_c: 0.8,
            mu_i: 0.4,
            weight_spread: 0.0,
            distractors: 3,
            family: Family::StableHigh,
            path_len: 256,
            path_len_jitter: 0,
            top_k: 20,
            level_lo: 6.0,
            level_hi: 10.0,
            noise: 0.25,
            stable_noise: 0.0,
            jitter: 0.75,
            dip_depth: 0.4,
            dip_width: 48,
            drift: 4.0,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |m: String| Err(SyntheticError::InvalidSpec(m));
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.p) {
            return bad(format!("p must lie in (0, 1), got {}", self.p));
        }
        if !open_unit(self.mu_c) || !open_unit(self.mu_i) {
            return bad(format!("mu_c and mu_i must lie in (0, 1), got {} and {}", self.mu_c, self.mu_i));
        }
        if !(0.0..1.0).contains(&self.weight_spread) {
            return bad(format!("weight_spread must lie in [0, 1), got {}", self.weight_spread));
        }
        if self.distractors < 1 {
            return bad("distractors must be >= 1".into());
        }
        if self.top_k < 1 {
            return bad("top_k must be >= 1".into());
        }
        if self.path_len < 2 || self.path_len_jitter >= self.path_len - 1 {
            return bad(format!(
                "need path_len >= 2 and path_len_jitter < path_len - 1, got {} and {}",
                self.path_len, self.path_len_jitter
            ));
        }
        let finite = [
            self.level_lo,
            self.level_hi,
            self.noise,
            self.stable_noise,
            self.jitter,
            self.dip_depth,
            self.drift,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("levels, noise, dip_depth and drift must be finite".into());
        }
        if self.noise < 0.0 || self.stable_noise < 0.0 || self.jitter < 0.0 || self.dip_depth < 0.0 {
            return bad("noise, stable_noise, jitter and dip_depth must be >= 0".into());
        }
        if !(self.level_lo <= self.level_hi) {
            return bad(format!("need level_lo <= level_hi, got {} and {}", self.level_lo, self.level_hi));
        }
        if self.dip_width < 2 {
            return bad("dip_width must be >= 2".into());
        }
        Ok(())
    }

    /// Second moment of the weight given the mean under the spread model.
    pub fn second_moment(&self, mu: f64) -> f64 {
        mu * mu + self.weight_spread * mu * (1.0 - mu)
    }

    pub fn condition(&self) -> Result<ConditionReport, SyntheticError> {
        sufficient_condition(
            self.p,
            self.mu_c,
            self.mu_i,
            self.second_moment(self.mu_c),
            self.second_moment(self.mu_i),
        )
    }

    fn level(&self, weight: f64) -> f64 {
        self.level_lo + weight * (self.level_hi - self.level_lo)
    }
}

/// One drawn vote: the answer, its ground truth and its weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub answer: String,
    pub correct: bool,
    pub weight: f64,
}

fn draw_weight(spec: &GeneratorSpec, mu: f64, rng: &mut ChaCha8Rng) -> f64 {
    if spec.weight_spread == 0.0 {
        return mu;
    }
    let kappa = 1.0 / spec.weight_spread - 1.0;
    Beta::new(mu * kappa, (1.0 - mu) * kappa)
        .expect("validated spec gives positive shape parameters")
        .sample(rng)
}

/// Draws the answer and weight; always the first use of a path's RNG.
pub fn sample_vote(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Vote {
    let correct = rng.random::<f64>() < spec.p;
    let answer = if correct {
        CORRECT.to_string()
    } else {
        format!("distractor-{}", rng.random_range(1..=spec.distractors))
    };
    let mu = if correct { spec.mu_c } else { spec.mu_i };
    let weight = draw_weight(spec, mu, rng);
    Vote { answer, correct, weight }
}

/// Global-confidence trajectory of one path.
pub fn trajectory(spec: &GeneratorSpec, family: Family, weight: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let jitter = spec.path_len_jitter;
    let len = spec.path_len - jitter + rng.random_range(0..=2 * jitter);
    let base = spec.level(weight);
    let centre = match family {
        Family::DipRecover => {
            let lo = len / 4;
            rng.random_range(lo..=(3 * len / 4).max(lo)) as f64
        }
        _ => 0.0,
    };
    let mut noise = |sd: f64| -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        sd * z
    };
    let raw: Vec<f64> = match family {
        Family::StableHigh => (0..len).map(|_| base + noise(spec.stable_noise)).collect(),
        Family::IsotropicNoise => (0..len).map(|_| base + noise(spec.jitter)).collect(),
        Family::Degenerating => (0..len)
            .map(|t| base - spec.drift * t as f64 / len as f64 + noise(spec.noise))
            .collect(),
        Family::DipRecover => {
            let half = spec.dip_width as f64 / 2.0;
            (0..len)
                .map(|t| {
                    let d = (t as f64 - centre).abs();
                    let dip = if d < half {
                        spec.dip_depth * 0.5 * (1.0 + (std::f64::consts::PI * d / half).cos())
                    } else {
                        0.0
                    };
                    base - dip + noise(spec.noise)
                })
                .collect()
        }
    };
    raw.into_iter().map(|g| g.max(MIN_LEVEL)).collect()
}

/// Top-k log-probabilities whose negated mean is `level`.
///
/// The top token gets probability `max(1 - e^{-level/2}, e^{-level})` and
/// the remaining `k - 1` share the rest of the log mass equally.
pub fn encode_event(position: usize, level: f64, k: usize) -> TokenEvent {
    if k == 1 {
        return TokenEvent::new(position, vec![-level]);
    }
    let top = (1.0 - (-level / 2.0).exp()).max((-level).exp()).ln();
    let rest = -(k as f64 * level + top) / (k - 1) as f64;
    let mut lps = Vec::with_capacity(k);
    lps.push(top);
    lps.extend(std::iter::repeat_n(rest.min(top), k - 1));
    TokenEvent::new(position, lps)
}

/// A fully drawn synthetic path.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPath {
    pub vote: Vote,
    pub family: Family,
    pub trajectory: Vec<f64>,
    pub top_k: usize,
}

impl SyntheticPath {
    pub fn events(&self) -> impl Iterator<Item = TokenEvent> + '_ {
        self.trajectory
            .iter()
            .enumerate()
            .map(|(i, &g)| encode_event(i, g, self.top_k))
    }

    pub fn text(&self) -> String {
        format!("Therefore the answer is \\boxed{{{}}}.", self.vote.answer)
    }
}

pub fn sample_path(spec: &GeneratorSpec, family: Family, rng: &mut ChaCha8Rng) -> SyntheticPath {
    let vote = sample_vote(spec, rng);
    let trajectory = trajectory(spec, family, vote.weight, rng);
    SyntheticPath {
        vote,
        family,
        trajectory,
        top_k: spec.top_k,
    }
}

/// Engine source drawing path `i` from `stream_rng(spec.seed, i)`.
#[derive(Debug, Clone)]
pub struct SyntheticSource {
    spec: GeneratorSpec,
    init_family: Option<(Family, usize)>,
}

impl SyntheticSource {
    pub fn new(spec: GeneratorSpec) -> Result<Self, SyntheticError> {
        spec.validate()?;
        Ok(Self { spec, init_family: None })
    }

    /// Paths with index below `count` use `family` instead of the spec's.
    pub fn with_init_family(mut self, family: Family, count: usize) -> Self {
        self.init_family = Some((family, count));
        self
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn family_of(&self, index: usize) -> Family {
        match self.init_family {
            Some((family, count)) if index < count => family,
            _ => self.spec.family,
        }
    }

    /// The vote path `index` will carry, without drawing its tokens.
    pub fn vote(&self, index: usize) -> Vote {
        sample_vote(&self.spec, &mut stream_rng(self.spec.seed, index as u64))
    }

    pub fn path(&self, index: usize) -> SyntheticPath {
        let mut rng = stream_rng(self.spec.seed, index as u64);
        sample_path(&self.spec, self.family_of(index), &mut rng)
    }
}

struct SyntheticStream {
    path: SyntheticPath,
    next: usize,
}

impl PathStream for SyntheticStream {
    fn next_event(&mut self) -> Result<PathEvent, SourceError> {
        let i = self.next;
        self.next += 1;
        match self.path.trajectory.get(i) {
            Some(&g) => Ok(PathEvent::Token(encode_event(i, g, self.path.top_k))),
            None => Ok(PathEvent::Finished { text: self.path.text() }),
        }
    }
}

impl PathSource for SyntheticSource {
    fn start_path(&self, path_index: usize) -> Result<Box<dyn PathStream + '_>, SourceError> {
        Ok(Box::new(SyntheticStream {
            path: self.path(path_index),
            next: 0,
        }))
    }
}

/// Both sides of the acceleration condition
/// `(p mu_c - q mu_i) / sqrt(p m2_c + q m2_i) > (p - q) / sqrt(4 p q)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

pub fn sufficient_condition(p: f64, mu_c: f64, mu_i: f64, m2_c: f64, m2_i: f64) -> Result<ConditionReport, SyntheticError> {
    const TOL: f64 = 1e-12;
    let bad = |m: String| Err(SyntheticError::InconsistentMoments(m));
    if !(p > 0.0 && p < 1.0) {
        return bad(format!("p must lie in (0, 1), got {p}"));
    }
    for (name, mu, m2) in [("correct", mu_c, m2_c), ("incorrect", mu_i, m2_i)] {
        if !(0.0..=1.0).contains(&mu) || !m2.is_finite() {
            return bad(format!("{name} mean must lie in [0, 1], got {mu}"));
        }
        if m2 < mu * mu - TOL || m2 > mu + TOL {
            return bad(format!(
                "{name} second moment {m2} outside [mean^2, mean] = [{}, {mu}]",
                mu * mu
            ));
        }
    }
    let q = 1.0 - p;
    let denom = (p * m2_c + q * m2_i).sqrt();
    if denom == 0.0 {
        return bad("all weights are zero".into());
    }
    let lhs = (p * mu_c - q * mu_i) / denom;
    let rhs = (p - q) / (4.0 * p * q).sqrt();
    Ok(ConditionReport { lhs, rhs, holds: lhs > rhs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Confidence-weighted Beta evidence.
    Cow,
    /// Count-based Beta evidence.
    Frq,
    /// Fixed budget, plain majority.
    Sc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingTimeSample {
    pub method: Method,
    pub n_paths_at_stop: usize,
    pub answer: String,
    pub correct: bool,
    pub tokens: u64,
    /// Hit the vote cap without the stopping rule firing.
    pub censored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub schema_version: u32,
    pub trial: usize,
    pub samples: Vec<StoppingTimeSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub mean_n: f64,
    pub p10_n: f64,
    pub median_n: f64,
    pub p90_n: f64,
    pub accuracy: f64,
    pub tokens_total: u64,
    pub censored: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSettings {
    pub trials: usize,
    /// Votes drawn at most per trial before a sequential method gives up.
    pub max_votes: usize,
    /// Votes consumed by the fixed-budget reference.
    pub sc_budget: usize,
    /// Multiplies every drawn weight before the weighted update.
    pub weight_scale: f64,
    pub policy: StopPolicy,
    pub execution: Execution,
}

impl Default for CompareSettings {
    fn default() -> Self {
        Self {
            trials: 1000,
            max_votes: 512,
            sc_budget: 16,
            weight_scale: 1.0,
            policy: StopPolicy::default(),
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingSummary {
    pub schema_version: u32,
    pub spec: GeneratorSpec,
    pub settings: CompareSettings,
    pub condition: ConditionReport,
    pub cow: MethodSummary,
    pub frq: MethodSummary,
    pub sc: MethodSummary,
    /// Mean of the per-trial difference `N_FrQ - N_CoW`.
    pub mean_paired_difference: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoppingComparison {
    pub summary: StoppingSummary,
    pub records: Vec<TrialRecord>,
}

/// Lazily drawn vote sequence of one trial.
struct VoteSequence<'a> {
    source: &'a SyntheticSource,
    drawn: Vec<Vote>,
}

impl VoteSequence<'_> {
    fn get(&mut self, i: usize) -> &Vote {
        while self.drawn.len() <= i {
            let v = self.source.vote(self.drawn.len());
            self.drawn.push(v);
        }
        &self.drawn[i]
    }
}

fn sequential_stop(
    votes: &mut VoteSequence<'_>,
    method: Method,
    settings: &CompareSettings,
    path_len: usize,
) -> Result<StoppingTimeSample, TerminationError> {
    let mut ledger = EvidenceLedger::new();
    let mut n = 0;
    let mut censored = true;
    while n < settings.max_votes {
        let v = votes.get(n);
        match method {
            Method::Frq => ledger.update_frequency(&v.answer),
            _ => ledger.update(&v.answer, (v.weight * settings.weight_scale).min(1.0))?,
        }
        n += 1;
        if should_stop(&ledger, &settings.policy)?.is_stop() {
            censored = false;
            break;
        }
    }
    let answer = ledger.leader().unwrap_or_default().to_string();
    Ok(StoppingTimeSample {
        method,
        n_paths_at_stop: n,
        correct: answer == CORRECT,
        answer,
        tokens: (n * path_len) as u64,
        censored,
    })
}

/// Plain majority, ties to the answer seen first.
pub fn majority_vote<'a>(answers: impl IntoIterator<Item = &'a str>) -> Option<String> {
    let mut counts: IndexMap<&str, usize> = IndexMap::new();
    for a in answers {
        *counts.entry(a).or_insert(0) += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    for (a, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((a, c));
        }
    }
    best.map(|(a, _)| a.to_string())
}

fn fixed_budget(votes: &mut VoteSequence<'_>, budget: usize, path_len: usize) -> StoppingTimeSample {
    for i in 0..budget {
        votes.get(i);
    }
    let answer = majority_vote(votes.drawn[..budget].iter().map(|v| v.answer.as_str())).unwrap_or_default();
    StoppingTimeSample {
        method: Method::Sc,
        n_paths_at_stop: budget,
        correct: answer == CORRECT,
        answer,
        tokens: (budget * path_len) as u64,
        censored: false,
    }
}

fn summarize(method: Method, samples: &[&StoppingTimeSample]) -> MethodSummary {
    let ns: Vec<f64> = samples.iter().map(|s| s.n_paths_at_stop as f64).collect();
    let q = |pct| percentile(&ns, pct).expect("at least one trial");
    let len = samples.len() as f64;
    MethodSummary {
        method,
        mean_n: ns.iter().sum::<f64>() / len,
        p10_n: q(10.0),
        median_n: q(50.0),
        p90_n: q(90.0),
        accuracy: samples.iter().filter(|s| s.correct).count() as f64 / len,
        tokens_total: samples.iter().map(|s| s.tokens).sum(),
        censored: samples.iter().filter(|s| s.censored).count(),
    }
}

/// Runs `settings.trials` paired trials. Each trial draws one vote sequence
/// and feeds it to the weighted rule, the frequency rule and the
/// fixed-budget majority.
pub fn compare_stopping(spec: &GeneratorSpec, settings: &CompareSettings) -> Result<StoppingComparison, SyntheticError> {
    spec.validate()?;
    settings.policy.validate()?;
    if settings.trials < 1 || settings.max_votes < 1 || settings.sc_budget < 1 {
        return Err(SyntheticError::InvalidSpec(
            "trials, max_votes and sc_budget must be >= 1".into(),
        ));
    }
    if !(settings.weight_scale > 0.0 && settings.weight_scale <= 1.0) {
        return Err(SyntheticError::InvalidSpec(format!(
            "weight_scale must lie in (0, 1], got {}",
            settings.weight_scale
        )));
    }
    let condition = spec.condition()?;
    let results = settings.execution.map_trials(settings.trials, |trial| {
        let trial_spec = GeneratorSpec {
            seed: mix_seed(spec.seed, trial as u64),
            ..spec.clone()
        };
        let source = SyntheticSource {
            spec: trial_spec,
            init_family: None,
        };
        let mut votes = VoteSequence {
            source: &source,
            drawn: Vec::new(),
        };
        let cow = sequential_stop(&mut votes, Method::Cow, settings, spec.path_len)?;
        let frq = sequential_stop(&mut votes, Method::Frq, settings, spec.path_len)?;
        let sc = fixed_budget(&mut votes, settings.sc_budget, spec.path_len);
        Ok::<_, TerminationError>(TrialRecord {
            schema_version: SCHEMA_VERSION,
            trial,
            samples: vec![cow, frq, sc],
        })
    });
    let records = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let by = |i: usize| records.iter().map(|r| &r.samples[i]).collect::<Vec<_>>();
    let diff = records
        .iter()
        .map(|r| r.samples[1].n_paths_at_stop as f64 - r.samples[0].n_paths_at_stop as f64)
        .sum::<f64>()
        / records.len() as f64;
    let summary = StoppingSummary {
        schema_version: SCHEMA_VERSION,
        spec: spec.clone(),
        settings: *settings,
        condition,
        cow: summarize(Method::Cow, &by(0)),
        frq: summarize(Method::Frq, &by(1)),
        sc: summarize(Method::Sc, &by(2)),
        mean_paired_difference: diff,
    };
    Ok(StoppingComparison { summary, records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub p: Vec<f64>,
    pub mu_c: Vec<f64>,
    pub mu_i: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            p: vec![0.55, 0.6, 0.7, 0.8, 0.9],
            mu_c: vec![0.5, 0.7, 0.9],
            mu_i: vec![0.1, 0.3, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub p: f64,
    pub mu_c: f64,
    pub mu_i: f64,
    pub condition: ConditionReport,
    pub mean_n_cow: f64,
    pub mean_n_frq: f64,
    pub censored_cow: usize,
    pub censored_frq: usize,
    pub cow_faster: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub schema_version: u32,
    pub cells: Vec<GridCell>,
    pub cells_holding: usize,
    /// Cells where the condition holds and the weighted rule stopped sooner.
    pub agreeing: usize,
}

impl GridReport {
    pub fn agreement(&self) -> f64 {
        if self.cells_holding == 0 {
            return 1.0;
        }
        self.agreeing as f64 / self.cells_holding as f64
    }
}

/// Stopping-time comparison over every `(p, mu_c, mu_i)` with
/// `mu_c > mu_i`, point-mass weights. Cell `j` is seeded `mix_seed(base.seed, j)`.
pub fn theorem_grid(base: &GeneratorSpec, grid: &GridSpec, settings: &CompareSettings) -> Result<GridReport, SyntheticError> {
    let mut cells = Vec::new();
    let mut index = 0u64;
    for &p in &grid.p {
        for &mu_c in &grid.mu_c {
            for &mu_i in &grid.mu_i {
                if mu_c <= mu_i {
                    continue;
                }
                let spec = GeneratorSpec {
                    p,
                    mu_c,
                    mu_i,
                    weight_spread: 0.0,
                    seed: mix_seed(base.seed, index),
                    ..base.clone()
                };
                index += 1;
                let s = compare_stopping(&spec, settings)?.summary;
                cells.push(GridCell {
                    p,
                    mu_c,
                    mu_i,
                    condition: s.condition,
                    mean_n_cow: s.cow.mean_n,
                    mean_n_frq: s.frq.mean_n,
                    censored_cow: s.cow.censored,
                    censored_frq: s.frq.censored,
                    cow_faster: s.cow.mean_n < s.frq.mean_n,
                });
            }
        }
    }
    let cells_holding = cells.iter().filter(|c| c.condition.holds).count();
    let agreeing = cells.iter().filter(|c| c.condition.holds && c.cow_faster).count();
    Ok(GridReport {
        schema_version: SCHEMA_VERSION,
        cells,
        cells_holding,
        agreeing,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruningSettings {
    /// Paths per family in the calibration population.
    pub init_paths_per_family: usize,
    pub init_families: Vec<Family>,
    /// Evaluated paths per family.
    pub paths_per_family: usize,
    pub window: usize,
    pub eta: f64,
    pub stride: usize,
    pub calibration: CalibrationSettings,
    pub execution: Execution,
}

impl Default for PruningSettings {
    fn default() -> Self {
        Self {
            init_paths_per_family: 16,
            init_families: Family::ALL.to_vec(),
            paths_per_family: 500,
            window: 64,
            eta: 0.5,
            stride: 1,
            calibration: CalibrationSettings::default(),
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyOutcome {
    pub family: Family,
    pub paths: usize,
    pub pruned_low_confidence: usize,
    pub pruned_instability: usize,
    pub survived: usize,
    pub survival_rate: f64,
    pub prune_rate: f64,
    /// Median instability over every window of every path, gated or not.
    pub median_instability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningReport {
    pub schema_version: u32,
    pub thresholds: Thresholds,
    pub families: Vec<FamilyOutcome>,
}

impl PruningReport {
    pub fn family(&self, family: Family) -> Option<&FamilyOutcome> {
        self.families.iter().find(|f| f.family == family)
    }
}

struct GatedPath {
    pruned: Option<PruneReason>,
    instability: Vec<f64>,
}

fn gate_path(path: &SyntheticPath, cfg: &EngineConfig, thresholds: Option<Thresholds>) -> Result<(GatedPath, CalibrationPools), SyntheticError> {
    let mut gate = PathGate::new(cfg, thresholds, true).map_err(|e| SyntheticError::InvalidSpec(e.to_string()))?;
    let mut pruned = None;
    for ev in path.events() {
        let r = gate.observe(&ev).map_err(|e| SyntheticError::InvalidSpec(e.to_string()))?;
        if pruned.is_none() {
            pruned = r;
        }
    }
    let pools = gate.take_pools();
    Ok((
        GatedPath {
            pruned,
            instability: pools.instability.clone(),
        },
        pools,
    ))
}

/// Calibrates thresholds on a mixed unpruned population, then gates
/// `paths_per_family` fresh paths of each family.
///
/// Calibration paths use source seed `mix_seed(spec.seed, 0)`, the paths
/// of the `j`-th evaluated family use `mix_seed(spec.seed, j + 1)`.
pub fn pruning_separation_experiment(
    spec: &GeneratorSpec,
    families: &[Family],
    settings: &PruningSettings,
) -> Result<PruningReport, SyntheticError> {
    spec.validate()?;
    if settings.init_families.is_empty() || settings.init_paths_per_family == 0 {
        return Err(SyntheticError::InvalidSpec("calibration population is empty".into()));
    }
    let cfg = EngineConfig {
        window: settings.window,
        eta: settings.eta,
        stride: settings.stride,
        calibration_stride: 1,
        top_k: spec.top_k,
        ..EngineConfig::default()
    };
    if settings.window < 2 {
        return Err(SyntheticError::InvalidSpec("window must be >= 2".into()));
    }
    let init_seed = mix_seed(spec.seed, 0);
    let n_init = settings.init_paths_per_family * settings.init_families.len();
    let init = settings.execution.map_trials(n_init, |i| {
        let family = settings.init_families[i % settings.init_families.len()];
        let path = sample_path(spec, family, &mut stream_rng(init_seed, i as u64));
        gate_path(&path, &cfg, None).map(|(_, pools)| pools)
    });
    let mut pools = CalibrationPools::default();
    for p in init {
        pools.extend(p?);
    }
    let thresholds = pools.calibrate(&settings.calibration)?;

    let mut outcomes = Vec::with_capacity(families.len());
    for (j, &family) in families.iter().enumerate() {
        let seed = mix_seed(spec.seed, j as u64 + 1);
        let gated = settings.execution.map_trials(settings.paths_per_family, |i| {
            let path = sample_path(spec, family, &mut stream_rng(seed, i as u64));
            gate_path(&path, &cfg, Some(thresholds)).map(|(g, _)| g)
        });
        let gated = gated.into_iter().collect::<Result<Vec<_>, _>>()?;
        let count = |r| gated.iter().filter(|g| g.pruned == Some(r)).count();
        let low = count(PruneReason::LowConfidence);
        let inst = count(PruneReason::Instability);
        let all_r: Vec<f64> = gated.iter().flat_map(|g| g.instability.iter().copied()).collect();
        let n = gated.len();
        let survived = n - low - inst;
        outcomes.push(FamilyOutcome {
            family,
            paths: n,
            pruned_low_confidence: low,
            pruned_instability: inst,
            survived,
            survival_rate: survived as f64 / n as f64,
            prune_rate: (low + inst) as f64 / n as f64,
            median_instability: percentile(&all_r, 50.0).ok(),
        });
    }
    Ok(PruningReport {
        schema_version: SCHEMA_VERSION,
        thresholds,
        families: outcomes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineTrialRecord {
    pub schema_version: u32,
    pub trial: usize,
    pub paths_generated: usize,
    pub paths_pruned: usize,
    pub tokens: usize,
    pub stop_cause: StopCause,
    pub answer: Option<String>,
    pub correct: bool,
    /// Plain majority over the first `budget` votes of the same source.
    pub sc_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineMcSummary {
    pub schema_version: u32,
    pub trials: usize,
    pub budget: usize,
    pub mean_paths: f64,
    /// `mean_paths / budget`.
    pub path_fraction: f64,
    pub mean_tokens: f64,
    pub accuracy: f64,
    pub sc_accuracy: f64,
    pub early_stops: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineMonteCarlo {
    pub summary: EngineMcSummary,
    pub records: Vec<EngineTrialRecord>,
}

/// Full engine runs on synthetic sources against a fixed-budget majority
/// over the same path draws.
pub fn engine_monte_carlo(
    spec: &GeneratorSpec,
    cfg: &EngineConfig,
    trials: usize,
    execution: Execution,
) -> Result<EngineMonteCarlo, SyntheticError> {
    spec.validate()?;
    if trials < 1 {
        return Err(SyntheticError::InvalidSpec("trials must be >= 1".into()));
    }
    let engine = Engine::new(cfg.clone())?;
    let results = execution.map_trials(trials, |trial| {
        let source = SyntheticSource::new(GeneratorSpec {
            seed: mix_seed(spec.seed, trial as u64),
            ..spec.clone()
        })?;
        let report = engine.run(&source)?;
        let sc_votes: Vec<Vote> = (0..cfg.budget).map(|i| source.vote(i)).collect();
        let sc = majority_vote(sc_votes.iter().map(|v| v.answer.as_str()));
        let pruned = report
            .paths
            .iter()
            .filter(|p| matches!(p.status, PathStatus::Pruned { .. }))
            .count();
        Ok::<_, SyntheticError>(EngineTrialRecord {
            schema_version: SCHEMA_VERSION,
            trial,
            paths_generated: report.paths_generated,
            paths_pruned: pruned,
            tokens: report.tokens_consumed_total,
            stop_cause: report.stop_cause,
            correct: report.final_answer.as_deref() == Some(CORRECT),
            answer: report.final_answer,
            sc_correct: sc.as_deref() == Some(CORRECT),
        })
    });
    let records = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let n = records.len() as f64;
    let mean_paths = records.iter().map(|r| r.paths_generated as f64).sum::<f64>() / n;
    let summary = EngineMcSummary {
        schema_version: SCHEMA_VERSION,
        trials,
        budget: cfg.budget,
        mean_paths,
        path_fraction: mean_paths / cfg.budget as f64,
        mean_tokens: records.iter().map(|r| r.tokens as f64).sum::<f64>() / n,
        accuracy: records.iter().filter(|r| r.correct).count() as f64 / n,
        sc_accuracy: records.iter().filter(|r| r.sc_correct).count() as f64 / n,
        early_stops: records
            .iter()
            .filter(|r| r.stop_cause == StopCause::BayesianEarlyStop)
            .count(),
    };
    Ok(EngineMonteCarlo { summary, records })
}

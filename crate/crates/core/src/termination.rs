//! Confidence-weighted Beta evidence per candidate answer and the
//! posterior-majority stopping rule.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const CF_MAX_ITER: usize = 300;
const CF_REL_TOL: f64 = 1e-12;
const CF_TINY: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TerminationError {
    #[error("incomplete beta domain error: x={x}, a={a}, b={b}")]
    Domain { x: f64, a: f64, b: f64 },
    #[error("incomplete beta continued fraction did not converge in {iterations} iterations (x={x}, a={a}, b={b})")]
    NonConvergence {
        x: f64,
        a: f64,
        b: f64,
        iterations: usize,
    },
    #[error("vote weight must be finite and within [0, 1], got {0}")]
    InvalidWeight(f64),
    #[error("invalid stop policy: {0}")]
    InvalidPolicy(String),
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Regularized incomplete beta function I_x(a, b), the Beta(a, b) CDF at `x`.
///
/// Evaluated with the modified Lentz continued fraction; for
/// `x > a / (a + b)` the symmetric form `1 - I_{1-x}(b, a)` is used instead.
pub fn reg_inc_beta(x: f64, a: f64, b: f64) -> Result<f64, TerminationError> {
    let domain_ok = x.is_finite()
        && (0.0..=1.0).contains(&x)
        && a.is_finite()
        && a > 0.0
        && b.is_finite()
        && b > 0.0;
    if !domain_ok {
        return Err(TerminationError::Domain { x, a, b });
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let ln_front = a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b);
    if x <= a / (a + b) {
        let cf = beta_continued_fraction(x, a, b)?;
        Ok((ln_front.exp() * cf / a).clamp(0.0, 1.0))
    } else {
        let cf = beta_continued_fraction(1.0 - x, b, a)?;
        Ok((1.0 - ln_front.exp() * cf / b).clamp(0.0, 1.0))
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> Result<f64, TerminationError> {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < CF_TINY {
        d = CF_TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;

        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        h *= d * c;

        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < CF_REL_TOL {
            return Ok(h);
        }
    }
    Err(TerminationError::NonConvergence {
        x,
        a,
        b,
        iterations: CF_MAX_ITER,
    })
}

/// Majority fraction and posterior threshold for the stopping rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopPolicy {
    pub gamma: f64,
    pub tau_stop: f64,
}

impl Default for StopPolicy {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            tau_stop: 0.95,
        }
    }
}

impl StopPolicy {
    pub fn new(gamma: f64, tau_stop: f64) -> Result<Self, TerminationError> {
        let policy = Self { gamma, tau_stop };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), TerminationError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(TerminationError::InvalidPolicy(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.tau_stop > 0.0 && self.tau_stop < 1.0) {
            return Err(TerminationError::InvalidPolicy(format!(
                "tau_stop must lie in (0, 1), got {}",
                self.tau_stop
            )));
        }
        Ok(())
    }
}

/// Accumulated vote weight per answer, in first-registration order, under a
/// Beta(1, 1) prior.
///
/// For answer `u` with weight `W_u` and total `W`, the posterior on its
/// winning share is Beta(1 + W_u, 1 + W - W_u).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceLedger {
    weights: IndexMap<String, f64>,
    total_weight: f64,
    votes: usize,
}

impl Default for EvidenceLedger {
    fn default() -> Self {
        Self::new()
    }
}

impl EvidenceLedger {
    pub const PRIOR_ALPHA: f64 = 1.0;
    pub const PRIOR_BETA: f64 = 1.0;

    pub fn new() -> Self {
        Self {
            weights: IndexMap::new(),
            total_weight: 0.0,
            votes: 0,
        }
    }

    pub fn update(&mut self, answer: &str, weight: f64) -> Result<(), TerminationError> {
        if !weight.is_finite() || !(0.0..=1.0).contains(&weight) {
            return Err(TerminationError::InvalidWeight(weight));
        }
        *self.weights.entry(answer.to_string()).or_insert(0.0) += weight;
        self.total_weight += weight;
        self.votes += 1;
        Ok(())
    }

    /// Unweighted update, the frequency-based comparator.
    pub fn update_frequency(&mut self, answer: &str) {
        self.update(answer, 1.0)
            .expect("unit weight is always within [0, 1]");
    }

    pub fn weight(&self, answer: &str) -> f64 {
        self.weights.get(answer).copied().unwrap_or(0.0)
    }

    pub fn alpha(&self, answer: &str) -> f64 {
        Self::PRIOR_ALPHA + self.weight(answer)
    }

    pub fn beta(&self, answer: &str) -> f64 {
        Self::PRIOR_BETA + (self.total_weight - self.weight(answer))
    }

    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    pub fn votes(&self) -> usize {
        self.votes
    }

    pub fn is_empty(&self) -> bool {
        self.votes == 0
    }

    /// Answers with their accumulated weight, first-registered first.
    pub fn answers(&self) -> impl Iterator<Item = (&str, f64)> {
        self.weights.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Answer with the largest alpha; ties go to the earliest registered.
    pub fn leader(&self) -> Option<&str> {
        let mut best: Option<(&str, f64)> = None;
        for (answer, w) in self.answers() {
            match best {
                Some((_, bw)) if w <= bw => {}
                _ => best = Some((answer, w)),
            }
        }
        best.map(|(a, _)| a)
    }

    /// P(p_u > gamma | data) = 1 - I_gamma(alpha_u, beta_u).
    pub fn posterior_majority(&self, answer: &str, gamma: f64) -> Result<f64, TerminationError> {
        Ok(1.0 - reg_inc_beta(gamma, self.alpha(answer), self.beta(answer))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum StopDecision {
    Stop { leader: String, posterior: f64 },
    Continue { leader: Option<String>, posterior: f64 },
}

impl StopDecision {
    pub fn is_stop(&self) -> bool {
        matches!(self, StopDecision::Stop { .. })
    }

    pub fn posterior(&self) -> f64 {
        match self {
            StopDecision::Stop { posterior, .. } | StopDecision::Continue { posterior, .. } => *posterior,
        }
    }
}

/// Stops once the leader's posterior probability of holding more than a
/// `gamma` share exceeds `tau_stop`. An empty ledger never stops.
pub fn should_stop(ledger: &EvidenceLedger, policy: &StopPolicy) -> Result<StopDecision, TerminationError> {
    policy.validate()?;
    let Some(leader) = ledger.leader() else {
        let posterior = 1.0 - reg_inc_beta(policy.gamma, EvidenceLedger::PRIOR_ALPHA, EvidenceLedger::PRIOR_BETA)?;
        return Ok(StopDecision::Continue {
            leader: None,
            posterior,
        });
    };
    let posterior = ledger.posterior_majority(leader, policy.gamma)?;
    Ok(if posterior > policy.tau_stop {
        StopDecision::Stop {
            leader: leader.to_string(),
            posterior,
        }
    } else {
        StopDecision::Continue {
            leader: Some(leader.to_string()),
            posterior,
        }
    })
}

/// Number of unanimous votes of constant weight needed before the rule fires.
pub fn unanimous_stop_count(weight: f64, policy: &StopPolicy, max_votes: usize) -> Result<Option<usize>, TerminationError> {
    let mut ledger = EvidenceLedger::new();
    for n in 1..=max_votes {
        ledger.update("u", weight)?;
        if should_stop(&ledger, policy)?.is_stop() {
            return Ok(Some(n));
        }
    }
    Ok(None)
}

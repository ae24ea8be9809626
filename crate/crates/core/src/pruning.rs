//! Trend-aware stratified pruning.
//!
//! A path is gated in three tiers once its window is full: a fast pass on
//! high local group confidence, a hard drop on low global group confidence,
//! and otherwise a phase-space check. The phase-space check embeds the
//! window of global confidences as (position, velocity) pairs, takes the
//! closed-form eigendecomposition of their 2x2 second-moment matrix, and
//! prunes when the resulting instability score is an outlier relative to the
//! calibration population.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this window standard deviation the state matrix is degenerate.
pub const EPS_STD: f64 = 1e-9;
/// Below this eigenvalue sum the spectrum carries no direction.
pub const EPS_EIG: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PruningError {
    #[error("trend window needs at least 2 values, got {0}")]
    InsufficientWindow(usize),
    #[error("non-finite confidence in trend window")]
    NonFinite,
    #[error("calibration needs at least {needed} values, got {got}")]
    InsufficientCalibration { needed: usize, got: usize },
    #[error("percentile must lie in [0, 100], got {0}")]
    InvalidPercentile(f64),
}

/// Window embedded as mean-centred, sigma-normalised (position, velocity) rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseStateMatrix {
    rows: Vec<[f64; 2]>,
    window_mean: f64,
    window_std: f64,
}

impl PhaseStateMatrix {
    pub fn rows(&self) -> &[[f64; 2]] {
        &self.rows
    }

    pub fn window_mean(&self) -> f64 {
        self.window_mean
    }

    pub fn window_std(&self) -> f64 {
        self.window_std
    }

    /// Σ = ZᵀZ / (k_w − 1) as (xx, xy, yy). The velocity column is not
    /// re-centred.
    pub fn second_moment(&self) -> [f64; 3] {
        let mut xx = 0.0;
        let mut xy = 0.0;
        let mut yy = 0.0;
        for [p, v] in &self.rows {
            xx += p * p;
            xy += p * v;
            yy += v * v;
        }
        let denom = (self.rows.len() - 1) as f64;
        [xx / denom, xy / denom, yy / denom]
    }

    pub fn mean_velocity(&self) -> f64 {
        self.rows.iter().map(|r| r[1]).sum::<f64>() / self.rows.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StateMatrix {
    Matrix(PhaseStateMatrix),
    /// Window standard deviation below [`EPS_STD`].
    Degenerate { window_mean: f64, window_std: f64 },
}

/// Builds the position-velocity embedding of a window of global confidences.
///
/// `prev` is the value just before the window; the first row's velocity is
/// zero without it.
pub fn build_state_matrix(window: &[f64], prev: Option<f64>) -> Result<StateMatrix, PruningError> {
    let n = window.len();
    if n < 2 {
        return Err(PruningError::InsufficientWindow(n));
    }
    if window.iter().chain(prev.iter()).any(|v| !v.is_finite()) {
        return Err(PruningError::NonFinite);
    }
    let mean = window.iter().sum::<f64>() / n as f64;
    let var = window.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std < EPS_STD {
        return Ok(StateMatrix::Degenerate {
            window_mean: mean,
            window_std: std,
        });
    }
    let rows = window
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let before = if i == 0 { prev } else { Some(window[i - 1]) };
            let velocity = before.map_or(0.0, |b| (c - b) / std);
            [(c - mean) / std, velocity]
        })
        .collect();
    Ok(StateMatrix::Matrix(PhaseStateMatrix {
        rows,
        window_mean: mean,
        window_std: std,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub lambda1: f64,
    pub lambda2: f64,
    pub v1: [f64; 2],
    pub mean_velocity: f64,
}

/// Closed-form eigendecomposition of the symmetric matrix [[a, b], [b, c]].
///
/// Returns (λ1, λ2, v1) with λ1 ≥ λ2 and v1 the unit eigenvector of λ1
/// whose first nonzero component is positive.
pub fn symmetric_eigen_2x2(a: f64, b: f64, c: f64) -> (f64, f64, [f64; 2]) {
    let half_trace = 0.5 * (a + c);
    let radius = (0.5 * (a - c)).hypot(b);
    let lambda1 = half_trace + radius;
    let det = a * c - b * b;
    // avoid cancellation in the smaller root
    let lambda2 = if lambda1 != 0.0 {
        det / lambda1
    } else {
        half_trace - radius
    };
    let v = if b == 0.0 {
        if a >= c {
            [1.0, 0.0]
        } else {
            [0.0, 1.0]
        }
    } else {
        // two algebraically equivalent candidates; keep the better conditioned one
        let first = [lambda1 - c, b];
        let second = [b, lambda1 - a];
        let n1 = first[0].hypot(first[1]);
        let n2 = second[0].hypot(second[1]);
        if n1 >= n2 {
            [first[0] / n1, first[1] / n1]
        } else {
            [second[0] / n2, second[1] / n2]
        }
    };
    let flip = if v[0] != 0.0 { v[0] < 0.0 } else { v[1] < 0.0 };
    let v = if flip { [-v[0], -v[1]] } else { v };
    (lambda1, lambda2, v)
}

pub fn spectral_summary(m: &PhaseStateMatrix) -> SpectralSummary {
    let [xx, xy, yy] = m.second_moment();
    let (lambda1, lambda2, v1) = symmetric_eigen_2x2(xx, xy, yy);
    SpectralSummary {
        lambda1,
        // PSD by construction; clip rounding noise
        lambda2: lambda2.max(0.0),
        v1,
        mean_velocity: m.mean_velocity(),
    }
}

/// Structural instability: isotropy of the spectrum plus a quadratic
/// penalty when the dominant direction runs against falling confidence.
///
/// `align = |v1_x| · sign(v̄)` with sign(0) = +1.
pub fn instability_score(s: &SpectralSummary, eta: f64) -> f64 {
    let sum = s.lambda1 + s.lambda2;
    let isotropy = 1.0 - (s.lambda1 - s.lambda2) / sum;
    let sign = if s.mean_velocity < 0.0 { -1.0 } else { 1.0 };
    let align = s.v1[0].abs() * sign;
    let penalty = if align < 0.0 { eta * align * align } else { 0.0 };
    isotropy + penalty
}

/// Instability score of a raw window, or `None` when the window is flat or
/// its spectrum is empty.
pub fn window_instability(window: &[f64], prev: Option<f64>, eta: f64) -> Result<Option<f64>, PruningError> {
    match build_state_matrix(window, prev)? {
        StateMatrix::Degenerate { .. } => Ok(None),
        StateMatrix::Matrix(m) => {
            let s = spectral_summary(&m);
            if s.lambda1 + s.lambda2 < EPS_EIG {
                Ok(None)
            } else {
                Ok(Some(instability_score(&s, eta)))
            }
        }
    }
}

/// Percentile with linear interpolation between order statistics at index
/// `pct / 100 · (n − 1)`.
pub fn percentile(values: &[f64], pct: f64) -> Result<f64, PruningError> {
    if !(0.0..=100.0).contains(&pct) {
        return Err(PruningError::InvalidPercentile(pct));
    }
    if values.is_empty() {
        return Err(PruningError::InsufficientCalibration { needed: 1, got: 0 });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(PruningError::NonFinite);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted_percentile(&sorted, pct / 100.0))
}

fn sorted_percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = p * (sorted.len() - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = idx - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Q3 + `multiplier` · IQR.
pub fn tukey_fence_with(values: &[f64], multiplier: f64) -> Result<f64, PruningError> {
    if values.len() < 4 {
        return Err(PruningError::InsufficientCalibration {
            needed: 4,
            got: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(PruningError::NonFinite);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = sorted_percentile(&sorted, 0.25);
    let q3 = sorted_percentile(&sorted, 0.75);
    Ok(q3 + multiplier * (q3 - q1))
}

/// Upper Tukey fence, Q3 + 1.5 · IQR.
pub fn tukey_fence(values: &[f64]) -> Result<f64, PruningError> {
    tukey_fence_with(values, 1.5)
}

/// Query-specific gating thresholds from the calibration population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_pass: f64,
    pub tau_drop: f64,
    pub tau_risk: f64,
}

/// Pools of window statistics collected from unpruned calibration paths.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationPools {
    pub local_groups: Vec<f64>,
    pub global_groups: Vec<f64>,
    pub instability: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    pub pass_percentile: f64,
    pub drop_percentile: f64,
    pub tukey_multiplier: f64,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            pass_percentile: 90.0,
            drop_percentile: 20.0,
            tukey_multiplier: 1.5,
        }
    }
}

impl CalibrationPools {
    pub fn extend(&mut self, other: CalibrationPools) {
        self.local_groups.extend(other.local_groups);
        self.global_groups.extend(other.global_groups);
        self.instability.extend(other.instability);
    }

    pub fn calibrate(&self, settings: &CalibrationSettings) -> Result<Thresholds, PruningError> {
        Ok(Thresholds {
            tau_pass: percentile(&self.local_groups, settings.pass_percentile)?,
            tau_drop: percentile(&self.global_groups, settings.drop_percentile)?,
            tau_risk: tukey_fence_with(&self.instability, settings.tukey_multiplier)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneReason {
    LowConfidence,
    Instability,
}

impl PruneReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            PruneReason::LowConfidence => "low_confidence",
            PruneReason::Instability => "instability",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateDecision {
    FastPass,
    Continue,
    Prune(PruneReason),
}

/// Three-tier gate for one full window.
pub fn stratified_decision(
    local_mean: f64,
    global_mean: f64,
    trend_window: &[f64],
    prev: Option<f64>,
    th: &Thresholds,
    eta: f64,
) -> Result<GateDecision, PruningError> {
    if local_mean > th.tau_pass {
        return Ok(GateDecision::FastPass);
    }
    if global_mean < th.tau_drop {
        return Ok(GateDecision::Prune(PruneReason::LowConfidence));
    }
    Ok(match window_instability(trend_window, prev, eta)? {
        Some(r) if r > th.tau_risk => GateDecision::Prune(PruneReason::Instability),
        _ => GateDecision::Continue,
    })
}

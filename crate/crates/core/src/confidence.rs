//! Token-, group- and path-level confidence over streaming top-k log-probabilities.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfidenceError {
    #[error("malformed token event at position {position}: {reason}")]
    MalformedEvent { position: usize, reason: String },
    #[error("top-k changed within a path: expected {expected}, got {got} at position {position}")]
    InconsistentK {
        expected: usize,
        got: usize,
        position: usize,
    },
    #[error("non-finite confidence value {0}")]
    NonFinite(f64),
    #[error("path confidence is undefined for a path with no tokens")]
    EmptyPath,
    #[error("window capacity must be at least 1")]
    ZeroCapacity,
}

/// One generation step: the top-k log-probabilities (natural log, sorted
/// descending) and the emitted token text, if known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEvent {
    pub position: usize,
    pub top_logprobs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_text: Option<String>,
}

impl TokenEvent {
    pub fn new(position: usize, top_logprobs: Vec<f64>) -> Self {
        Self {
            position,
            top_logprobs,
            token_text: None,
        }
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.token_text = Some(text.into());
        self
    }

    pub fn k(&self) -> usize {
        self.top_logprobs.len()
    }

    pub fn validate(&self) -> Result<(), ConfidenceError> {
        let malformed = |reason: &str| ConfidenceError::MalformedEvent {
            position: self.position,
            reason: reason.to_string(),
        };
        if self.top_logprobs.is_empty() {
            return Err(malformed("empty top_logprobs"));
        }
        if self.top_logprobs.iter().any(|lp| lp.is_nan() || *lp > 0.0) {
            return Err(malformed("log-probabilities must be <= 0"));
        }
        if self.top_logprobs.windows(2).any(|w| w[1] > w[0]) {
            return Err(malformed("top_logprobs not sorted non-increasing"));
        }
        Ok(())
    }
}

/// Probability of the most likely token, `exp(top_logprobs[0])`.
pub fn local_confidence(event: &TokenEvent) -> Result<f64, ConfidenceError> {
    event.validate()?;
    Ok(event.top_logprobs[0].exp())
}

/// Negative mean of the top-k log-probabilities.
pub fn global_confidence(event: &TokenEvent) -> Result<f64, ConfidenceError> {
    event.validate()?;
    let sum: f64 = event.top_logprobs.iter().sum();
    let value = -sum / event.k() as f64;
    if !value.is_finite() {
        return Err(ConfidenceError::NonFinite(value));
    }
    // normalise -0.0 from an all-zero row
    Ok(if value == 0.0 { 0.0 } else { value })
}

/// Fixed-capacity ring of scalar confidences with an O(1) running mean.
///
/// The running sum is recomputed from the ring every `capacity` pushes so
/// floating-point drift stays bounded on long streams.
#[derive(Debug, Clone)]
pub struct ConfidenceWindow {
    capacity: usize,
    ring: VecDeque<f64>,
    running_sum: f64,
    pushes_since_anchor: usize,
}

impl ConfidenceWindow {
    pub fn new(capacity: usize) -> Result<Self, ConfidenceError> {
        if capacity == 0 {
            return Err(ConfidenceError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            ring: VecDeque::with_capacity(capacity),
            running_sum: 0.0,
            pushes_since_anchor: 0,
        })
    }

    /// Appends `value`, evicting the oldest entry when full. Returns the
    /// window mean once the window holds exactly `capacity` values.
    pub fn push(&mut self, value: f64) -> Result<Option<f64>, ConfidenceError> {
        self.push_evicting(value).map(|(mean, _)| mean)
    }

    /// Like [`push`](Self::push) but also hands back the evicted value.
    pub fn push_evicting(&mut self, value: f64) -> Result<(Option<f64>, Option<f64>), ConfidenceError> {
        if !value.is_finite() {
            return Err(ConfidenceError::NonFinite(value));
        }
        let evicted = if self.ring.len() == self.capacity {
            let old = self.ring.pop_front();
            if let Some(old) = old {
                self.running_sum -= old;
            }
            old
        } else {
            None
        };
        self.ring.push_back(value);
        self.running_sum += value;
        self.pushes_since_anchor += 1;
        if self.pushes_since_anchor >= self.capacity {
            self.running_sum = self.ring.iter().sum();
            self.pushes_since_anchor = 0;
        }
        let mean = self.is_full().then(|| self.mean());
        Ok((mean, evicted))
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.ring.len() == self.capacity
    }

    pub fn running_sum(&self) -> f64 {
        self.running_sum
    }

    /// Mean of the current contents; NaN when empty.
    pub fn mean(&self) -> f64 {
        self.running_sum / self.ring.len() as f64
    }

    /// Window contents, oldest first.
    pub fn values(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        self.ring.iter().copied()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.ring.iter().copied().collect()
    }
}

/// What one observed token contributed to the tracker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenObservation {
    pub local: f64,
    pub global: f64,
    /// Local group confidence, present once the window is full.
    pub local_group: Option<f64>,
    /// Global group confidence, present once the window is full.
    pub global_group: Option<f64>,
}

/// Per-path confidence state: local and global windows plus the running
/// minimum of full global windows.
#[derive(Debug, Clone)]
pub struct PathConfidenceTracker {
    local_window: ConfidenceWindow,
    global_window: ConfidenceWindow,
    min_group_global: Option<f64>,
    /// Global confidence of the token just before the current global window.
    preceding_global: Option<f64>,
    token_count: usize,
    global_total: f64,
    k: Option<usize>,
}

impl PathConfidenceTracker {
    pub fn new(window_len: usize) -> Result<Self, ConfidenceError> {
        Ok(Self {
            local_window: ConfidenceWindow::new(window_len)?,
            global_window: ConfidenceWindow::new(window_len)?,
            min_group_global: None,
            preceding_global: None,
            token_count: 0,
            global_total: 0.0,
            k: None,
        })
    }

    pub fn observe(&mut self, event: &TokenEvent) -> Result<TokenObservation, ConfidenceError> {
        let local = local_confidence(event)?;
        let global = global_confidence(event)?;
        match self.k {
            Some(expected) if expected != event.k() => {
                return Err(ConfidenceError::InconsistentK {
                    expected,
                    got: event.k(),
                    position: event.position,
                });
            }
            None => self.k = Some(event.k()),
            _ => {}
        }
        let local_group = self.local_window.push(local)?;
        let (global_group, evicted) = self.global_window.push_evicting(global)?;
        if evicted.is_some() {
            self.preceding_global = evicted;
        }
        if let Some(g) = global_group {
            self.min_group_global = Some(match self.min_group_global {
                Some(m) => m.min(g),
                None => g,
            });
        }
        self.token_count += 1;
        self.global_total += global;
        Ok(TokenObservation {
            local,
            global,
            local_group,
            global_group,
        })
    }

    /// Lowest global group confidence over all full windows; for paths
    /// shorter than the window, the mean over the whole path.
    pub fn path_confidence(&self) -> Result<f64, ConfidenceError> {
        if self.token_count == 0 {
            return Err(ConfidenceError::EmptyPath);
        }
        Ok(match self.min_group_global {
            Some(m) => m,
            None => self.global_total / self.token_count as f64,
        })
    }

    pub fn min_group_global(&self) -> Option<f64> {
        self.min_group_global
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn window_len(&self) -> usize {
        self.global_window.capacity()
    }

    pub fn is_window_full(&self) -> bool {
        self.global_window.is_full()
    }

    pub fn local_window(&self) -> &ConfidenceWindow {
        &self.local_window
    }

    pub fn global_window(&self) -> &ConfidenceWindow {
        &self.global_window
    }

    pub fn preceding_global(&self) -> Option<f64> {
        self.preceding_global
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(lps: &[f64]) -> TokenEvent {
        TokenEvent::new(0, lps.to_vec())
    }

    #[test]
    fn local_examples() {
        assert_eq!(local_confidence(&ev(&[0.0])).unwrap(), 1.0);
        let half = local_confidence(&ev(&[0.5f64.ln(), 0.25f64.ln()])).unwrap();
        assert!((half - 0.5).abs() < 1e-15);
        // frozen from the series-exp oracle
        let tenth = local_confidence(&ev(&[-2.302585, -2.995732])).unwrap();
        assert!((tenth - ddc_testkit::series::exp(-2.302585)).abs() < 1e-12);
        assert!((tenth - 0.1).abs() < 1e-6);
    }

    #[test]
    fn global_examples() {
        let h = 0.5f64.ln();
        assert!((global_confidence(&ev(&[h, h])).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(global_confidence(&ev(&[0.0])).unwrap(), 0.0);
        let g = global_confidence(&ev(&[-0.1, -2.0, -4.0])).unwrap();
        assert!((g - 2.033_333_333_333_333).abs() < 1e-6);
    }

    #[test]
    fn malformed_events() {
        assert!(matches!(
            local_confidence(&ev(&[])),
            Err(ConfidenceError::MalformedEvent { .. })
        ));
        assert!(global_confidence(&ev(&[])).is_err());
        assert!(global_confidence(&ev(&[0.1])).is_err());
        assert!(global_confidence(&ev(&[-2.0, -1.0])).is_err());
        assert!(global_confidence(&ev(&[f64::NAN])).is_err());
    }

    #[test]
    fn window_examples() {
        let mut w = ConfidenceWindow::new(3).unwrap();
        assert_eq!(w.push(0.2).unwrap(), None);
        assert_eq!(w.push(0.4).unwrap(), None);
        assert!((w.push(0.6).unwrap().unwrap() - 0.4).abs() < 1e-15);

        let mut w = ConfidenceWindow::new(2).unwrap();
        w.push(0.1).unwrap();
        w.push(0.3).unwrap();
        let m = w.push(0.9).unwrap().unwrap();
        assert!((m - ddc_testkit::windows::tail_mean(&[0.1, 0.3, 0.9], 2)).abs() < 1e-15);
        assert!((m - 0.6).abs() < 1e-15);

        for c in [0.0, 0.37, 5.5] {
            let mut w = ConfidenceWindow::new(2).unwrap();
            w.push(c).unwrap();
            assert_eq!(w.push(c).unwrap(), Some(c));
        }
    }

    #[test]
    fn window_rejects_non_finite() {
        let mut w = ConfidenceWindow::new(2).unwrap();
        w.push(0.5).unwrap();
        assert!(w.push(f64::INFINITY).is_err());
        assert!(w.push(f64::NAN).is_err());
        assert_eq!(w.len(), 1);
        assert_eq!(w.running_sum(), 0.5);
        assert!(ConfidenceWindow::new(0).is_err());
    }

    fn tracker_from(globals: &[f64], len: usize) -> PathConfidenceTracker {
        // one-entry events carry C^g = -lp directly
        let mut t = PathConfidenceTracker::new(len).unwrap();
        for (i, g) in globals.iter().enumerate() {
            t.observe(&TokenEvent::new(i, vec![-g])).unwrap();
        }
        t
    }

    #[test]
    fn path_confidence_examples() {
        let t = tracker_from(&[0.7; 9], 4);
        assert!((t.path_confidence().unwrap() - 0.7).abs() < 1e-15);

        let t = tracker_from(&[0.9, 0.9, 0.1, 0.9], 2);
        assert!((t.path_confidence().unwrap() - 0.5).abs() < 1e-15);

        let t = tracker_from(&[0.3, 0.6, 0.9], 2048);
        assert!((t.path_confidence().unwrap() - 0.6).abs() < 1e-15);

        let empty = PathConfidenceTracker::new(4).unwrap();
        assert_eq!(empty.path_confidence(), Err(ConfidenceError::EmptyPath));
    }

    #[test]
    fn tracker_rejects_changing_k() {
        let mut t = PathConfidenceTracker::new(4).unwrap();
        t.observe(&TokenEvent::new(0, vec![-0.1, -0.2])).unwrap();
        let err = t.observe(&TokenEvent::new(1, vec![-0.1])).unwrap_err();
        assert!(matches!(err, ConfidenceError::InconsistentK { expected: 2, got: 1, .. }));
    }

    #[test]
    fn preceding_value_tracks_eviction() {
        let t = tracker_from(&[1.0, 2.0, 3.0, 4.0], 3);
        assert_eq!(t.preceding_global(), Some(1.0));
        assert_eq!(t.global_window().to_vec(), vec![2.0, 3.0, 4.0]);
    }
}

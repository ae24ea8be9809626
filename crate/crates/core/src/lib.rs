//! Adaptive inference-time scaling control.
//!
//! [`confidence`] turns streamed top-k log-probabilities into token, group
//! and path confidence; [`termination`] keeps confidence-weighted Beta
//! evidence per answer and decides when sampling can stop; [`pruning`]
//! gates individual paths on confidence level and trend; [`engine`] runs the
//! whole loop over any [`engine::PathSource`]; [`synthetic`] is the Monte
//! Carlo laboratory used to check the statistical behaviour.

pub mod confidence;
pub mod engine;
pub mod parallel;
pub mod pruning;
pub mod synthetic;
pub mod termination;

pub use confidence::{PathConfidenceTracker, TokenEvent};
pub use engine::{Engine, EngineConfig, EngineError, PathEvent, PathSource, PathStatus, PathStream, RunReport, SourceError};
pub use parallel::Execution;
pub use pruning::{PruneReason, Thresholds};
pub use termination::{EvidenceLedger, StopDecision, StopPolicy};

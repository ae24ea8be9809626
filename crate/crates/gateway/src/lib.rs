//! Path sources backed by OpenAI-compatible completion endpoints, plus
//! trace recording and replay.
//!
//! [`EndpointSource`] streams one request per path and turns each token's
//! top-k log-probabilities into a [`ddc_core::TokenEvent`].
//! [`RecordingSource`] wraps any source and persists every delivered event;
//! [`load_traces`] reads those files back as a deterministic source.
//! [`mock::MockServer`] is a scripted local server for tests.

use std::path::PathBuf;

use ddc_core::SourceError;
use thiserror::Error;

pub mod chunk;
pub mod client;
pub mod config;
pub mod mock;
pub mod sse;
pub mod trace;

pub use client::{CancelHandle, EndpointSource, EndpointStream, PATH_INDEX_HEADER};
pub use config::{ApiMode, EndpointConfig, RetryPolicy};
pub use trace::{load_traces, QueryTraces, RecordingSource, TraceRecord, TraceStore, TRACE_SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0}")]
    MissingLogprobs(String),
    #[error("endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("http {status}: {body}")]
    Http { status: u16, body: String },
    #[error("server error: {0}")]
    Server(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: trace schema version {found}, expected {expected}")]
    SchemaMismatch { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}:{line}: {reason}")]
    CorruptTrace { path: PathBuf, line: usize, reason: String },
    #[error("no traces found under {0}")]
    NoTraces(PathBuf),
}

impl From<GatewayError> for SourceError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Config(_) | GatewayError::MissingLogprobs(_) => SourceError::Capability(e.to_string()),
            GatewayError::Http { status, .. } if matches!(status, 401 | 403 | 404) => {
                SourceError::Capability(e.to_string())
            }
            GatewayError::Unreachable(_) => SourceError::Systemic(e.to_string()),
            _ => SourceError::Path(e.to_string()),
        }
    }
}

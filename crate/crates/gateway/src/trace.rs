//! Per-path trace files and deterministic replay.
//!
//! Layout: `<root>/<query_id>/<path_id>.jsonl`. Each file is a header line,
//! one line per delivered token event, and an outcome line written when the
//! engine closes the path. Files are append-only while a run is live, so a
//! crash leaves a readable prefix.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ddc_core::engine::{extract_answer, PathEvent, PathSource, PathStatus, PathStream, SourceError};
use ddc_core::TokenEvent;
use serde::{Deserialize, Serialize};

use crate::GatewayError;

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix_ms: u64,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub schema_version: u32,
    pub query_id: String,
    pub path_id: usize,
    pub events: Vec<TokenEvent>,
    pub final_text: Option<String>,
    pub extracted_answer: Option<String>,
    pub outcome: PathStatus,
    pub timing: Timing,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header {
        schema_version: u32,
        query_id: String,
        path_id: usize,
        started_unix_ms: u64,
    },
    Event {
        position: usize,
        top_logprobs: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        token_text: Option<String>,
    },
    Outcome {
        final_text: Option<String>,
        extracted_answer: Option<String>,
        outcome: PathStatus,
        elapsed_ms: u64,
    },
}

fn event_line(ev: &TokenEvent) -> Line {
    Line::Event {
        position: ev.position,
        top_logprobs: ev.top_logprobs.clone(),
        token_text: ev.token_text.clone(),
    }
}

fn write_line<W: Write>(w: &mut W, line: &Line) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, line)?;
    w.write_all(b"\n")
}

/// Query ids become directory names, so they are restricted to a portable
/// character set.
pub fn validate_query_id(id: &str) -> Result<(), GatewayError> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(GatewayError::Config(format!(
            "query id {id:?} must be non-empty ASCII letters, digits, '-', '_' or '.'"
        )))
    }
}

pub fn trace_path(root: &Path, query_id: &str, path_id: usize) -> PathBuf {
    root.join(query_id).join(format!("{path_id}.jsonl"))
}

fn unix_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

impl TraceRecord {
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write_line(
            w,
            &Line::Header {
                schema_version: self.schema_version,
                query_id: self.query_id.clone(),
                path_id: self.path_id,
                started_unix_ms: self.timing.started_unix_ms,
            },
        )?;
        for ev in &self.events {
            write_line(w, &event_line(ev))?;
        }
        write_line(
            w,
            &Line::Outcome {
                final_text: self.final_text.clone(),
                extracted_answer: self.extracted_answer.clone(),
                outcome: self.outcome.clone(),
                elapsed_ms: self.timing.elapsed_ms,
            },
        )
    }

    /// Writes the record under `root`, replacing any previous file.
    pub fn persist(&self, root: &Path) -> Result<PathBuf, GatewayError> {
        validate_query_id(&self.query_id)?;
        let path = trace_path(root, &self.query_id, self.path_id);
        fs::create_dir_all(path.parent().expect("trace path has a parent"))?;
        let mut w = BufWriter::new(File::create(&path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(path)
    }

    /// Reads one trace file. A file cut short (no outcome line, or a partial
    /// last line) loads with outcome `Failed` and a warning.
    pub fn load(path: &Path) -> Result<(TraceRecord, Option<String>), GatewayError> {
        let raw = fs::read_to_string(path)?;
        let corrupt = |line: usize, reason: String| GatewayError::CorruptTrace {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut segments: Vec<&str> = raw.split('\n').collect();
        // the segment after the final newline is empty for a complete file
        let tail = segments.pop().unwrap_or("");
        let partial_tail = !tail.trim().is_empty();

        let Some(first) = segments.first() else {
            return Err(corrupt(1, "missing header line".into()));
        };
        let head: serde_json::Value = serde_json::from_str(first).map_err(|e| corrupt(1, e.to_string()))?;
        let found = head.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != TRACE_SCHEMA_VERSION {
            return Err(GatewayError::SchemaMismatch {
                path: path.to_path_buf(),
                found,
                expected: TRACE_SCHEMA_VERSION,
            });
        }
        let Line::Header {
            schema_version,
            query_id,
            path_id,
            started_unix_ms,
        } = serde_json::from_value(head).map_err(|e| corrupt(1, e.to_string()))?
        else {
            return Err(corrupt(1, "first line is not a header".into()));
        };

        let mut events = Vec::new();
        let mut closing = None;
        for (i, seg) in segments.iter().enumerate().skip(1) {
            let lineno = i + 1;
            if closing.is_some() {
                return Err(corrupt(lineno, "content after the outcome line".into()));
            }
            match serde_json::from_str::<Line>(seg).map_err(|e| corrupt(lineno, e.to_string()))? {
                Line::Event {
                    position,
                    top_logprobs,
                    token_text,
                } => {
                    if position != events.len() {
                        return Err(corrupt(lineno, format!("event position {position}, expected {}", events.len())));
                    }
                    events.push(TokenEvent {
                        position,
                        top_logprobs,
                        token_text,
                    });
                }
                Line::Outcome {
                    final_text,
                    extracted_answer,
                    outcome,
                    elapsed_ms,
                } => closing = Some((final_text, extracted_answer, outcome, elapsed_ms)),
                Line::Header { .. } => return Err(corrupt(lineno, "second header line".into())),
            }
        }
        if partial_tail && closing.is_some() {
            return Err(corrupt(segments.len() + 1, "content after the outcome line".into()));
        }

        let mut warning = None;
        let (final_text, extracted_answer, outcome, elapsed_ms) = match closing {
            Some(c) => c,
            None => {
                let msg = format!("trace truncated after {} events", events.len());
                warning = Some(format!("{}: {msg}", path.display()));
                (None, None, PathStatus::Failed { message: msg }, 0)
            }
        };
        Ok((
            TraceRecord {
                schema_version,
                query_id,
                path_id,
                events,
                final_text,
                extracted_answer,
                outcome,
                timing: Timing {
                    started_unix_ms,
                    elapsed_ms,
                },
            },
            warning,
        ))
    }
}

/// All recorded paths of one query, indexed by path id.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryTraces {
    pub query_id: String,
    pub records: Vec<TraceRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct TraceStore {
    pub queries: BTreeMap<String, QueryTraces>,
    pub warnings: Vec<String>,
}

impl TraceStore {
    pub fn query(&self, id: &str) -> Option<&QueryTraces> {
        self.queries.get(id)
    }
}

fn jsonl_files(dir: &Path) -> Result<Vec<(usize, PathBuf)>, GatewayError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
            continue;
        }
        let Some(id) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) else {
            log::warn!("ignoring {}: name is not a path id", path.display());
            continue;
        };
        files.push((id, path));
    }
    files.sort();
    Ok(files)
}

fn load_query(dir: &Path, warnings: &mut Vec<String>) -> Result<Option<QueryTraces>, GatewayError> {
    let files = jsonl_files(dir)?;
    if files.is_empty() {
        return Ok(None);
    }
    let mut records = Vec::with_capacity(files.len());
    for (expected, (id, path)) in files.into_iter().enumerate() {
        if id != expected {
            return Err(GatewayError::CorruptTrace {
                path: dir.to_path_buf(),
                line: 0,
                reason: format!("path {expected} is missing"),
            });
        }
        let (record, warning) = TraceRecord::load(&path)?;
        if record.path_id != id {
            return Err(GatewayError::CorruptTrace {
                path,
                line: 1,
                reason: format!("header names path {}, file name says {id}", record.path_id),
            });
        }
        if let Some(w) = warning {
            log::warn!("{w}");
            warnings.push(w);
        }
        records.push(record);
    }
    let query_id = records[0].query_id.clone();
    if let Some(r) = records.iter().find(|r| r.query_id != query_id) {
        return Err(GatewayError::CorruptTrace {
            path: trace_path(dir, "", r.path_id),
            line: 1,
            reason: format!("query id {:?} differs from {query_id:?}", r.query_id),
        });
    }
    Ok(Some(QueryTraces { query_id, records }))
}

/// Loads every query under `root`. `root` may also be a single query
/// directory.
pub fn load_traces(root: &Path) -> Result<TraceStore, GatewayError> {
    let mut store = TraceStore::default();
    if let Some(q) = load_query(root, &mut store.warnings)? {
        store.queries.insert(q.query_id.clone(), q);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        if let Some(q) = load_query(&dir, &mut store.warnings)? {
            store.queries.insert(q.query_id.clone(), q);
        }
    }
    if store.queries.is_empty() {
        return Err(GatewayError::NoTraces(root.to_path_buf()));
    }
    Ok(store)
}

impl PathSource for QueryTraces {
    fn start_path(&self, path_index: usize) -> Result<Box<dyn PathStream + '_>, SourceError> {
        let Some(record) = self.records.get(path_index) else {
            return Err(SourceError::Systemic(format!(
                "trace set for {} holds only {} paths",
                self.query_id,
                self.records.len()
            )));
        };
        if let PathStatus::Failed { message } = &record.outcome {
            if record.events.is_empty() {
                return Err(SourceError::Path(message.clone()));
            }
        }
        Ok(Box::new(ReplayStream { record, next: 0 }))
    }
}

struct ReplayStream<'a> {
    record: &'a TraceRecord,
    next: usize,
}

impl PathStream for ReplayStream<'_> {
    fn next_event(&mut self) -> Result<PathEvent, SourceError> {
        if let Some(ev) = self.record.events.get(self.next) {
            self.next += 1;
            return Ok(PathEvent::Token(ev.clone()));
        }
        match &self.record.outcome {
            PathStatus::Completed { .. } => Ok(PathEvent::Finished {
                text: self.record.final_text.clone().unwrap_or_default(),
            }),
            PathStatus::Failed { message } => Err(SourceError::Path(message.clone())),
            other => Err(SourceError::Path(format!(
                "recorded path ended {other:?} after {} events",
                self.record.events.len()
            ))),
        }
    }
}

/// Wraps a source and writes every event it delivers to a trace file.
pub struct RecordingSource<S> {
    inner: S,
    root: PathBuf,
    query_id: String,
}

impl<S: PathSource> RecordingSource<S> {
    /// Traces left in the query's directory by an earlier run are removed.
    pub fn new(inner: S, root: impl Into<PathBuf>, query_id: &str) -> Result<Self, GatewayError> {
        validate_query_id(query_id)?;
        let root = root.into();
        let dir = root.join(query_id);
        fs::create_dir_all(&dir)?;
        for (_, stale) in jsonl_files(&dir)? {
            fs::remove_file(stale)?;
        }
        Ok(Self {
            inner,
            root,
            query_id: query_id.to_string(),
        })
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }

    pub fn query_dir(&self) -> PathBuf {
        self.root.join(&self.query_id)
    }

    fn open_file(&self, path_index: usize, started_unix_ms: u64) -> std::io::Result<BufWriter<File>> {
        let mut w = BufWriter::new(File::create(trace_path(&self.root, &self.query_id, path_index))?);
        write_line(
            &mut w,
            &Line::Header {
                schema_version: TRACE_SCHEMA_VERSION,
                query_id: self.query_id.clone(),
                path_id: path_index,
                started_unix_ms,
            },
        )?;
        w.flush()?;
        Ok(w)
    }
}

impl<S: PathSource> PathSource for RecordingSource<S> {
    fn start_path(&self, path_index: usize) -> Result<Box<dyn PathStream + '_>, SourceError> {
        let started = Instant::now();
        let started_unix_ms = unix_ms();
        let mut writer = self
            .open_file(path_index, started_unix_ms)
            .map_err(|e| SourceError::Systemic(format!("cannot write trace: {e}")))?;
        match self.inner.start_path(path_index) {
            Ok(inner) => Ok(Box::new(RecordingStream {
                inner,
                writer,
                final_text: None,
                started,
            })),
            Err(e) => {
                let outcome = Line::Outcome {
                    final_text: None,
                    extracted_answer: None,
                    outcome: PathStatus::Failed { message: e.to_string() },
                    elapsed_ms: started.elapsed().as_millis() as u64,
                };
                if let Err(io) = write_line(&mut writer, &outcome).and_then(|_| writer.flush()) {
                    log::warn!("trace for path {path_index}: {io}");
                }
                Err(e)
            }
        }
    }
}

struct RecordingStream<'a> {
    inner: Box<dyn PathStream + 'a>,
    writer: BufWriter<File>,
    final_text: Option<String>,
    started: Instant,
}

impl PathStream for RecordingStream<'_> {
    fn next_event(&mut self) -> Result<PathEvent, SourceError> {
        let ev = self.inner.next_event()?;
        match &ev {
            PathEvent::Token(t) => write_line(&mut self.writer, &event_line(t))
                .map_err(|e| SourceError::Systemic(format!("cannot write trace: {e}")))?,
            PathEvent::Finished { text } => self.final_text = Some(text.clone()),
        }
        Ok(ev)
    }

    fn close(&mut self, status: &PathStatus) {
        self.inner.close(status);
        let extracted_answer = match status {
            PathStatus::Completed { answer, .. } => answer.clone(),
            _ => self.final_text.as_deref().and_then(extract_answer),
        };
        let outcome = Line::Outcome {
            final_text: self.final_text.take(),
            extracted_answer,
            outcome: status.clone(),
            elapsed_ms: self.started.elapsed().as_millis() as u64,
        };
        if let Err(e) = write_line(&mut self.writer, &outcome).and_then(|_| self.writer.flush()) {
            log::warn!("trace outcome not written: {e}");
        }
    }
}

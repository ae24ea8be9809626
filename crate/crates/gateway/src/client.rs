use std::collections::VecDeque;
use std::io::BufReader;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use ddc_core::engine::{PathEvent, PathSource, PathStatus, PathStream, SourceError};
use ddc_core::TokenEvent;
use reqwest::blocking::{Client, Response};
use serde_json::{json, Value};

use crate::chunk::{parse_chunk, ChunkToken};
use crate::config::{ApiMode, EndpointConfig};
use crate::sse::SseReader;
use crate::GatewayError;

/// Request header carrying the path index; lets servers and proxies
/// correlate requests with paths.
pub const PATH_INDEX_HEADER: &str = "x-ddc-path-index";

/// Live paths for one prompt from an OpenAI-compatible endpoint.
pub struct EndpointSource {
    cfg: EndpointConfig,
    prompt: String,
    client: Client,
}

impl std::fmt::Debug for EndpointSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EndpointSource").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl EndpointSource {
    pub fn new(cfg: EndpointConfig, prompt: &str) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let client = Client::builder()
            .timeout(cfg.request_timeout())
            .connect_timeout(cfg.connect_timeout())
            .build()
            .map_err(|e| GatewayError::Config(format!("http client: {e}")))?;
        Ok(Self {
            prompt: cfg.render_prompt(prompt),
            cfg,
            client,
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    pub fn request_body(&self, path_index: usize) -> Value {
        let c = &self.cfg;
        let mut body = match c.api {
            ApiMode::Completions => json!({
                "model": c.model,
                "prompt": self.prompt,
                "max_tokens": c.max_tokens,
                "temperature": c.temperature,
                "top_p": c.top_p,
                "stream": true,
                "logprobs": c.top_logprobs,
            }),
            ApiMode::Chat => {
                let mut messages = Vec::new();
                if let Some(system) = &c.system_prompt {
                    messages.push(json!({"role": "system", "content": system}));
                }
                messages.push(json!({"role": "user", "content": self.prompt}));
                json!({
                    "model": c.model,
                    "messages": messages,
                    "max_tokens": c.max_tokens,
                    "temperature": c.temperature,
                    "top_p": c.top_p,
                    "stream": true,
                    "logprobs": true,
                    "top_logprobs": c.top_logprobs,
                })
            }
        };
        if let Some(seed) = c.seed {
            body["seed"] = json!(seed.wrapping_add(path_index as u64));
        }
        body
    }

    fn send_once(&self, path_index: usize, body: &Value) -> Result<Response, (GatewayError, bool)> {
        let mut req = self
            .client
            .post(self.cfg.endpoint_url())
            .header(PATH_INDEX_HEADER, path_index.to_string())
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .header(reqwest::header::ACCEPT, "text/event-stream")
            .body(body.to_string());
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) if e.is_connect() => return Err((GatewayError::Unreachable(e.to_string()), true)),
            Err(e) => return Err((GatewayError::Transport(e.to_string()), true)),
        };
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let retryable = status.as_u16() == 429 || status.is_server_error();
        let text = resp.text().unwrap_or_default();
        let err = if status.as_u16() == 400 && text.contains("logprobs") {
            GatewayError::MissingLogprobs(format!("{}: {text}", crate::chunk::MISSING_LOGPROBS))
        } else {
            GatewayError::Http {
                status: status.as_u16(),
                body: text,
            }
        };
        Err((err, retryable))
    }

    /// Opens path `path_index`. Only failures before the first byte of the
    /// response are retried, so no event is ever delivered twice.
    pub fn open(&self, path_index: usize) -> Result<EndpointStream, GatewayError> {
        let body = self.request_body(path_index);
        let mut attempt = 0;
        loop {
            match self.send_once(path_index, &body) {
                Ok(resp) => {
                    return Ok(EndpointStream {
                        reader: Some(SseReader::new(BufReader::new(resp))),
                        pending: VecDeque::new(),
                        position: 0,
                        text: String::new(),
                        finished: false,
                        k: self.cfg.top_logprobs,
                        cancel: Arc::new(AtomicBool::new(false)),
                    })
                }
                Err((e, true)) if attempt < self.cfg.retry.retries => {
                    log::warn!("path {path_index}: attempt {} failed: {e}; retrying", attempt + 1);
                    std::thread::sleep(self.cfg.retry.delay(attempt));
                    attempt += 1;
                }
                Err((e, _)) => return Err(e),
            }
        }
    }
}

impl PathSource for EndpointSource {
    fn start_path(&self, path_index: usize) -> Result<Box<dyn PathStream + '_>, SourceError> {
        Ok(Box::new(self.open(path_index)?))
    }
}

/// Signals a stream from another thread. The stream stops at its next
/// chunk boundary and discards anything buffered.
#[derive(Debug, Clone)]
pub struct CancelHandle(Arc<AtomicBool>);

impl CancelHandle {
    pub fn cancel(&self) {
        self.0.store(true, Ordering::Release);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::Acquire)
    }
}

pub struct EndpointStream {
    reader: Option<SseReader<BufReader<Response>>>,
    pending: VecDeque<ChunkToken>,
    position: usize,
    text: String,
    finished: bool,
    k: usize,
    cancel: Arc<AtomicBool>,
}

impl EndpointStream {
    pub fn cancel_handle(&self) -> CancelHandle {
        CancelHandle(Arc::clone(&self.cancel))
    }

    pub fn events_delivered(&self) -> usize {
        self.position
    }

    fn shut(&mut self) {
        // dropping the response closes the connection; the server stops
        // generating on its next write
        self.reader = None;
        self.pending.clear();
    }

    fn cancelled(&mut self) -> Option<SourceError> {
        if self.cancel.load(Ordering::Acquire) {
            self.shut();
            return Some(SourceError::Path("cancelled".into()));
        }
        None
    }
}

impl PathStream for EndpointStream {
    fn next_event(&mut self) -> Result<PathEvent, SourceError> {
        if let Some(e) = self.cancelled() {
            return Err(e);
        }
        loop {
            if let Some(tok) = self.pending.pop_front() {
                let ev = TokenEvent::new(self.position, tok.top_logprobs).with_text(tok.text);
                self.position += 1;
                return Ok(PathEvent::Token(ev));
            }
            if self.finished {
                self.shut();
                return Ok(PathEvent::Finished {
                    text: std::mem::take(&mut self.text),
                });
            }
            let Some(reader) = self.reader.as_mut() else {
                return Err(SourceError::Path("stream already closed".into()));
            };
            let data = reader.next_data().map_err(|e| GatewayError::Transport(e.to_string()))?;
            if let Some(e) = self.cancelled() {
                return Err(e);
            }
            match data {
                None => {
                    self.shut();
                    return Err(SourceError::Path(format!(
                        "stream ended after {} tokens without a finish marker",
                        self.position
                    )));
                }
                Some(d) if d.trim() == "[DONE]" => self.finished = true,
                Some(d) => {
                    let chunk = parse_chunk(&d, self.k)?;
                    self.text.push_str(&chunk.text);
                    self.pending.extend(chunk.tokens);
                    if chunk.finish_reason.is_some() {
                        self.finished = true;
                    }
                }
            }
        }
    }

    fn close(&mut self, _status: &PathStatus) {
        self.shut();
    }
}

//! Scripted local completion server for tests.
//!
//! Speaks just enough HTTP/1.1 for one streaming request per connection.
//! Path `i` (from the path-index header, else the arrival order) replays
//! `paths[i % paths.len()]`. Faults are scripted per path: refuse the first
//! requests, drop the connection after some tokens, or omit logprobs.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use ddc_core::TokenEvent;
use serde_json::{json, Map, Value};

use crate::client::PATH_INDEX_HEADER;

#[derive(Debug, Clone, PartialEq)]
pub struct MockToken {
    pub text: String,
    pub top_logprobs: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MockPath {
    pub tokens: Vec<MockToken>,
}

impl MockPath {
    /// The whole `final_text` rides on the last token.
    pub fn from_events<I: IntoIterator<Item = TokenEvent>>(events: I, final_text: &str) -> Self {
        let mut tokens: Vec<MockToken> = events
            .into_iter()
            .map(|e| MockToken {
                text: e.token_text.unwrap_or_default(),
                top_logprobs: e.top_logprobs,
            })
            .collect();
        if let Some(last) = tokens.last_mut() {
            last.text = final_text.to_string();
        }
        Self { tokens }
    }

    pub fn text(&self) -> String {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct MockScript {
    pub paths: Vec<MockPath>,
    pub tokens_per_chunk: usize,
    pub token_delay: Duration,
    /// Stream text with `logprobs: null`.
    pub omit_logprobs: bool,
    /// Answer the first `n` requests of every path with 503.
    pub fail_first: usize,
    /// Close the connection after this many tokens, on every attempt.
    pub drop_after: Option<usize>,
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            paths: Vec::new(),
            tokens_per_chunk: 1,
            token_delay: Duration::ZERO,
            omit_logprobs: false,
            fail_first: 0,
            drop_after: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PathLog {
    pub requests: usize,
    /// Tokens whose chunk was written and flushed without error.
    pub tokens_written: usize,
    /// A write failed because the client went away.
    pub disconnected: bool,
    pub completed: bool,
    pub last_body: Option<Value>,
}

struct Shared {
    script: MockScript,
    arrivals: AtomicUsize,
    logs: Mutex<BTreeMap<usize, PathLog>>,
    shutdown: AtomicBool,
}

pub struct MockServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(script: MockScript) -> io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            script,
            arrivals: AtomicUsize::new(0),
            logs: Mutex::new(BTreeMap::new()),
            shutdown: AtomicBool::new(false),
        });
        let s = Arc::clone(&shared);
        let acceptor = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if s.shutdown.load(Ordering::Acquire) {
                    break;
                }
                let Ok(conn) = conn else { continue };
                let s = Arc::clone(&s);
                std::thread::spawn(move || {
                    if let Err(e) = serve(conn, &s) {
                        log::debug!("mock connection: {e}");
                    }
                });
            }
        });
        Ok(Self {
            addr,
            shared,
            acceptor: Some(acceptor),
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn path_log(&self, path: usize) -> PathLog {
        self.shared.logs.lock().unwrap().get(&path).cloned().unwrap_or_default()
    }

    pub fn logs(&self) -> BTreeMap<usize, PathLog> {
        self.shared.logs.lock().unwrap().clone()
    }

    pub fn total_requests(&self) -> usize {
        self.shared.arrivals.load(Ordering::Acquire)
    }

    /// Polls until `pred` holds for path `path` or `timeout` passes.
    pub fn wait_for<F: Fn(&PathLog) -> bool>(&self, path: usize, timeout: Duration, pred: F) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if pred(&self.path_log(path)) {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            std::thread::sleep(Duration::from_millis(2));
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.shared.shutdown.store(true, Ordering::Release);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

struct Request {
    target: String,
    path_index: Option<usize>,
    body: Value,
}

fn read_request(reader: &mut BufReader<TcpStream>) -> io::Result<Request> {
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let target = line.split_whitespace().nth(1).ok_or_else(|| bad("bad request line"))?.to_string();
    let mut length = 0usize;
    let mut path_index = None;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(bad("headers cut short"));
        }
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((name, value)) = l.split_once(':') {
            let name = name.trim().to_ascii_lowercase();
            if name == "content-length" {
                length = value.trim().parse().map_err(|_| bad("bad content-length"))?;
            } else if name == PATH_INDEX_HEADER {
                path_index = value.trim().parse().ok();
            }
        }
    }
    let mut body = vec![0u8; length];
    reader.read_exact(&mut body)?;
    let body = serde_json::from_slice(&body).unwrap_or(Value::Null);
    Ok(Request {
        target,
        path_index,
        body,
    })
}

fn chunk_json(tokens: &[MockToken], chat: bool, k: Option<usize>, finish: Option<&str>) -> Value {
    let text: String = tokens.iter().map(|t| t.text.as_str()).collect();
    let tops = |t: &MockToken, k: usize| -> Vec<f64> { t.top_logprobs.iter().copied().take(k).collect() };
    if chat {
        let logprobs = match k {
            Some(k) if !tokens.is_empty() => json!({
                "content": tokens.iter().map(|t| {
                    let top = tops(t, k);
                    json!({
                        "token": t.text,
                        "logprob": top.first().copied().unwrap_or(0.0),
                        "top_logprobs": top.iter().enumerate()
                            .map(|(j, v)| json!({"token": format!("<{j}>"), "logprob": v}))
                            .collect::<Vec<_>>(),
                    })
                }).collect::<Vec<_>>()
            }),
            _ => Value::Null,
        };
        json!({
            "id": "chatcmpl-mock",
            "object": "chat.completion.chunk",
            "choices": [{"index": 0, "delta": {"content": text}, "logprobs": logprobs, "finish_reason": finish}],
        })
    } else {
        let logprobs = match k {
            Some(k) if !tokens.is_empty() => json!({
                "tokens": tokens.iter().map(|t| t.text.clone()).collect::<Vec<_>>(),
                "token_logprobs": tokens.iter().map(|t| t.top_logprobs.first().copied().unwrap_or(0.0)).collect::<Vec<_>>(),
                "top_logprobs": tokens.iter().map(|t| {
                    let mut m = Map::new();
                    for (j, v) in tops(t, k).into_iter().enumerate() {
                        m.insert(format!("<{j}>"), json!(v));
                    }
                    Value::Object(m)
                }).collect::<Vec<_>>(),
            }),
            _ => Value::Null,
        };
        json!({
            "id": "cmpl-mock",
            "object": "text_completion",
            "choices": [{"index": 0, "text": text, "logprobs": logprobs, "finish_reason": finish}],
        })
    }
}

fn serve(conn: TcpStream, shared: &Shared) -> io::Result<()> {
    conn.set_nodelay(true)?;
    let mut reader = BufReader::new(conn.try_clone()?);
    let mut out = conn;
    let req = read_request(&mut reader)?;
    let arrival = shared.arrivals.fetch_add(1, Ordering::AcqRel);
    let index = req.path_index.unwrap_or(arrival);
    let script = &shared.script;
    let chat = req.target.ends_with("/chat/completions");
    let k = if script.omit_logprobs {
        None
    } else if chat {
        req.body.get("top_logprobs").and_then(Value::as_u64).map(|k| k as usize)
    } else {
        req.body.get("logprobs").and_then(Value::as_u64).map(|k| k as usize)
    };
    let attempt = {
        let mut logs = shared.logs.lock().unwrap();
        let log = logs.entry(index).or_default();
        log.requests += 1;
        log.last_body = Some(req.body.clone());
        log.requests
    };
    if attempt <= script.fail_first || script.paths.is_empty() {
        let body = r#"{"error":{"message":"overloaded"}}"#;
        write!(
            out,
            "HTTP/1.1 503 Service Unavailable\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        )?;
        return out.flush();
    }
    out.write_all(b"HTTP/1.1 200 OK\r\nContent-Type: text/event-stream\r\nCache-Control: no-cache\r\nConnection: close\r\n\r\n")?;
    out.flush()?;

    let path = &script.paths[index % script.paths.len()];
    let limit = script.drop_after.unwrap_or(usize::MAX);
    let mut sent = 0;
    let note = |f: &dyn Fn(&mut PathLog)| f(shared.logs.lock().unwrap().entry(index).or_default());
    for chunk in path.tokens.chunks(script.tokens_per_chunk.max(1)) {
        let take = chunk.len().min(limit - sent);
        if take == 0 {
            break;
        }
        let frame = format!("data: {}\n\n", chunk_json(&chunk[..take], chat, k, None));
        if let Err(e) = out.write_all(frame.as_bytes()).and_then(|_| out.flush()) {
            note(&|l| l.disconnected = true);
            return Err(e);
        }
        sent += take;
        note(&|l| l.tokens_written += take);
        if !script.token_delay.is_zero() {
            std::thread::sleep(script.token_delay);
        }
    }
    if sent >= limit && limit < path.tokens.len() {
        return Ok(());
    }
    let tail = format!("data: {}\n\ndata: [DONE]\n\n", chunk_json(&[], chat, k, Some("stop")));
    if let Err(e) = out.write_all(tail.as_bytes()).and_then(|_| out.flush()) {
        note(&|l| l.disconnected = true);
        return Err(e);
    }
    note(&|l| l.completed = true);
    Ok(())
}

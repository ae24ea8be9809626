//! Decoding of streamed completion chunks into per-token top-k lists.
//!
//! Both the legacy completions shape (`logprobs.top_logprobs` as a list of
//! token-to-logprob maps) and the chat shape (`logprobs.content[].top_logprobs`
//! as lists of `{token, logprob}`) are accepted.

use serde_json::Value;

use crate::GatewayError;

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkToken {
    pub text: String,
    /// Sorted non-increasing, exactly `k` entries.
    pub top_logprobs: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Chunk {
    pub text: String,
    pub tokens: Vec<ChunkToken>,
    pub finish_reason: Option<String>,
}

pub const MISSING_LOGPROBS: &str = "the endpoint streamed tokens without top log-probabilities; \
     the server must honour `logprobs`/`top_logprobs` on streaming requests \
     (for vLLM, start it with --max-logprobs at least top_logprobs)";

/// Stand-in for `-inf`, the value several servers already use.
pub const LOGPROB_FLOOR: f64 = -9999.0;

/// Sorts, then truncates or pads with the smallest reported value to `k`
/// entries. Values are clamped to `[LOGPROB_FLOOR, 0]`.
pub fn normalize_top(mut values: Vec<f64>, k: usize) -> Vec<f64> {
    for v in &mut values {
        if !(*v >= LOGPROB_FLOOR) {
            *v = LOGPROB_FLOOR;
        }
        // some servers report tiny positive rounding noise on certain tokens
        if *v > 0.0 {
            *v = 0.0;
        }
    }
    values.sort_by(|a, b| b.total_cmp(a));
    values.truncate(k);
    if let Some(&last) = values.last() {
        values.resize(k, last);
    }
    values
}

fn number(v: &Value) -> Option<f64> {
    v.as_f64()
}

pub fn parse_chunk(data: &str, k: usize) -> Result<Chunk, GatewayError> {
    let v: Value = serde_json::from_str(data).map_err(|e| GatewayError::Protocol(format!("bad chunk json: {e}")))?;
    if let Some(err) = v.get("error") {
        return Err(GatewayError::Server(err.to_string()));
    }
    let Some(choice) = v.get("choices").and_then(Value::as_array).and_then(|c| c.first()) else {
        return Ok(Chunk::default());
    };
    let text = choice
        .get("text")
        .and_then(Value::as_str)
        .or_else(|| choice.pointer("/delta/content").and_then(Value::as_str))
        .unwrap_or("")
        .to_string();
    let finish_reason = choice.get("finish_reason").and_then(Value::as_str).map(String::from);
    let logprobs = choice.get("logprobs").filter(|l| !l.is_null());
    let tokens = match logprobs {
        None => Vec::new(),
        Some(lp) => {
            if let Some(content) = lp.get("content").and_then(Value::as_array) {
                chat_tokens(content, k)?
            } else {
                legacy_tokens(lp, k)?
            }
        }
    };
    if tokens.is_empty() && !text.is_empty() {
        return Err(GatewayError::MissingLogprobs(MISSING_LOGPROBS.into()));
    }
    Ok(Chunk {
        text,
        tokens,
        finish_reason,
    })
}

fn chat_tokens(content: &[Value], k: usize) -> Result<Vec<ChunkToken>, GatewayError> {
    content
        .iter()
        .map(|entry| {
            let text = entry.get("token").and_then(Value::as_str).unwrap_or("").to_string();
            let tops: Vec<f64> = entry
                .get("top_logprobs")
                .and_then(Value::as_array)
                .map(|t| t.iter().filter_map(|e| e.get("logprob").and_then(number)).collect())
                .unwrap_or_default();
            if tops.is_empty() {
                return Err(GatewayError::MissingLogprobs(MISSING_LOGPROBS.into()));
            }
            Ok(ChunkToken {
                text,
                top_logprobs: normalize_top(tops, k),
            })
        })
        .collect()
}

fn legacy_tokens(lp: &Value, k: usize) -> Result<Vec<ChunkToken>, GatewayError> {
    let texts = lp.get("tokens").and_then(Value::as_array);
    let Some(tops) = lp.get("top_logprobs").and_then(Value::as_array) else {
        return Err(GatewayError::MissingLogprobs(MISSING_LOGPROBS.into()));
    };
    tops.iter()
        .enumerate()
        .map(|(i, entry)| {
            let values: Vec<f64> = match entry {
                Value::Object(map) => map.values().filter_map(number).collect(),
                Value::Array(list) => list.iter().filter_map(|e| e.get("logprob").and_then(number)).collect(),
                _ => Vec::new(),
            };
            if values.is_empty() {
                return Err(GatewayError::MissingLogprobs(MISSING_LOGPROBS.into()));
            }
            let text = texts
                .and_then(|t| t.get(i))
                .and_then(Value::as_str)
                .unwrap_or("")
                .to_string();
            Ok(ChunkToken {
                text,
                top_logprobs: normalize_top(values, k),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legacy_chunk() {
        let data = r#"{"choices":[{"index":0,"text":"Hi","logprobs":{"tokens":["Hi"],"token_logprobs":[-0.1],
            "top_logprobs":[{"Hi":-0.1,"Hello":-2.5,"Hey":-3.0}]},"finish_reason":null}]}"#;
        let c = parse_chunk(data, 3).unwrap();
        assert_eq!(c.text, "Hi");
        assert_eq!(c.tokens.len(), 1);
        assert_eq!(c.tokens[0].top_logprobs, vec![-0.1, -2.5, -3.0]);
        assert_eq!(c.finish_reason, None);
    }

    #[test]
    fn chat_chunk_with_twenty() {
        let tops: Vec<String> = (0..20)
            .map(|i| format!(r#"{{"token":"t{i}","logprob":{}}}"#, -(i as f64) * 0.5))
            .collect();
        let data = format!(
            r#"{{"choices":[{{"delta":{{"content":"t0"}},"logprobs":{{"content":[{{"token":"t0","logprob":0.0,"top_logprobs":[{}]}}]}},"finish_reason":"stop"}}]}}"#,
            tops.join(",")
        );
        let c = parse_chunk(&data, 20).unwrap();
        assert_eq!(c.tokens.len(), 1);
        assert_eq!(c.tokens[0].top_logprobs.len(), 20);
        assert_eq!(c.finish_reason.as_deref(), Some("stop"));
    }

    #[test]
    fn text_without_logprobs_is_a_config_error() {
        let err = parse_chunk(r#"{"choices":[{"text":"Hi","logprobs":null}]}"#, 20).unwrap_err();
        match err {
            GatewayError::MissingLogprobs(m) => assert!(m.contains("top_logprobs")),
            other => panic!("{other:?}"),
        }
        assert!(parse_chunk(r#"{"choices":[{"delta":{"role":"assistant"}}]}"#, 20)
            .unwrap()
            .tokens
            .is_empty());
        assert!(parse_chunk(r#"{"choices":[],"usage":{}}"#, 20).unwrap().tokens.is_empty());
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_top(vec![-3.0, -1.0], 4), vec![-1.0, -3.0, -3.0, -3.0]);
        assert_eq!(normalize_top(vec![-3.0, -1.0, -2.0], 2), vec![-1.0, -2.0]);
        assert_eq!(normalize_top(vec![1e-9, f64::NEG_INFINITY], 2), vec![0.0, LOGPROB_FLOOR]);
    }
}

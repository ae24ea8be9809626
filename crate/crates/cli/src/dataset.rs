use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// One query. Extra fields in the input line are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub prompt: String,
    #[serde(default)]
    pub gold: Option<String>,
}

#[derive(Deserialize)]
struct RawQuery {
    id: Value,
    prompt: String,
    #[serde(default)]
    gold: Option<Value>,
}

fn scalar(v: Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

pub fn parse_dataset(text: &str) -> Result<Vec<Query>, CliError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| CliError::Usage(format!("dataset line {}: {m}", i + 1));
        let raw: RawQuery = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let id = scalar(raw.id).ok_or_else(|| bad("id must be a string or number".into()))?;
        ddc_gateway::trace::validate_query_id(&id).map_err(|e| bad(e.to_string()))?;
        if !seen.insert(id.clone()) {
            return Err(bad(format!("duplicate id {id:?}")));
        }
        let gold = match raw.gold {
            None | Some(Value::Null) => None,
            Some(v) => Some(scalar(v).ok_or_else(|| bad("gold must be a string or number".into()))?),
        };
        out.push(Query {
            id,
            prompt: raw.prompt,
            gold,
        });
    }
    if out.is_empty() {
        return Err(CliError::Usage("dataset is empty".into()));
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Query>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    parse_dataset(&text)
}

/// Loose answer normalization for grading: surrounding whitespace and `$`,
/// inner spaces, a trailing period, and numeric formatting are ignored.
pub fn normalize_answer(a: &str) -> String {
    let s: String = a.trim().trim_matches('$').chars().filter(|c| !c.is_whitespace()).collect();
    let s = s.trim_end_matches('.').replace(',', "");
    match s.parse::<f64>() {
        Ok(x) if x.is_finite() => format!("{x}"),
        _ => s,
    }
}

pub fn answers_match(answer: &str, gold: &str) -> bool {
    normalize_answer(answer) == normalize_answer(gold)
}

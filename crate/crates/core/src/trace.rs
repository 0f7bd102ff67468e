//! Trace data model and JSON Lines ingestion.
//!
//! One line of telemetry is one tool call:
//! `{"session_id": str, "timestamp": int, "tool": str, "params": object}`.
//! Lines are grouped into per-session [`Trace`]s and collected into a
//! [`Corpus`] that the profiler compiles.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

const REQUIRED_FIELDS: [&str; 4] = ["session_id", "timestamp", "tool", "params"];

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("malformed JSON at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("schema error in field \"{field}\": {message}")]
    Schema { field: String, message: String },
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: Box<TraceError>,
    },
    #[error("I/O error reading traces: {0}")]
    Io(String),
}

impl TraceError {
    fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        TraceError::Schema {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// A single tool invocation as captured by telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolCallRecord {
    pub session_id: String,
    /// Milliseconds since the epoch.
    pub timestamp: u64,
    pub tool: String,
    pub params: Map<String, Value>,
}

impl ToolCallRecord {
    pub fn new(
        session_id: impl Into<String>,
        timestamp: u64,
        tool: impl Into<String>,
        params: Map<String, Value>,
    ) -> Self {
        ToolCallRecord {
            session_id: session_id.into(),
            timestamp,
            tool: tool.into(),
            params,
        }
    }

    /// Canonical single-line JSON form (sorted keys, no whitespace).
    pub fn to_json_line(&self) -> String {
        let mut obj = Map::new();
        obj.insert("params".into(), Value::Object(self.params.clone()));
        obj.insert("session_id".into(), Value::String(self.session_id.clone()));
        obj.insert("timestamp".into(), Value::from(self.timestamp));
        obj.insert("tool".into(), Value::String(self.tool.clone()));
        canonical_json(&Value::Object(obj))
    }

    pub fn flat_params(&self) -> FlatParams {
        flatten_params(&self.params)
    }
}

/// An ordered sequence of calls from one session.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub session_id: String,
    pub calls: Vec<ToolCallRecord>,
}

impl Trace {
    pub fn tools(&self) -> impl Iterator<Item = &str> {
        self.calls.iter().map(|c| c.tool.as_str())
    }

    pub fn tool_sequence(&self) -> Vec<String> {
        self.tools().map(str::to_owned).collect()
    }
}

/// A set of traces plus the tool vocabulary they use.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    /// Sorted by session id.
    pub traces: Vec<Trace>,
    pub vocabulary: BTreeSet<String>,
}

impl Corpus {
    /// Builds a corpus from already-grouped traces, recomputing the vocabulary.
    pub fn from_traces(mut traces: Vec<Trace>) -> Self {
        traces.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        let vocabulary = traces
            .iter()
            .flat_map(|t| t.calls.iter().map(|c| c.tool.clone()))
            .collect();
        Corpus { traces, vocabulary }
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn call_count(&self) -> usize {
        self.traces.iter().map(|t| t.calls.len()).sum()
    }

    /// All records in trace order, one JSON line each.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for call in self.traces.iter().flat_map(|t| &t.calls) {
            out.push_str(&call.to_json_line());
            out.push('\n');
        }
        out
    }
}

/// Leaf value of a flattened parameter tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Leaf {
    Number(f64),
    Bool(bool),
    Str(String),
    /// Compact JSON of a composite or null leaf (arrays, empty objects, null).
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafKind {
    Number,
    Bool,
    Str,
    Json,
}

impl Leaf {
    pub fn kind(&self) -> LeafKind {
        match self {
            Leaf::Number(_) => LeafKind::Number,
            Leaf::Bool(_) => LeafKind::Bool,
            Leaf::Str(_) => LeafKind::Str,
            Leaf::Json(_) => LeafKind::Json,
        }
    }

    /// Unambiguous textual form used for categorical membership: strings are
    /// JSON-quoted, composites are raw compact JSON.
    pub fn canonical(&self) -> String {
        match self {
            Leaf::Number(n) => render_number(*n),
            Leaf::Bool(b) => b.to_string(),
            Leaf::Str(s) => Value::String(s.clone()).to_string(),
            Leaf::Json(j) => j.clone(),
        }
    }

    /// Inverse of [`Leaf::canonical`].
    pub fn from_canonical(canonical: &str) -> Leaf {
        match canonical_kind(canonical) {
            LeafKind::Number => Leaf::Number(canonical.parse().unwrap_or(f64::NAN)),
            LeafKind::Bool => Leaf::Bool(canonical == "true"),
            LeafKind::Str => Leaf::Str(
                serde_json::from_str(canonical).unwrap_or_else(|_| canonical.to_owned()),
            ),
            LeafKind::Json => Leaf::Json(canonical.to_owned()),
        }
    }

    pub fn to_value(&self) -> Value {
        match self {
            Leaf::Number(n) => serde_json::Number::from_f64(*n)
                .map(Value::Number)
                .unwrap_or(Value::Null),
            Leaf::Bool(b) => Value::Bool(*b),
            Leaf::Str(s) => Value::String(s.clone()),
            Leaf::Json(j) => serde_json::from_str(j).unwrap_or(Value::Null),
        }
    }
}

/// Kind of a leaf given its canonical rendering.
pub fn canonical_kind(canonical: &str) -> LeafKind {
    match canonical.as_bytes().first() {
        Some(b'"') => LeafKind::Str,
        Some(b't') | Some(b'f') => LeafKind::Bool,
        Some(b'[') | Some(b'{') | Some(b'n') => LeafKind::Json,
        _ => LeafKind::Number,
    }
}

fn render_number(n: f64) -> String {
    match serde_json::Number::from_f64(n) {
        Some(num) => num.to_string(),
        None => "null".to_owned(),
    }
}

/// Parameters flattened to dotted paths.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlatParams {
    pub entries: BTreeMap<String, Leaf>,
}

impl FlatParams {
    pub fn get(&self, path: &str) -> Option<&Leaf> {
        self.entries.get(path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, path: impl Into<String>, leaf: Leaf) {
        self.entries.insert(path.into(), leaf);
    }

    pub fn to_value(&self) -> Value {
        Value::Object(
            self.entries
                .iter()
                .map(|(k, v)| (k.clone(), v.to_value()))
                .collect(),
        )
    }
}

impl fmt::Display for FlatParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&canonical_json(&self.to_value()))
    }
}

/// Flattens nested objects into dot-joined paths. Arrays, empty objects and
/// nulls become compact-JSON leaves.
pub fn flatten_params(params: &Map<String, Value>) -> FlatParams {
    let mut flat = FlatParams::default();
    for (key, value) in params {
        flatten_into(key.clone(), value, &mut flat);
    }
    flat
}

fn flatten_into(path: String, value: &Value, out: &mut FlatParams) {
    let leaf = match value {
        Value::Object(map) if !map.is_empty() => {
            for (key, child) in map {
                flatten_into(format!("{path}.{key}"), child, out);
            }
            return;
        }
        Value::Number(n) => Leaf::Number(n.as_f64().unwrap_or(f64::NAN)),
        Value::Bool(b) => Leaf::Bool(*b),
        Value::String(s) => Leaf::Str(s.clone()),
        other => Leaf::Json(canonical_json(other)),
    };
    out.entries.insert(path, leaf);
}

/// Compact JSON with object keys sorted at every level.
pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(key.clone()).to_string());
                out.push(':');
                write_canonical(&map[key], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&scalar.to_string()),
    }
}

fn check_keys(path: &str, value: &Value) -> Result<(), TraceError> {
    if let Value::Object(map) = value {
        for (key, child) in map {
            let child_path = if path.is_empty() {
                key.clone()
            } else {
                format!("{path}.{key}")
            };
            if key.contains('.') {
                return Err(TraceError::schema(
                    "params",
                    format!("key \"{child_path}\" contains '.'"),
                ));
            }
            check_keys(&child_path, child)?;
        }
    }
    Ok(())
}

/// Validates that a parameter object can be flattened unambiguously.
pub fn validate_params(params: &Map<String, Value>) -> Result<(), TraceError> {
    for (key, child) in params {
        if key.contains('.') {
            return Err(TraceError::schema(
                "params",
                format!("key \"{key}\" contains '.'"),
            ));
        }
        check_keys(key, child)?;
    }
    Ok(())
}

/// Decodes one JSON Lines record.
pub fn parse_trace_line(line: &str) -> Result<ToolCallRecord, TraceError> {
    let value: Value = serde_json::from_str(line).map_err(|e| TraceError::Parse {
        offset: byte_offset(line, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let Value::Object(mut obj) = value else {
        return Err(TraceError::schema("<root>", "expected a JSON object"));
    };
    for field in REQUIRED_FIELDS {
        if !obj.contains_key(field) {
            return Err(TraceError::schema(field, "missing"));
        }
    }
    if let Some(extra) = obj.keys().find(|k| !REQUIRED_FIELDS.contains(&k.as_str())) {
        return Err(TraceError::schema(extra.clone(), "unexpected field"));
    }

    let session_id = match obj.remove("session_id") {
        Some(Value::String(s)) => s,
        _ => return Err(TraceError::schema("session_id", "expected a string")),
    };
    let timestamp = match obj.remove("timestamp") {
        Some(Value::Number(n)) => n
            .as_u64()
            .ok_or_else(|| TraceError::schema("timestamp", "expected a non-negative integer"))?,
        _ => return Err(TraceError::schema("timestamp", "expected an integer")),
    };
    let tool = match obj.remove("tool") {
        Some(Value::String(s)) if !s.is_empty() => s,
        Some(Value::String(_)) => return Err(TraceError::schema("tool", "empty tool name")),
        _ => return Err(TraceError::schema("tool", "expected a string")),
    };
    let params = match obj.remove("params") {
        Some(Value::Object(map)) => map,
        _ => return Err(TraceError::schema("params", "expected an object")),
    };
    validate_params(&params)?;

    Ok(ToolCallRecord {
        session_id,
        timestamp,
        tool,
        params,
    })
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    // serde_json reports 1-based line and column (column counted in bytes).
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

/// Groups JSON Lines records into traces. Blank lines are skipped; any
/// malformed line aborts with its 1-based line number.
pub fn load_corpus<I, S>(lines: I) -> Result<Corpus, TraceError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut sessions: BTreeMap<String, Vec<ToolCallRecord>> = BTreeMap::new();
    for (idx, line) in lines.into_iter().enumerate() {
        let line = line.as_ref();
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_trace_line(line).map_err(|e| TraceError::Line {
            line: idx + 1,
            source: Box::new(e),
        })?;
        sessions
            .entry(record.session_id.clone())
            .or_default()
            .push(record);
    }

    let mut vocabulary = BTreeSet::new();
    let traces = sessions
        .into_iter()
        .map(|(session_id, mut calls)| {
            // stable: ties keep input order
            calls.sort_by_key(|c| c.timestamp);
            vocabulary.extend(calls.iter().map(|c| c.tool.clone()));
            Trace { session_id, calls }
        })
        .collect();
    Ok(Corpus { traces, vocabulary })
}

pub fn load_corpus_reader<R: BufRead>(reader: R) -> Result<Corpus, TraceError> {
    let lines = reader
        .lines()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| TraceError::Io(e.to_string()))?;
    load_corpus(lines)
}

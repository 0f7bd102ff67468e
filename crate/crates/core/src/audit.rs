//! Append-only SHA-256 hash chain of blocked calls.
//!
//! Each log line is `<canonical json>\t<lowercase hex hash>\n`, where
//! `hash_n = SHA-256(hash_{n-1} || json_n)` and `hash_{-1}` is 32 zero bytes.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::profiler::State;
use crate::trace::{canonical_json, FlatParams};

pub const GENESIS: [u8; 32] = [0u8; 32];

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("entry index {got} does not extend a chain of length {expected}")]
    IndexMismatch { expected: u64, got: u64 },
    #[error("existing audit log is broken at entry {index}: {reason}")]
    Broken { index: u64, reason: String },
    #[error("audit storage error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditEntry {
    pub index: u64,
    pub session_id: String,
    pub state: State,
    pub tool: String,
    pub params: FlatParams,
    pub timestamp: u64,
    pub reason: String,
    /// Guard failure code and path, when the block came from a guard.
    pub detail: Option<String>,
}

impl AuditEntry {
    pub fn to_value(&self) -> Value {
        let mut v = json!({
            "index": self.index,
            "session_id": self.session_id,
            "state": {"tool": self.state.tool, "ctx": self.state.ctx},
            "tool": self.tool,
            "params": self.params.to_value(),
            "timestamp": self.timestamp,
            "reason": self.reason,
        });
        if let Some(d) = &self.detail {
            v["detail"] = Value::String(d.clone());
        }
        v
    }

    /// Sorted keys, no whitespace, UTF-8.
    pub fn canonical_encode(&self) -> String {
        canonical_json(&self.to_value())
    }
}

pub fn chain_hash(prev: &[u8; 32], encoded: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(prev);
    h.update(encoded);
    h.finalize().into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainRoot {
    pub length: u64,
    pub head: String,
}

enum Sink {
    File(File),
    Writer(Box<dyn Write + Send>),
}

/// The single appender of a chain.
pub struct AuditLog {
    sink: Sink,
    path: Option<PathBuf>,
    len: u64,
    head: [u8; 32],
}

impl std::fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuditLog")
            .field("path", &self.path)
            .field("len", &self.len)
            .field("head", &hex::encode(self.head))
            .finish()
    }
}

impl AuditLog {
    /// Opens (or creates) a log file, verifying any existing content so new
    /// entries extend a sound chain.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, AuditError> {
        let path = path.as_ref();
        let existing = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let (len, head) = match verify(&existing) {
            Verification::Ok { length, head } => (length, head),
            Verification::Broken { index, reason } => return Err(AuditError::Broken { index, reason }),
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(AuditLog {
            sink: Sink::File(file),
            path: Some(path.to_path_buf()),
            len,
            head,
        })
    }

    /// A log over an arbitrary writer; flushed but not fsync'd.
    pub fn from_writer(w: Box<dyn Write + Send>) -> Self {
        AuditLog {
            sink: Sink::Writer(w),
            path: None,
            len: 0,
            head: GENESIS,
        }
    }

    /// A log that keeps nothing; used for offline replay.
    pub fn discard() -> Self {
        Self::from_writer(Box::new(io::sink()))
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn head(&self) -> [u8; 32] {
        self.head
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Writes `entry` and flushes it to stable storage before returning the
    /// new head. On failure the chain does not advance.
    pub fn append(&mut self, entry: &AuditEntry) -> Result<[u8; 32], AuditError> {
        if entry.index != self.len {
            return Err(AuditError::IndexMismatch {
                expected: self.len,
                got: entry.index,
            });
        }
        let encoded = entry.canonical_encode();
        let hash = chain_hash(&self.head, encoded.as_bytes());
        let line = format!("{encoded}\t{}\n", hex::encode(hash));
        match &mut self.sink {
            Sink::File(f) => {
                f.write_all(line.as_bytes())?;
                f.sync_data()?;
            }
            Sink::Writer(w) => {
                w.write_all(line.as_bytes())?;
                w.flush()?;
            }
        }
        self.len += 1;
        self.head = hash;
        Ok(hash)
    }

    pub fn export_root(&self) -> ChainRoot {
        ChainRoot {
            length: self.len,
            head: hex::encode(self.head),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verification {
    Ok { length: u64, head: [u8; 32] },
    Broken { index: u64, reason: String },
}

impl Verification {
    pub fn is_ok(&self) -> bool {
        matches!(self, Verification::Ok { .. })
    }
}

fn check_line(line: &[u8], index: u64, prev: &[u8; 32]) -> Result<[u8; 32], String> {
    let text = std::str::from_utf8(line).map_err(|_| "not valid UTF-8".to_owned())?;
    let (body, stored) = text.rsplit_once('\t').ok_or("missing hash separator")?;
    let v: Value = serde_json::from_str(body).map_err(|e| format!("unparseable entry: {e}"))?;
    if canonical_json(&v) != body {
        return Err("entry is not canonically encoded".into());
    }
    if v.get("index").and_then(Value::as_u64) != Some(index) {
        return Err("entry index out of sequence".into());
    }
    let hash = chain_hash(prev, body.as_bytes());
    if hex::encode(hash) != stored {
        return Err("hash mismatch".into());
    }
    Ok(hash)
}

/// Recomputes the chain from genesis.
pub fn verify(log: &[u8]) -> Verification {
    let mut prev = GENESIS;
    let mut lines: Vec<&[u8]> = log.split(|&b| b == b'\n').collect();
    // A well-formed log ends with a newline, leaving one empty final piece.
    if lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    for (i, line) in lines.iter().enumerate() {
        match check_line(line, i as u64, &prev) {
            Ok(h) => prev = h,
            Err(reason) => {
                return Verification::Broken {
                    index: i as u64,
                    reason,
                }
            }
        }
    }
    Verification::Ok {
        length: lines.len() as u64,
        head: prev,
    }
}

/// Verifies the log and additionally checks it extends a previously exported
/// root, which catches truncation.
pub fn verify_against_root(log: &[u8], root: &ChainRoot) -> Verification {
    let full = verify(log);
    let Verification::Ok { length, .. } = full else {
        return full;
    };
    if length < root.length {
        return Verification::Broken {
            index: length,
            reason: format!("log has {length} entries but the root records {}", root.length),
        };
    }
    let mut prev = GENESIS;
    for (i, line) in log.split(|&b| b == b'\n').take(root.length as usize).enumerate() {
        prev = check_line(line, i as u64, &prev).expect("already verified");
    }
    if hex::encode(prev) != root.head {
        return Verification::Broken {
            index: root.length.saturating_sub(1),
            reason: "chain does not match the exported root".into(),
        };
    }
    full
}

pub fn export_root(log: &[u8]) -> Result<ChainRoot, AuditError> {
    match verify(log) {
        Verification::Ok { length, head } => Ok(ChainRoot {
            length,
            head: hex::encode(head),
        }),
        Verification::Broken { index, reason } => Err(AuditError::Broken { index, reason }),
    }
}

//! Human-reviewed incremental profile updates.
//!
//! Blocked events are queued with the call sequence that led to them. Once a
//! reviewer approves an item, [`incremental_recompile`] merges its calls into
//! the digest sidecar and rebuilds only the edges those calls touch.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::embedding::{cosine_distance, Embedder};
use crate::guards::{Guard, ParamSchema, StringBall};
use crate::profiler::{assemble, Digests, EdgeKey, Pdfa};
use crate::store::digests_fingerprint;
use crate::trace::{parse_trace_line, ToolCallRecord};

#[derive(Debug, Error)]
pub enum UpdateError {
    #[error("fragment is empty")]
    EmptyFragment,
    #[error("no queue item with id {0}")]
    UnknownId(u64),
    #[error("item {id} was already reviewed ({status:?})")]
    AlreadyReviewed { id: u64, status: ApprovalStatus },
    #[error("fragment {fragment}, call {position}: {message}")]
    InconsistentFragment {
        fragment: u64,
        position: usize,
        message: String,
    },
    #[error("digests do not belong to this profile")]
    DigestMismatch,
    #[error("queue file line {line}: {message}")]
    CorruptQueue { line: usize, message: String },
    #[error("recompile failed: {0}")]
    Compile(String),
    #[error("queue storage error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApprovalStatus {
    Pending,
    Approved,
    Rejected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendingApproval {
    pub id: u64,
    /// Index of the blocked audit entry this item came from, if any.
    pub blocked_index: Option<u64>,
    pub fragment: Vec<ToolCallRecord>,
    pub status: ApprovalStatus,
    pub note: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum QueueEvent {
    Enqueue {
        id: u64,
        blocked_index: Option<u64>,
        fragment: Vec<Value>,
    },
    Review {
        id: u64,
        status: ApprovalStatus,
        note: String,
    },
}

/// Review queue, persisted as an append-only JSONL event log.
#[derive(Debug, Default)]
pub struct ReviewQueue {
    path: Option<PathBuf>,
    items: BTreeMap<u64, PendingApproval>,
}

impl ReviewQueue {
    pub fn in_memory() -> Self {
        ReviewQueue::default()
    }

    /// Opens a queue file, replaying its events. A missing file is an empty
    /// queue.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, UpdateError> {
        let path = path.as_ref().to_path_buf();
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e.into()),
        };
        let mut q = ReviewQueue {
            path: Some(path),
            items: BTreeMap::new(),
        };
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let corrupt = |message: String| UpdateError::CorruptQueue { line: i + 1, message };
            let ev: QueueEvent = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
            q.apply(ev).map_err(|e| corrupt(e.to_string()))?;
        }
        Ok(q)
    }

    fn apply(&mut self, ev: QueueEvent) -> Result<(), UpdateError> {
        match ev {
            QueueEvent::Enqueue {
                id,
                blocked_index,
                fragment,
            } => {
                let calls = fragment
                    .iter()
                    .map(|v| parse_trace_line(&v.to_string()))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| UpdateError::Compile(e.to_string()))?;
                self.items.insert(
                    id,
                    PendingApproval {
                        id,
                        blocked_index,
                        fragment: calls,
                        status: ApprovalStatus::Pending,
                        note: String::new(),
                    },
                );
            }
            QueueEvent::Review { id, status, note } => {
                let item = self.items.get_mut(&id).ok_or(UpdateError::UnknownId(id))?;
                if item.status != ApprovalStatus::Pending {
                    return Err(UpdateError::AlreadyReviewed { id, status: item.status });
                }
                item.status = status;
                item.note = note;
            }
        }
        Ok(())
    }

    fn persist(&self, ev: &QueueEvent) -> Result<(), UpdateError> {
        if let Some(p) = &self.path {
            let mut f = OpenOptions::new().create(true).append(true).open(p)?;
            let mut line = serde_json::to_string(ev).expect("queue events serialize");
            line.push('\n');
            f.write_all(line.as_bytes())?;
            f.sync_data()?;
        }
        Ok(())
    }

    pub fn enqueue(
        &mut self,
        blocked_index: Option<u64>,
        fragment: Vec<ToolCallRecord>,
    ) -> Result<PendingApproval, UpdateError> {
        if fragment.is_empty() {
            return Err(UpdateError::EmptyFragment);
        }
        let id = self.items.keys().next_back().map_or(0, |k| k + 1);
        let ev = QueueEvent::Enqueue {
            id,
            blocked_index,
            fragment: fragment
                .iter()
                .map(|c| serde_json::from_str(&c.to_json_line()).expect("record is valid JSON"))
                .collect(),
        };
        self.persist(&ev)?;
        self.apply(ev)?;
        Ok(self.items[&id].clone())
    }

    pub fn review(&mut self, id: u64, approve: bool, note: &str) -> Result<PendingApproval, UpdateError> {
        let item = self.items.get(&id).ok_or(UpdateError::UnknownId(id))?;
        if item.status != ApprovalStatus::Pending {
            return Err(UpdateError::AlreadyReviewed { id, status: item.status });
        }
        let ev = QueueEvent::Review {
            id,
            status: if approve {
                ApprovalStatus::Approved
            } else {
                ApprovalStatus::Rejected
            },
            note: note.to_owned(),
        };
        self.persist(&ev)?;
        self.apply(ev)?;
        Ok(self.items[&id].clone())
    }

    pub fn items(&self) -> impl Iterator<Item = &PendingApproval> {
        self.items.values()
    }

    pub fn get(&self, id: u64) -> Option<&PendingApproval> {
        self.items.get(&id)
    }

    /// Approved items, in id order.
    pub fn approved(&self) -> Vec<&PendingApproval> {
        self.items
            .values()
            .filter(|i| i.status == ApprovalStatus::Approved)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct UpdateReport {
    pub fragments_applied: Vec<u64>,
    pub fragments_skipped: Vec<u64>,
    pub new_states: usize,
    pub new_edges: usize,
    pub recomputed_edges: usize,
    pub warnings: Vec<String>,
}

fn check_fragment(id: u64, calls: &[ToolCallRecord]) -> Result<(), UpdateError> {
    let err = |position: usize, message: &str| UpdateError::InconsistentFragment {
        fragment: id,
        position,
        message: message.to_owned(),
    };
    let first = calls.first().ok_or(UpdateError::EmptyFragment)?;
    for (i, c) in calls.iter().enumerate() {
        if c.tool.is_empty() {
            return Err(err(i, "empty tool name"));
        }
        if c.session_id != first.session_id {
            return Err(err(i, "call belongs to a different session"));
        }
        if i > 0 && c.timestamp < calls[i - 1].timestamp {
            return Err(err(i, "timestamp goes backwards"));
        }
    }
    Ok(())
}

/// Angle-based cover: the returned ball contains every point of `old`.
///
/// Angular distance obeys the triangle inequality, so a ball of angle
/// `a_old + shift` around the new centroid covers the old ball.
fn cover_ball(old: &StringBall, new: StringBall) -> StringBall {
    let angle = |d: f64| (1.0 - d).clamp(-1.0, 1.0).acos();
    let shift = angle(cosine_distance(&old.centroid, &new.centroid));
    let needed_angle = (angle(old.radius.min(2.0)) + shift).min(std::f64::consts::PI);
    let needed = 1.0 - needed_angle.cos() + 1e-12;
    StringBall {
        radius: new.radius.max(needed),
        centroid: new.centroid,
    }
}

/// Widens a recomputed schema so it accepts whatever the old one accepted,
/// where the guard kinds allow it.
fn widen_to_cover(old: &ParamSchema, mut new: ParamSchema, where_: &str) -> (ParamSchema, Vec<String>) {
    let mut warnings = Vec::new();
    for (path, og) in &old.guards {
        let Some(ng) = new.guards.get_mut(path) else {
            continue;
        };
        match (og, ng) {
            (Guard::Numeric(o), Guard::Numeric(n)) => {
                n.lo = n.lo.min(o.lo);
                n.hi = n.hi.max(o.hi);
            }
            (Guard::Categorical(o), Guard::Categorical(n)) => {
                n.values.extend(o.values.iter().cloned());
            }
            (Guard::String(o), Guard::String(n)) => {
                *n = cover_ball(o, n.clone());
            }
            // Categorical string values are all observations, which the
            // new ball already covers.
            (Guard::Categorical(_), Guard::String(_)) => {}
            (o, n) => warnings.push(format!(
                "{where_}: guard on {path} changed from {:?} to {:?}; previously accepted values may now block",
                o.kind(),
                n.kind()
            )),
        }
    }
    (new, warnings)
}

/// Applies approved fragments to `pdfa`, returning the new profile and
/// digests. Edges not walked by any fragment keep their schema verbatim.
pub fn incremental_recompile(
    pdfa: &Pdfa,
    digests: &Digests,
    fragments: &[(u64, &[ToolCallRecord])],
    embedder: &dyn Embedder,
) -> Result<(Pdfa, Digests, UpdateReport), UpdateError> {
    if pdfa.digest_ref() != Some(digests_fingerprint(digests).as_str()) {
        return Err(UpdateError::DigestMismatch);
    }
    let mut report = UpdateReport::default();
    let pending: Vec<&(u64, &[ToolCallRecord])> = fragments
        .iter()
        .filter(|(id, _)| {
            let done = digests.applied.contains(id);
            if done {
                report.fragments_skipped.push(*id);
            }
            !done
        })
        .collect();
    if pending.is_empty() {
        return Ok((pdfa.clone(), digests.clone(), report));
    }
    for (id, calls) in &pending {
        check_fragment(*id, calls)?;
    }

    let params = pdfa.params();
    let mut raw = digests.raw.clone();
    let mut exempt = digests.exempt.clone();
    let mut touched: BTreeSet<EdgeKey> = BTreeSet::new();
    let mut vocab = pdfa.vocab().clone();
    let mut applied = digests.applied.clone();
    for (id, calls) in &pending {
        let walked = raw.add_records(calls);
        exempt.extend(walked.iter().cloned());
        touched.extend(walked);
        vocab.extend(calls.iter().map(|c| c.tool.clone()));
        applied.insert(*id);
        report.fragments_applied.push(*id);
    }

    let old: BTreeMap<EdgeKey, &ParamSchema> = pdfa
        .edges()
        .iter()
        .map(|e| ((pdfa.states()[e.src].clone(), e.tool.clone()), &e.schema))
        .collect();
    let reuse = |k: &EdgeKey| {
        if touched.contains(k) {
            None
        } else {
            old.get(k).map(|s| (*s).clone())
        }
    };
    let (mut next, compile_report) = assemble(&raw, &exempt, params, vocab, embedder, &reuse)
        .map_err(|e| UpdateError::Compile(e.to_string()))?;
    report.warnings.extend(compile_report.warnings);

    // Widen recomputed schemas on pre-existing edges so nothing the old
    // profile accepted is rejected now.
    let mut widened = Vec::new();
    for (i, e) in next.edges().iter().enumerate() {
        let key = (next.states()[e.src].clone(), e.tool.clone());
        if let (true, Some(o)) = (touched.contains(&key), old.get(&key)) {
            let (s, w) = widen_to_cover(o, e.schema.clone(), &format!("{} on {}", key.0, key.1));
            report.warnings.extend(w);
            widened.push((i, s));
        }
    }
    next = next.with_schemas(widened);

    report.new_states = next.states().len().saturating_sub(pdfa.states().len());
    report.new_edges = next.edges().iter().filter(|e| !old.contains_key(&(next.states()[e.src].clone(), e.tool.clone()))).count();
    report.recomputed_edges = touched.len();

    let digests = Digests { raw, exempt, applied };
    let next = next.with_digest_ref(Some(digests_fingerprint(&digests)));
    Ok((next, digests, report))
}

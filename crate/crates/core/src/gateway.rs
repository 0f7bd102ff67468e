//! Runtime enforcement: per-session state pointers, edge lookup, guard
//! evaluation, and the NDJSON socket service.

use std::collections::HashMap;
use std::fmt;
use std::ops::Deref;
use std::io::{self, BufRead, BufReader, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;
use tracing::{info, warn};

use crate::audit::{AuditEntry, AuditLog};
use crate::embedding::Embedder;
use crate::fastpath::FastVerdict;
use crate::guards::{check_guard, GuardVerdict};
use crate::profiler::{Pdfa, State};
use crate::trace::{flatten_params, validate_params, FlatParams};

pub const DEFAULT_SESSION_CAPACITY: usize = 100_000;
pub const DEFAULT_SESSION_TTL_MS: u64 = 30 * 60 * 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Allow,
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    Ok,
    UnknownTool,
    NoTransition,
    TerminalState,
    GuardFailure,
    SessionLimit,
}

impl Reason {
    pub fn as_str(&self) -> &'static str {
        match self {
            Reason::Ok => "ok",
            Reason::UnknownTool => "unknown_tool",
            Reason::NoTransition => "no_transition",
            Reason::TerminalState => "terminal_state",
            Reason::GuardFailure => "guard_failure",
            Reason::SessionLimit => "session_limit",
        }
    }
}

/// A state of the profile a decision was made against. Dereferences to
/// [`State`]; holding one keeps that profile alive across a swap.
#[derive(Clone)]
pub struct StateRef {
    profile: Arc<Pdfa>,
    index: usize,
}

impl StateRef {
    fn new(profile: &Arc<Pdfa>, index: usize) -> Self {
        StateRef {
            profile: Arc::clone(profile),
            index,
        }
    }

    /// Index of the state in the profile it came from.
    pub fn index(&self) -> usize {
        self.index
    }
}

impl Deref for StateRef {
    type Target = State;

    fn deref(&self) -> &State {
        &self.profile.states()[self.index]
    }
}

impl PartialEq for StateRef {
    fn eq(&self, other: &Self) -> bool {
        **self == **other
    }
}

impl fmt::Debug for StateRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(&**self, f)
    }
}

impl Serialize for StateRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        (**self).serialize(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decision {
    pub verdict: Verdict,
    pub reason: Reason,
    pub guard: Option<GuardVerdict>,
    pub state_after: StateRef,
    /// Set when the block could not be written to the audit log.
    pub audit_degraded: bool,
}

impl Decision {
    pub fn allowed(&self) -> bool {
        self.verdict == Verdict::Allow
    }

    /// Reason code plus offending path, never guard internals.
    pub fn sanitized_detail(&self) -> Option<String> {
        let g = self.guard.as_ref().filter(|g| !g.pass)?;
        Some(match &g.offending_path {
            Some(p) => format!("{} at {p}", g.reason),
            None => g.reason.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionState {
    pub session_id: String,
    /// Index into the current profile's states.
    pub current: usize,
    pub calls_seen: u64,
    pub last_activity: u64,
    pub blocked_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GatewayConfig {
    pub session_capacity: usize,
    pub session_ttl_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            session_capacity: DEFAULT_SESSION_CAPACITY,
            session_ttl_ms: DEFAULT_SESSION_TTL_MS,
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("embedder dimension {embedder} does not match profile dimension {profile}")]
    DimensionMismatch { embedder: usize, profile: usize },
}

type SessionRef = Arc<Mutex<SessionState>>;

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Enforces one profile over many concurrent sessions.
pub struct Gateway {
    profile: RwLock<Arc<Pdfa>>,
    embedder: Arc<dyn Embedder>,
    sessions: Mutex<HashMap<String, SessionRef>>,
    audit: Mutex<AuditLog>,
    config: GatewayConfig,
}

impl Gateway {
    pub fn new(
        pdfa: Pdfa,
        embedder: Arc<dyn Embedder>,
        audit: AuditLog,
        config: GatewayConfig,
    ) -> Result<Self, GatewayError> {
        check_dimension(&pdfa, embedder.as_ref())?;
        Ok(Gateway {
            profile: RwLock::new(Arc::new(pdfa)),
            embedder,
            sessions: Mutex::new(HashMap::new()),
            audit: Mutex::new(audit),
            config,
        })
    }

    pub fn profile(&self) -> Arc<Pdfa> {
        self.profile.read().expect("profile lock poisoned").clone()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session table poisoned").len()
    }

    pub fn audit_len(&self) -> u64 {
        self.audit.lock().expect("audit lock poisoned").len()
    }

    pub fn session(&self, id: &str) -> Option<SessionState> {
        let table = self.sessions.lock().expect("session table poisoned");
        table.get(id).map(|s| s.lock().expect("session poisoned").clone())
    }

    /// Returns the session, creating it at the initial state if needed.
    /// `None` means the table is full even after evicting idle sessions.
    pub fn open_session(&self, id: &str, now: u64) -> Option<SessionState> {
        self.session_ref(id, now).map(|s| s.lock().expect("session poisoned").clone())
    }

    fn session_ref(&self, id: &str, now: u64) -> Option<SessionRef> {
        let mut table = self.sessions.lock().expect("session table poisoned");
        if let Some(s) = table.get(id) {
            return Some(s.clone());
        }
        if table.len() >= self.config.session_capacity {
            let ttl = self.config.session_ttl_ms;
            evict_idle(&mut table, ttl, now);
            if table.len() >= self.config.session_capacity {
                return None;
            }
        }
        let s = Arc::new(Mutex::new(SessionState {
            session_id: id.to_owned(),
            current: 0,
            calls_seen: 0,
            last_activity: now,
            blocked_count: 0,
        }));
        table.insert(id.to_owned(), s.clone());
        Some(s)
    }

    /// Removes sessions idle for longer than `ttl_ms`.
    pub fn expire_sessions(&self, ttl_ms: u64, now: u64) -> usize {
        assert!(ttl_ms > 0, "ttl must be positive");
        let mut table = self.sessions.lock().expect("session table poisoned");
        evict_idle(&mut table, ttl_ms, now)
    }

    pub fn evaluate(&self, session_id: &str, tool: &str, params: &FlatParams) -> Decision {
        self.evaluate_at(session_id, tool, params, now_ms())
    }

    /// Decides one call at time `now` (milliseconds).
    pub fn evaluate_at(&self, session_id: &str, tool: &str, params: &FlatParams, now: u64) -> Decision {
        // Held for the whole decision so a profile swap cannot interleave.
        let profile = self.profile.read().expect("profile lock poisoned");
        let pdfa: &Pdfa = &profile;
        let Some(session) = self.session_ref(session_id, now) else {
            let s0 = StateRef::new(&profile, pdfa.s0());
            let degraded = self.record_block(session_id, &s0, tool, params, now, Reason::SessionLimit, None);
            return Decision {
                verdict: Verdict::Block,
                reason: Reason::SessionLimit,
                guard: None,
                state_after: s0,
                audit_degraded: degraded,
            };
        };
        let mut sess = session.lock().expect("session poisoned");
        sess.calls_seen += 1;
        sess.last_activity = now;
        let cur = sess.current;

        // A successful step implies a known tool and a non-terminal state, so
        // the allow path needs a single lookup.
        let (reason, guard, next) = match pdfa.step(cur, tool) {
            Some(ei) => {
                let v = match pdfa.fast_check(ei, params) {
                    FastVerdict::Pass => GuardVerdict::ok(),
                    _ => check_guard(&pdfa.edges()[ei].schema, params, self.embedder.as_ref()),
                };
                if v.pass {
                    (Reason::Ok, Some(v), Some(pdfa.dst_of(ei)))
                } else {
                    (Reason::GuardFailure, Some(v), None)
                }
            }
            None if !pdfa.knows_tool(tool) => (Reason::UnknownTool, None, None),
            None if pdfa.is_terminal(cur) => (Reason::TerminalState, None, None),
            None => (Reason::NoTransition, None, None),
        };

        if let Some(dst) = next {
            sess.current = dst;
            return Decision {
                verdict: Verdict::Allow,
                reason,
                guard,
                state_after: StateRef::new(&profile, dst),
                audit_degraded: false,
            };
        }
        sess.blocked_count += 1;
        let state = StateRef::new(&profile, cur);
        let detail = guard
            .as_ref()
            .map(|g| format!("{}:{}", g.reason, g.offending_path.as_deref().unwrap_or("")));
        // The entry is durable before the decision is returned.
        let degraded = self.record_block(session_id, &state, tool, params, now, reason, detail);
        Decision {
            verdict: Verdict::Block,
            reason,
            guard,
            state_after: state,
            audit_degraded: degraded,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn record_block(
        &self,
        session_id: &str,
        state: &State,
        tool: &str,
        params: &FlatParams,
        now: u64,
        reason: Reason,
        detail: Option<String>,
    ) -> bool {
        let mut log = self.audit.lock().expect("audit lock poisoned");
        let entry = AuditEntry {
            index: log.len(),
            session_id: session_id.to_owned(),
            state: state.clone(),
            tool: tool.to_owned(),
            params: params.clone(),
            timestamp: now,
            reason: reason.as_str().to_owned(),
            detail,
        };
        match log.append(&entry) {
            Ok(_) => false,
            Err(e) => {
                warn!("audit append failed, decision still blocks: {e}");
                true
            }
        }
    }

    /// Atomically replaces the profile. Sessions keep their position when
    /// their current state exists in the new profile and reset otherwise.
    pub fn swap_profile(&self, new: Pdfa) -> Result<usize, GatewayError> {
        check_dimension(&new, self.embedder.as_ref())?;
        let mut slot = self.profile.write().expect("profile lock poisoned");
        let table = self.sessions.lock().expect("session table poisoned");
        let mut reset = 0;
        for s in table.values() {
            let mut s = s.lock().expect("session poisoned");
            match new.index_of(&slot.states()[s.current]) {
                Some(i) => s.current = i,
                None => {
                    info!(session = %s.session_id, "state missing from new profile; session reset");
                    s.current = 0;
                    reset += 1;
                }
            }
        }
        *slot = Arc::new(new);
        Ok(reset)
    }

    /// Handles one request line and returns the response line (without the
    /// trailing newline).
    pub fn handle_line(&self, line: &str) -> String {
        let response = match parse_request(line) {
            Ok((sid, tool, params)) => {
                let d = self.evaluate(&sid, &tool, &params);
                let mut r = json!({
                    "decision": if d.allowed() { "allow" } else { "block" },
                    "reason": d.reason.as_str(),
                });
                if let Some(detail) = d.sanitized_detail() {
                    r["detail"] = Value::String(detail);
                }
                r
            }
            Err(msg) => json!({"decision": "error", "reason": "bad_request", "detail": msg}),
        };
        response.to_string()
    }
}

fn check_dimension(p: &Pdfa, e: &dyn Embedder) -> Result<(), GatewayError> {
    if p.params().embedding_dim != e.dimension() {
        return Err(GatewayError::DimensionMismatch {
            embedder: e.dimension(),
            profile: p.params().embedding_dim,
        });
    }
    Ok(())
}

fn evict_idle(table: &mut HashMap<String, SessionRef>, ttl: u64, now: u64) -> usize {
    let before = table.len();
    table.retain(|_, s| {
        let s = s.lock().expect("session poisoned");
        now.saturating_sub(s.last_activity) <= ttl
    });
    before - table.len()
}

fn parse_request(line: &str) -> Result<(String, String, FlatParams), String> {
    let v: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = v.as_object().ok_or("request must be a JSON object")?;
    let sid = obj
        .get("session_id")
        .and_then(Value::as_str)
        .ok_or("session_id must be a string")?;
    let tool = obj
        .get("tool")
        .and_then(Value::as_str)
        .filter(|t| !t.is_empty())
        .ok_or("tool must be a non-empty string")?;
    let params = match obj.get("params") {
        None => serde_json::Map::new(),
        Some(Value::Object(m)) => m.clone(),
        Some(_) => return Err("params must be an object".into()),
    };
    validate_params(&params).map_err(|e| e.to_string())?;
    Ok((sid.to_owned(), tool.to_owned(), flatten_params(&params)))
}

/// A running socket service.
pub struct ServerHandle {
    path: PathBuf,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    /// Blocks until the accept loop exits.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = UnixStream::connect(&self.path);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        let _ = std::fs::remove_file(&self.path);
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_now();
        }
    }
}

/// Binds `socket` and serves NDJSON requests, one thread per connection.
/// Idle sessions are swept every `sweep` interval.
pub fn serve(gateway: Arc<Gateway>, socket: impl AsRef<Path>, sweep: Duration) -> io::Result<ServerHandle> {
    let path = socket.as_ref().to_path_buf();
    if path.exists() {
        std::fs::remove_file(&path)?;
    }
    let listener = UnixListener::bind(&path)?;
    let stop = Arc::new(AtomicBool::new(false));

    let sweeper = {
        let gw = gateway.clone();
        let stop = stop.clone();
        thread::spawn(move || {
            let tick = Duration::from_millis(100);
            let mut waited = Duration::ZERO;
            while !stop.load(Ordering::SeqCst) {
                thread::sleep(tick);
                waited += tick;
                if waited >= sweep {
                    waited = Duration::ZERO;
                    let n = gw.expire_sessions(gw.config.session_ttl_ms, now_ms());
                    if n > 0 {
                        info!(evicted = n, "expired idle sessions");
                    }
                }
            }
        })
    };

    let accept = {
        let stop = stop.clone();
        thread::spawn(move || {
            for conn in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                match conn {
                    Ok(stream) => {
                        let gw = gateway.clone();
                        thread::spawn(move || {
                            if let Err(e) = handle_connection(&gw, stream) {
                                warn!("connection ended with error: {e}");
                            }
                        });
                    }
                    Err(e) => warn!("accept failed: {e}"),
                }
            }
            let _ = sweeper.join();
        })
    };
    info!(socket = %path.display(), "gateway listening");
    Ok(ServerHandle {
        path,
        stop,
        accept: Some(accept),
    })
}

fn handle_connection(gw: &Gateway, stream: UnixStream) -> io::Result<()> {
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut resp = gw.handle_line(&line);
        resp.push('\n');
        writer.write_all(resp.as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

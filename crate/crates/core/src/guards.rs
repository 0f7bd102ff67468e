//! Parameter guards: synthesis from observed values and runtime checking.
//!
//! Each edge of the automaton carries a [`ParamSchema`] that maps every
//! dotted parameter path to one of three guard kinds: a widened numeric
//! interval, a cosine ball around a string-embedding centroid, or an exact
//! categorical set. Paths matched by the [`SensitivePolicy`] are always
//! categorical.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_distance, fnv1a64, Embedder, EmbeddingVector};
use crate::trace::{canonical_kind, FlatParams, Leaf, LeafKind};

pub const DEFAULT_CAT_MAX_CARD: usize = 5;
pub const DEFAULT_RESERVOIR_CAP: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("line {line}: pattern {pattern:?} uses unsupported glob syntax (only '*' is allowed)")]
    Unsupported { line: usize, pattern: String },
}

/// Glob patterns over dotted paths; `*` matches any run of characters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitivePolicy {
    patterns: Vec<String>,
}

impl SensitivePolicy {
    pub fn new<I, S>(patterns: I) -> Result<Self, PolicyError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut out = Vec::new();
        for (i, p) in patterns.into_iter().enumerate() {
            let p = p.into();
            if p.contains(['?', '[', ']', '{', '}']) || p.is_empty() {
                return Err(PolicyError::Unsupported {
                    line: i + 1,
                    pattern: p,
                });
            }
            out.push(p);
        }
        Ok(SensitivePolicy { patterns: out })
    }

    /// Parses a policy file: one glob per line, `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, PolicyError> {
        let mut patterns = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.contains(['?', '[', ']', '{', '}']) {
                return Err(PolicyError::Unsupported {
                    line: i + 1,
                    pattern: line.to_owned(),
                });
            }
            patterns.push(line.to_owned());
        }
        Ok(SensitivePolicy { patterns })
    }

    pub fn patterns(&self) -> &[String] {
        &self.patterns
    }

    pub fn matches(&self, path: &str) -> bool {
        self.patterns.iter().any(|p| glob_match(p, path))
    }
}

/// `*`-only wildcard match over the whole string.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p = pattern.as_bytes();
    let t = text.as_bytes();
    let (mut pi, mut ti) = (0usize, 0usize);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && p[pi] == b'*' {
            star = Some((pi, ti));
            pi += 1;
        } else if pi < p.len() && p[pi] == t[ti] {
            pi += 1;
            ti += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == b'*')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardKind {
    Numeric,
    String,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericInterval {
    pub lo: f64,
    pub hi: f64,
}

impl NumericInterval {
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StringBall {
    pub centroid: EmbeddingVector,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoricalSet {
    /// Canonical leaf renderings (see [`Leaf::canonical`]).
    pub values: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Guard {
    Numeric(NumericInterval),
    String(StringBall),
    Categorical(CategoricalSet),
}

impl Guard {
    pub fn kind(&self) -> GuardKind {
        match self {
            Guard::Numeric(_) => GuardKind::Numeric,
            Guard::String(_) => GuardKind::String,
            Guard::Categorical(_) => GuardKind::Categorical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSchema {
    pub guards: BTreeMap<String, Guard>,
    /// Paths present in every observation.
    pub required: BTreeSet<String>,
    /// Paths present in some but not all observations.
    pub optional: BTreeSet<String>,
}

impl ParamSchema {
    pub fn has_string_guard(&self) -> bool {
        self.guards.values().any(|g| matches!(g, Guard::String(_)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardReason {
    Ok,
    MissingParam,
    UnknownParam,
    NumericOutOfRange,
    StringOutOfBall,
    CategoricalMismatch,
    TypeMismatch,
}

impl GuardReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            GuardReason::Ok => "ok",
            GuardReason::MissingParam => "missing_param",
            GuardReason::UnknownParam => "unknown_param",
            GuardReason::NumericOutOfRange => "numeric_out_of_range",
            GuardReason::StringOutOfBall => "string_out_of_ball",
            GuardReason::CategoricalMismatch => "categorical_mismatch",
            GuardReason::TypeMismatch => "type_mismatch",
        }
    }
}

impl fmt::Display for GuardReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardVerdict {
    pub pass: bool,
    pub reason: GuardReason,
    pub offending_path: Option<String>,
}

impl GuardVerdict {
    pub fn ok() -> Self {
        GuardVerdict {
            pass: true,
            reason: GuardReason::Ok,
            offending_path: None,
        }
    }

    fn fail(reason: GuardReason, path: &str) -> Self {
        GuardVerdict {
            pass: false,
            reason,
            offending_path: Some(path.to_owned()),
        }
    }
}

/// Deterministic bounded sample of string observations.
///
/// Replacement slots come from a hash of (seed, arrival index, value), so the
/// sample depends only on the observation sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reservoir {
    pub cap: usize,
    pub seed: u64,
    pub seen: u64,
    pub items: Vec<String>,
}

impl Reservoir {
    pub fn new(cap: usize, seed: u64) -> Self {
        Reservoir {
            cap,
            seed,
            seen: 0,
            items: Vec::new(),
        }
    }

    pub fn push(&mut self, value: &str) {
        if self.items.len() < self.cap {
            self.items.push(value.to_owned());
        } else if self.cap > 0 {
            let mut key = self.seed.to_le_bytes().to_vec();
            key.extend_from_slice(&self.seen.to_le_bytes());
            key.extend_from_slice(value.as_bytes());
            let j = splitmix(fnv1a64(&key)) % (self.seen + 1);
            if (j as usize) < self.cap {
                self.items[j as usize] = value.to_owned();
            }
        }
        self.seen += 1;
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Raw observations of one parameter path on one edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathObservations {
    /// Number of edge observations in which the path was present.
    pub present: u64,
    pub kinds: BTreeSet<LeafKind>,
    pub num_min: Option<f64>,
    pub num_max: Option<f64>,
    pub num_count: u64,
    /// Every distinct value, canonically rendered.
    pub distinct: BTreeSet<String>,
    pub strings: Reservoir,
}

impl PathObservations {
    pub fn new(reservoir_cap: usize, seed: u64) -> Self {
        PathObservations {
            present: 0,
            kinds: BTreeSet::new(),
            num_min: None,
            num_max: None,
            num_count: 0,
            distinct: BTreeSet::new(),
            strings: Reservoir::new(reservoir_cap, seed),
        }
    }

    pub fn observe(&mut self, leaf: &Leaf) {
        self.present += 1;
        self.kinds.insert(leaf.kind());
        self.distinct.insert(leaf.canonical());
        match leaf {
            Leaf::Number(x) => {
                self.num_count += 1;
                self.num_min = Some(self.num_min.map_or(*x, |m| m.min(*x)));
                self.num_max = Some(self.num_max.map_or(*x, |m| m.max(*x)));
            }
            Leaf::Str(s) => self.strings.push(s),
            _ => {}
        }
    }

    fn distinct_strings(&self) -> Vec<String> {
        self.distinct
            .iter()
            .filter(|c| canonical_kind(c) == LeafKind::Str)
            .filter_map(|c| serde_json::from_str::<String>(c).ok())
            .collect()
    }
}

/// Observations of all parameter paths on one edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeObservations {
    pub count: u64,
    pub reservoir_cap: usize,
    pub seed: u64,
    pub paths: BTreeMap<String, PathObservations>,
}

impl EdgeObservations {
    pub fn new(reservoir_cap: usize, seed: u64) -> Self {
        EdgeObservations {
            count: 0,
            reservoir_cap,
            seed,
            paths: BTreeMap::new(),
        }
    }

    pub fn observe(&mut self, params: &FlatParams) {
        self.count += 1;
        for (path, leaf) in &params.entries {
            let (cap, seed) = (self.reservoir_cap, self.seed ^ fnv1a64(path.as_bytes()));
            self.paths
                .entry(path.clone())
                .or_insert_with(|| PathObservations::new(cap, seed))
                .observe(leaf);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub kind: GuardKind,
    pub warning: Option<String>,
}

/// Guard kind for an already-accumulated path.
pub fn classify_observations(
    path: &str,
    obs: &PathObservations,
    policy: &SensitivePolicy,
    cat_max_card: usize,
) -> Classification {
    let plain = |kind| Classification {
        kind,
        warning: None,
    };
    if policy.matches(path) {
        return plain(GuardKind::Categorical);
    }
    if obs.kinds.len() > 1 {
        return Classification {
            kind: GuardKind::Categorical,
            warning: Some(format!(
                "path {path:?} mixes value types {:?}; using exact-match categorical guard",
                obs.kinds
            )),
        };
    }
    match obs.kinds.iter().next() {
        Some(LeafKind::Number) => plain(GuardKind::Numeric),
        Some(LeafKind::Str) if obs.distinct.len() > cat_max_card => plain(GuardKind::String),
        _ => plain(GuardKind::Categorical),
    }
}

/// Guard kind for a path given its raw observed values.
pub fn classify_param(
    path: &str,
    observed_values: &[Leaf],
    policy: &SensitivePolicy,
    cat_max_card: usize,
) -> Classification {
    let mut obs = PathObservations::new(0, 0);
    for v in observed_values {
        obs.observe(v);
    }
    classify_observations(path, &obs, policy, cat_max_card)
}

pub fn synthesize_numeric(values: &[f64], eps_num: f64) -> NumericInterval {
    assert!(!values.is_empty(), "synthesize_numeric: no observations");
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    widen(min, max, eps_num)
}

fn widen(min: f64, max: f64, eps_num: f64) -> NumericInterval {
    NumericInterval {
        lo: min - eps_num * min.abs(),
        hi: max + eps_num * max.abs(),
    }
}

/// Centroid of the (multiplicity-weighted) sample, and radius covering every
/// value in `cover` plus `eps_str`.
fn string_ball(sample: &[String], cover: &[String], eps_str: f64, embedder: &dyn Embedder) -> StringBall {
    let d = embedder.dimension();
    // Sum in sorted order so the centroid does not depend on arrival order.
    let mut sorted: Vec<&String> = sample.iter().collect();
    sorted.sort();
    let mut sum = vec![0.0f64; d];
    for s in &sorted {
        for (acc, x) in sum.iter_mut().zip(embedder.embed(s).0) {
            *acc += x;
        }
    }
    let n = sorted.len().max(1) as f64;
    let mean = EmbeddingVector(sum.into_iter().map(|x| x / n).collect());
    let centroid = mean.normalized().to_f32_precision();
    let max_dist = cover
        .iter()
        .map(|s| cosine_distance(&embedder.embed(s), &centroid))
        .fold(0.0f64, f64::max);
    StringBall {
        centroid,
        radius: max_dist + eps_str,
    }
}

pub fn synthesize_string(values: &[String], eps_str: f64, embedder: &dyn Embedder) -> StringBall {
    assert!(!values.is_empty(), "synthesize_string: no observations");
    string_ball(values, values, eps_str, embedder)
}

pub fn synthesize_categorical(values: &[Leaf]) -> CategoricalSet {
    assert!(!values.is_empty(), "synthesize_categorical: no observations");
    CategoricalSet {
        values: values.iter().map(Leaf::canonical).collect(),
    }
}

/// Knobs that shape schema synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisParams<'a> {
    pub eps_num: f64,
    pub eps_str: f64,
    pub cat_max_card: usize,
    pub policy: &'a SensitivePolicy,
}

/// Builds the schema for one edge. Returns any mixed-type warnings.
pub fn synthesize_schema(
    obs: &EdgeObservations,
    params: &SynthesisParams<'_>,
    embedder: &dyn Embedder,
) -> (ParamSchema, Vec<String>) {
    let mut schema = ParamSchema::default();
    let mut warnings = Vec::new();
    for (path, p) in &obs.paths {
        if p.present == obs.count {
            schema.required.insert(path.clone());
        } else {
            schema.optional.insert(path.clone());
        }
        let class = classify_observations(path, p, params.policy, params.cat_max_card);
        if let Some(w) = class.warning {
            warnings.push(w);
        }
        let guard = match class.kind {
            GuardKind::Numeric => Guard::Numeric(widen(
                p.num_min.expect("numeric path without numbers"),
                p.num_max.expect("numeric path without numbers"),
                params.eps_num,
            )),
            GuardKind::String => Guard::String(string_ball(
                &p.strings.items,
                &p.distinct_strings(),
                params.eps_str,
                embedder,
            )),
            GuardKind::Categorical => Guard::Categorical(CategoricalSet {
                values: p.distinct.clone(),
            }),
        };
        schema.guards.insert(path.clone(), guard);
    }
    (schema, warnings)
}

fn check_value(guard: &Guard, leaf: &Leaf, embedder: &dyn Embedder) -> GuardReason {
    match (guard, leaf) {
        (Guard::Numeric(iv), Leaf::Number(x)) => {
            if iv.contains(*x) {
                GuardReason::Ok
            } else {
                GuardReason::NumericOutOfRange
            }
        }
        (Guard::Numeric(_), _) => GuardReason::TypeMismatch,
        (Guard::String(ball), Leaf::Str(s)) => {
            if ball.centroid.dimension() != embedder.dimension() {
                return GuardReason::StringOutOfBall;
            }
            if cosine_distance(&embedder.embed(s), &ball.centroid) <= ball.radius {
                GuardReason::Ok
            } else {
                GuardReason::StringOutOfBall
            }
        }
        (Guard::String(_), _) => GuardReason::TypeMismatch,
        (Guard::Categorical(set), leaf) => {
            let canon = leaf.canonical();
            if set.values.contains(&canon) {
                GuardReason::Ok
            } else if set.values.iter().any(|v| canonical_kind(v) == leaf.kind()) {
                GuardReason::CategoricalMismatch
            } else {
                GuardReason::TypeMismatch
            }
        }
    }
}

/// Evaluates `params` against `schema`.
///
/// Fail-fast in this order, each phase in lexicographic path order: missing
/// required paths, unknown paths, then per-path value checks.
pub fn check_guard(schema: &ParamSchema, params: &FlatParams, embedder: &dyn Embedder) -> GuardVerdict {
    if let Some(path) = schema.required.iter().find(|p| params.get(p).is_none()) {
        return GuardVerdict::fail(GuardReason::MissingParam, path);
    }
    if let Some(path) = params.entries.keys().find(|p| !schema.guards.contains_key(*p)) {
        return GuardVerdict::fail(GuardReason::UnknownParam, path);
    }
    for (path, leaf) in &params.entries {
        let reason = check_value(&schema.guards[path], leaf, embedder);
        if reason != GuardReason::Ok {
            return GuardVerdict::fail(reason, path);
        }
    }
    GuardVerdict::ok()
}

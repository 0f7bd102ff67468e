//! Corpus compilation into a parameterized DFA.
//!
//! A state is the pair (current tool, up to `w` preceding tool names). The
//! raw graph keeps full per-edge observations; pruning removes states with
//! too little support, and schemas are synthesized only for surviving edges.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fastpath::{FastVerdict, Runtime};
use crate::embedding::{fnv1a64, Embedder, EmbeddingVector, DEFAULT_DIMENSION};
use crate::guards::{
    synthesize_schema, EdgeObservations, ParamSchema, SensitivePolicy, SynthesisParams,
    DEFAULT_CAT_MAX_CARD, DEFAULT_RESERVOIR_CAP,
};
use crate::trace::{Corpus, FlatParams, ToolCallRecord};

/// `(tool, ctx)`; `tool == None` is the idle symbol of the initial state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct State {
    pub tool: Option<String>,
    pub ctx: Vec<String>,
}

impl State {
    pub fn initial() -> Self {
        State {
            tool: None,
            ctx: Vec::new(),
        }
    }

    pub fn new(tool: impl Into<String>, ctx: &[&str]) -> Self {
        State {
            tool: Some(tool.into()),
            ctx: ctx.iter().map(|s| (*s).to_owned()).collect(),
        }
    }

    pub fn is_initial(&self) -> bool {
        self.tool.is_none()
    }

    /// Context carried by any successor: the `w`-suffix of `ctx ++ [tool]`.
    pub fn successor_ctx(&self, w: usize) -> Vec<String> {
        match &self.tool {
            None => Vec::new(),
            Some(t) => {
                let mut hist: Vec<String> = self.ctx.clone();
                hist.push(t.clone());
                let skip = hist.len().saturating_sub(w);
                hist.split_off(skip)
            }
        }
    }

    pub fn successor(&self, tool: &str, w: usize) -> State {
        State {
            tool: Some(tool.to_owned()),
            ctx: self.successor_ctx(w),
        }
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, [{}])",
            self.tool.as_deref().unwrap_or("⊥"),
            self.ctx.join(", ")
        )
    }
}

pub type EdgeKey = (State, String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileParams {
    pub w: usize,
    pub theta: u64,
    pub eps_num: f64,
    pub eps_str: f64,
    pub cat_max_card: usize,
    pub sensitive: SensitivePolicy,
    pub reservoir_cap: usize,
    pub embedding_dim: usize,
}

impl Default for ProfileParams {
    fn default() -> Self {
        ProfileParams {
            w: 3,
            theta: 3,
            eps_num: 0.05,
            eps_str: 0.05,
            cat_max_card: DEFAULT_CAT_MAX_CARD,
            sensitive: SensitivePolicy::default(),
            reservoir_cap: DEFAULT_RESERVOIR_CAP,
            embedding_dim: DEFAULT_DIMENSION,
        }
    }
}

impl ProfileParams {
    pub fn validate(&self) -> Result<(), CompileError> {
        let bad = |m: &str| Err(CompileError::InvalidParams(m.to_owned()));
        if self.w < 1 {
            return bad("w must be >= 1");
        }
        if self.theta < 1 {
            return bad("theta must be >= 1");
        }
        if !(self.eps_num >= 0.0 && self.eps_num.is_finite()) {
            return bad("eps_num must be a finite value >= 0");
        }
        if !(self.eps_str >= 0.0 && self.eps_str.is_finite()) {
            return bad("eps_str must be a finite value >= 0");
        }
        if self.embedding_dim < 2 {
            return bad("embedding dimension must be >= 2");
        }
        Ok(())
    }

    pub(crate) fn synthesis(&self) -> SynthesisParams<'_> {
        SynthesisParams {
            eps_num: self.eps_num,
            eps_str: self.eps_str,
            cat_max_card: self.cat_max_card,
            policy: &self.sensitive,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CompileError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid profile parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum PdfaError {
    #[error("malformed automaton: {0}")]
    Malformed(String),
}

fn edge_seed(src: &State, tool: &str) -> u64 {
    let mut key = Vec::new();
    key.extend_from_slice(src.tool.as_deref().unwrap_or("").as_bytes());
    for c in &src.ctx {
        key.push(0x1f);
        key.extend_from_slice(c.as_bytes());
    }
    key.push(0x1e);
    key.extend_from_slice(tool.as_bytes());
    fnv1a64(&key)
}

/// Unpruned state graph with full per-edge observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawGraph {
    pub w: usize,
    pub reservoir_cap: usize,
    pub edges: BTreeMap<EdgeKey, EdgeObservations>,
    pub end_counts: BTreeMap<State, u64>,
}

impl RawGraph {
    pub fn new(w: usize, reservoir_cap: usize) -> Self {
        RawGraph {
            w,
            reservoir_cap,
            edges: BTreeMap::new(),
            end_counts: BTreeMap::new(),
        }
    }

    /// Walks one trace from the initial state, accumulating observations.
    /// Returns the edges traversed, in order.
    pub fn add_trace<'a, I>(&mut self, calls: I) -> Vec<EdgeKey>
    where
        I: IntoIterator<Item = (&'a str, FlatParams)>,
    {
        let mut cur = State::initial();
        let mut walked = Vec::new();
        for (tool, params) in calls {
            let key = (cur.clone(), tool.to_owned());
            let cap = self.reservoir_cap;
            self.edges
                .entry(key.clone())
                .or_insert_with(|| EdgeObservations::new(cap, edge_seed(&cur, tool)))
                .observe(&params);
            cur = cur.successor(tool, self.w);
            walked.push(key);
        }
        *self.end_counts.entry(cur).or_insert(0) += 1;
        walked
    }

    pub fn add_records(&mut self, calls: &[ToolCallRecord]) -> Vec<EdgeKey> {
        self.add_trace(calls.iter().map(|c| (c.tool.as_str(), c.flat_params())))
    }

    pub fn target(&self, key: &EdgeKey) -> State {
        key.0.successor(&key.1, self.w)
    }

    pub fn states(&self) -> BTreeSet<State> {
        let mut out = BTreeSet::new();
        out.insert(State::initial());
        for key in self.edges.keys() {
            out.insert(key.0.clone());
            out.insert(self.target(key));
        }
        out.extend(self.end_counts.keys().cloned());
        out
    }
}

pub fn abstract_and_extract(corpus: &Corpus, w: usize, reservoir_cap: usize) -> RawGraph {
    assert!(w >= 1, "w must be >= 1");
    let mut g = RawGraph::new(w, reservoir_cap);
    for t in &corpus.traces {
        g.add_records(&t.calls);
    }
    g
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct PruneOutcome {
    pub states: BTreeSet<State>,
    pub edges: BTreeSet<EdgeKey>,
    pub threshold_pruned: usize,
    pub unreachable_pruned: usize,
}

/// Threshold pruning to a fixpoint followed by one reachability pass.
///
/// Endpoints of `exempt` edges are never threshold-pruned.
pub fn prune(g: &RawGraph, theta: u64, exempt: &BTreeSet<EdgeKey>) -> PruneOutcome {
    let all = g.states();
    let s0 = State::initial();
    let mut support: HashMap<&State, u64> = HashMap::new();
    for (s, c) in &g.end_counts {
        *support.entry(s).or_insert(0) += c;
    }
    let targets: BTreeMap<&EdgeKey, State> = g.edges.keys().map(|k| (k, g.target(k))).collect();
    let mut incoming: HashMap<&State, Vec<&EdgeKey>> = HashMap::new();
    for (k, obs) in &g.edges {
        *support.entry(&k.0).or_insert(0) += obs.count;
        incoming.entry(&targets[k]).or_default().push(k);
    }
    let mut protected: BTreeSet<State> = BTreeSet::new();
    protected.insert(s0.clone());
    for k in exempt {
        protected.insert(k.0.clone());
        protected.insert(g.target(k));
    }

    let below = |s: &State, support: &HashMap<&State, u64>| {
        !protected.contains(s) && support.get(s).copied().unwrap_or(0) < theta
    };
    let mut alive: BTreeSet<&State> = all.iter().collect();
    let mut queue: VecDeque<&State> = all.iter().filter(|s| below(s, &support)).collect();
    let mut threshold_pruned = 0;
    while let Some(s) = queue.pop_front() {
        if !alive.remove(s) {
            continue;
        }
        threshold_pruned += 1;
        for k in incoming.get(s).map(Vec::as_slice).unwrap_or(&[]) {
            let p = &k.0;
            if p == s || !alive.contains(p) {
                continue;
            }
            let entry = support.get_mut(p).expect("source has support");
            *entry -= g.edges[*k].count;
            if below(p, &support) {
                queue.push_back(alive.get(p).copied().expect("alive"));
            }
        }
    }

    let mut out_edges: HashMap<&State, Vec<&EdgeKey>> = HashMap::new();
    for k in g.edges.keys() {
        if alive.contains(&k.0) && alive.contains(&targets[k]) {
            out_edges.entry(&k.0).or_default().push(k);
        }
    }
    let mut reached: BTreeSet<State> = BTreeSet::new();
    let mut edges: BTreeSet<EdgeKey> = BTreeSet::new();
    let mut frontier = VecDeque::from([s0.clone()]);
    reached.insert(s0);
    while let Some(s) = frontier.pop_front() {
        for k in out_edges.get(&s).map(Vec::as_slice).unwrap_or(&[]) {
            edges.insert((*k).clone());
            let t = targets[*k].clone();
            if reached.insert(t.clone()) {
                frontier.push_back(t);
            }
        }
    }
    let unreachable_pruned = alive.len() - reached.len();
    PruneOutcome {
        states: reached,
        edges,
        threshold_pruned,
        unreachable_pruned,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub tool: String,
    pub dst: usize,
    pub count: u64,
    pub schema: ParamSchema,
}

/// A compiled automaton. Immutable once built; states are kept sorted so the
/// initial state is always index 0.
#[derive(Debug, Clone)]
pub struct Pdfa {
    params: ProfileParams,
    vocab: BTreeSet<String>,
    states: Vec<State>,
    edges: Vec<Edge>,
    end_counts: BTreeMap<usize, u64>,
    digest_ref: Option<String>,
    index: HashMap<State, usize>,
    runtime: Runtime,
}

fn runtime_for(n_states: usize, vocab: &BTreeSet<String>, edges: &[Edge]) -> Runtime {
    Runtime::build(
        n_states,
        vocab,
        edges.iter().map(|e| (e.src, e.tool.as_str(), e.dst, &e.schema)),
    )
}

impl PartialEq for Pdfa {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
            && self.vocab == other.vocab
            && self.states == other.states
            && self.edges == other.edges
            && self.end_counts == other.end_counts
            && self.digest_ref == other.digest_ref
    }
}

impl Pdfa {
    /// Assembles an automaton, checking the structural invariants: sorted
    /// unique states with the initial state first, in-range indices, one edge
    /// per (state, tool), and the context rule on every edge.
    pub fn new(
        params: ProfileParams,
        vocab: BTreeSet<String>,
        states: Vec<State>,
        mut edges: Vec<Edge>,
        end_counts: BTreeMap<usize, u64>,
        digest_ref: Option<String>,
    ) -> Result<Pdfa, PdfaError> {
        let bad = |m: String| Err(PdfaError::Malformed(m));
        if states.first() != Some(&State::initial()) {
            return bad("initial state missing".into());
        }
        if states.windows(2).any(|w| w[0] >= w[1]) {
            return bad("states are not sorted and unique".into());
        }
        for s in &states[1..] {
            if s.tool.is_none() || s.ctx.len() > params.w {
                return bad(format!("state {s} is not a valid non-initial state"));
            }
        }
        edges.sort_by(|a, b| (a.src, &a.tool).cmp(&(b.src, &b.tool)));
        let mut seen_pairs = BTreeSet::new();
        for (i, e) in edges.iter().enumerate() {
            if e.src >= states.len() || e.dst >= states.len() {
                return bad(format!("edge {i} references a missing state"));
            }
            if !vocab.contains(&e.tool) {
                return bad(format!("edge tool {:?} is not in the vocabulary", e.tool));
            }
            if states[e.src].successor(&e.tool, params.w) != states[e.dst] {
                return bad(format!(
                    "edge {} -[{}]-> {} violates the context rule",
                    states[e.src], e.tool, states[e.dst]
                ));
            }
            if !seen_pairs.insert((e.src, e.tool.as_str())) {
                return bad(format!("two edges from {} on {}", states[e.src], e.tool));
            }
        }
        if let Some((&i, _)) = end_counts.iter().find(|(&i, _)| i >= states.len()) {
            return bad(format!("end count for missing state {i}"));
        }
        let index = states.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        let runtime = runtime_for(states.len(), &vocab, &edges);
        Ok(Pdfa {
            params,
            vocab,
            states,
            edges,
            end_counts,
            digest_ref,
            index,
            runtime,
        })
    }

    pub fn params(&self) -> &ProfileParams {
        &self.params
    }

    pub fn vocab(&self) -> &BTreeSet<String> {
        &self.vocab
    }

    /// Decides the guard of edge `e` without the embedder where possible.
    pub fn fast_check(&self, e: usize, params: &FlatParams) -> FastVerdict {
        self.runtime.check(e, params)
    }

    /// Target state index of edge `e`.
    pub fn dst_of(&self, e: usize) -> usize {
        self.runtime.dst(e)
    }

    /// Constant-time vocabulary membership.
    pub fn knows_tool(&self, tool: &str) -> bool {
        self.runtime.knows_tool(tool)
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn end_counts(&self) -> &BTreeMap<usize, u64> {
        &self.end_counts
    }

    pub fn digest_ref(&self) -> Option<&str> {
        self.digest_ref.as_deref()
    }

    pub fn s0(&self) -> usize {
        0
    }

    pub fn index_of(&self, s: &State) -> Option<usize> {
        self.index.get(s).copied()
    }

    /// Index of the edge leaving state `src` on `tool`.
    pub fn step(&self, src: usize, tool: &str) -> Option<usize> {
        self.runtime.step(src, tool)
    }

    pub fn out_degree(&self, src: usize) -> usize {
        self.runtime.range(src).len()
    }

    pub fn outgoing(&self, src: usize) -> impl Iterator<Item = &Edge> {
        self.edges[self.runtime.range(src)].iter()
    }

    pub fn is_terminal(&self, src: usize) -> bool {
        self.runtime.range(src).is_empty()
    }

    /// The unique successor of `s` on `tool`, ignoring parameters.
    ///
    /// Panics if `s` is not a state of this automaton.
    pub fn structural_successor(&self, s: &State, tool: &str) -> Option<&State> {
        let i = self
            .index_of(s)
            .unwrap_or_else(|| panic!("structural_successor: {s} is not in the automaton"));
        self.step(i, tool).map(|e| &self.states[self.edges[e].dst])
    }

    /// Walks a tool sequence from the initial state, ignoring parameters.
    pub fn accepts_tools<S: AsRef<str>>(&self, tools: &[S]) -> bool {
        let mut cur = 0;
        for t in tools {
            match self.step(cur, t.as_ref()) {
                Some(e) => cur = self.edges[e].dst,
                None => return false,
            }
        }
        true
    }

    pub fn support(&self, s: usize) -> u64 {
        self.outgoing(s).map(|e| e.count).sum::<u64>() + self.end_counts.get(&s).copied().unwrap_or(0)
    }

    /// Reachability and threshold violations. States touched by `exempt`
    /// edges are not held to the threshold.
    pub fn invariant_violations(&self, exempt: &BTreeSet<EdgeKey>) -> Vec<String> {
        let mut v = Vec::new();
        let mut seen = vec![false; self.states.len()];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(s) = stack.pop() {
            for e in self.outgoing(s) {
                if !seen[e.dst] {
                    seen[e.dst] = true;
                    stack.push(e.dst);
                }
            }
        }
        let mut protected = BTreeSet::new();
        for (s, t) in exempt {
            protected.insert(s.clone());
            protected.insert(s.successor(t, self.params.w));
        }
        for (i, s) in self.states.iter().enumerate().skip(1) {
            if !seen[i] {
                v.push(format!("{s} is unreachable"));
            }
            if !protected.contains(s) && self.support(i) < self.params.theta {
                v.push(format!("{s} has support {} < {}", self.support(i), self.params.theta));
            }
        }
        v
    }

    pub fn edge_key(&self, e: &Edge) -> EdgeKey {
        (self.states[e.src].clone(), e.tool.clone())
    }
}

/// Builds automata directly from edges, bypassing corpus compilation.
#[derive(Debug, Clone, Default)]
pub struct PdfaBuilder {
    params: ProfileParams,
    vocab: BTreeSet<String>,
    edges: BTreeMap<EdgeKey, (u64, ParamSchema)>,
    end_counts: BTreeMap<State, u64>,
}

impl PdfaBuilder {
    pub fn new(params: ProfileParams) -> Self {
        PdfaBuilder {
            params,
            ..Default::default()
        }
    }

    pub fn vocab<I, S>(mut self, tools: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.vocab.extend(tools.into_iter().map(Into::into));
        self
    }

    /// Adds (or replaces) the edge `src -[tool]->` and returns its target.
    pub fn add_edge(&mut self, src: &State, tool: &str, schema: ParamSchema, count: u64) -> State {
        self.vocab.insert(tool.to_owned());
        self.edges.insert((src.clone(), tool.to_owned()), (count, schema));
        src.successor(tool, self.params.w)
    }

    pub fn end_count(&mut self, s: &State, count: u64) {
        self.end_counts.insert(s.clone(), count);
    }

    pub fn build(self) -> Result<Pdfa, PdfaError> {
        let w = self.params.w;
        let mut set: BTreeSet<State> = BTreeSet::new();
        set.insert(State::initial());
        for (s, t) in self.edges.keys() {
            set.insert(s.clone());
            set.insert(s.successor(t, w));
        }
        set.extend(self.end_counts.keys().cloned());
        let states: Vec<State> = set.into_iter().collect();
        let idx: HashMap<&State, usize> = states.iter().enumerate().map(|(i, s)| (s, i)).collect();
        let edges = self
            .edges
            .iter()
            .map(|((s, t), (count, schema))| Edge {
                src: idx[s],
                tool: t.clone(),
                dst: idx[&s.successor(t, w)],
                count: *count,
                schema: schema.clone(),
            })
            .collect();
        let end_counts = self.end_counts.iter().map(|(s, c)| (idx[s], *c)).collect();
        Pdfa::new(self.params, self.vocab, states, edges, end_counts, None)
    }
}

/// Raw observations retained alongside a profile for incremental updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Digests {
    pub raw: RawGraph,
    /// Edges exempt from the support threshold (human-approved).
    pub exempt: BTreeSet<EdgeKey>,
    /// Review-queue ids already merged into `raw`.
    pub applied: BTreeSet<u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct CompileReport {
    pub traces: usize,
    pub calls: usize,
    pub raw_states: usize,
    pub raw_edges: usize,
    pub states: usize,
    pub edges: usize,
    pub threshold_pruned: usize,
    pub unreachable_pruned: usize,
    pub string_edges: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Compiled {
    pub pdfa: Pdfa,
    pub digests: Digests,
    pub report: CompileReport,
}

/// Memoizes embeddings for the duration of one compilation.
struct MemoEmbedder<'a> {
    inner: &'a dyn Embedder,
    memo: Mutex<HashMap<String, EmbeddingVector>>,
}

impl Embedder for MemoEmbedder<'_> {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed(&self, text: &str) -> EmbeddingVector {
        if let Some(v) = self.memo.lock().expect("memo poisoned").get(text) {
            return v.clone();
        }
        let v = self.inner.embed(text);
        self.memo
            .lock()
            .expect("memo poisoned")
            .insert(text.to_owned(), v.clone());
        v
    }
}

/// Prunes `raw`, synthesizes schemas for surviving edges, and builds the
/// automaton. `reuse` may supply an existing schema for an edge, skipping
/// synthesis.
pub(crate) fn assemble(
    raw: &RawGraph,
    exempt: &BTreeSet<EdgeKey>,
    params: &ProfileParams,
    vocab: BTreeSet<String>,
    embedder: &dyn Embedder,
    reuse: &(dyn Fn(&EdgeKey) -> Option<ParamSchema> + Sync),
) -> Result<(Pdfa, CompileReport), CompileError> {
    let outcome = prune(raw, params.theta, exempt);
    let states: Vec<State> = outcome.states.iter().cloned().collect();
    let idx: HashMap<&State, usize> = states.iter().enumerate().map(|(i, s)| (s, i)).collect();
    let memo = MemoEmbedder {
        inner: embedder,
        memo: Mutex::new(HashMap::new()),
    };
    let keys: Vec<&EdgeKey> = outcome.edges.iter().collect();
    let synthesis = params.synthesis();
    let built: Vec<(Edge, Vec<String>)> = keys
        .par_iter()
        .map(|k| {
            let obs = &raw.edges[*k];
            let (schema, warnings) = match reuse(k) {
                Some(s) => (s, Vec::new()),
                None => synthesize_schema(obs, &synthesis, &memo),
            };
            let edge = Edge {
                src: idx[&k.0],
                tool: k.1.clone(),
                dst: idx[&raw.target(k)],
                count: obs.count,
                schema,
            };
            (edge, warnings)
        })
        .collect();
    let mut warnings = Vec::new();
    let mut edges = Vec::with_capacity(built.len());
    for (e, w) in built {
        warnings.extend(w.into_iter().map(|m| format!("{} on {}: {m}", states[e.src], e.tool)));
        edges.push(e);
    }
    let end_counts: BTreeMap<usize, u64> = raw
        .end_counts
        .iter()
        .filter_map(|(s, c)| idx.get(s).map(|&i| (i, *c)))
        .collect();
    let report = CompileReport {
        raw_states: raw.states().len(),
        raw_edges: raw.edges.len(),
        states: states.len(),
        edges: edges.len(),
        threshold_pruned: outcome.threshold_pruned,
        unreachable_pruned: outcome.unreachable_pruned,
        string_edges: edges.iter().filter(|e| e.schema.has_string_guard()).count(),
        warnings,
        ..Default::default()
    };
    let pdfa = Pdfa::new(params.clone(), vocab, states, edges, end_counts, None)
        .map_err(|e| CompileError::InvalidParams(e.to_string()))?;
    Ok((pdfa, report))
}

/// Compiles `corpus` with the given exempt edge set. With an empty set this
/// is [`compile_profile`].
pub fn compile_with_exemptions(
    corpus: &Corpus,
    params: &ProfileParams,
    embedder: &dyn Embedder,
    exempt: &BTreeSet<EdgeKey>,
) -> Result<Compiled, CompileError> {
    params.validate()?;
    if corpus.is_empty() {
        return Err(CompileError::EmptyCorpus);
    }
    if embedder.dimension() != params.embedding_dim {
        return Err(CompileError::InvalidParams(format!(
            "embedder dimension {} does not match embedding_dim {}",
            embedder.dimension(),
            params.embedding_dim
        )));
    }
    let raw = abstract_and_extract(corpus, params.w, params.reservoir_cap);
    let (pdfa, mut report) = assemble(&raw, exempt, params, corpus.vocabulary.clone(), embedder, &|_| None)?;
    report.traces = corpus.len();
    report.calls = corpus.call_count();
    let digests = Digests {
        raw,
        exempt: exempt.clone(),
        applied: BTreeSet::new(),
    };
    let pdfa = pdfa.with_digest_ref(Some(crate::store::digests_fingerprint(&digests)));
    Ok(Compiled {
        pdfa,
        digests,
        report,
    })
}

pub fn compile_profile(
    corpus: &Corpus,
    params: &ProfileParams,
    embedder: &dyn Embedder,
) -> Result<Compiled, CompileError> {
    compile_with_exemptions(corpus, params, embedder, &BTreeSet::new())
}

impl Pdfa {
    pub(crate) fn with_digest_ref(mut self, r: Option<String>) -> Self {
        self.digest_ref = r;
        self
    }

    /// Replaces the schemas of the given edges (by index).
    pub(crate) fn with_schemas(mut self, schemas: Vec<(usize, ParamSchema)>) -> Self {
        for (i, s) in schemas {
            self.edges[i].schema = s;
        }
        self.runtime = runtime_for(self.states.len(), &self.vocab, &self.edges);
        self
    }
}

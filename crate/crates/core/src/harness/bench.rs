use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::audit::AuditLog;
use crate::embedding::ReferenceEmbedder;
use crate::gateway::{Gateway, GatewayConfig};
use crate::guards::{CategoricalSet, Guard, NumericInterval, ParamSchema};
use crate::profiler::{Pdfa, PdfaBuilder, ProfileParams, State};
use crate::trace::{FlatParams, Leaf};

const BATCH: usize = 100;
const SESSIONS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub states: usize,
    pub edges: usize,
    pub tools: usize,
    pub calls: usize,
    /// Calls that were not allowed. Always zero for a valid stream.
    pub blocked: usize,
    pub median_ns: f64,
    pub p95_ns: f64,
    pub tps: f64,
}

fn bench_schema() -> ParamSchema {
    let mut s = ParamSchema::default();
    s.guards.insert(
        "amount".into(),
        Guard::Numeric(NumericInterval { lo: 0.0, hi: 1000.0 }),
    );
    s.guards.insert(
        "mode".into(),
        Guard::Categorical(CategoricalSet {
            values: ["\"a\"".to_owned(), "\"b\"".to_owned()].into(),
        }),
    );
    s.required = ["amount".to_owned(), "mode".to_owned()].into();
    s
}

/// A synthetic automaton with exactly `n_states` reachable states (n >= 2).
///
/// With a one-call context window, states other than the two initial ones
/// correspond to edges of a random strongly connected tool graph, so every
/// state past the first call has an outgoing transition.
pub fn synthetic_profile(n_states: usize, seed: u64) -> Pdfa {
    assert!(n_states >= 2, "need at least two states");
    let params = ProfileParams {
        w: 1,
        ..ProfileParams::default()
    };
    let e = n_states - 2;
    // Enough tools that the graph fits (t*t >= e) with mean out-degree near 4.
    let t = ((e as f64).sqrt().ceil() as usize).max(e.div_ceil(4)).max(1);
    let tools: Vec<String> = (0..t).map(|i| format!("tool_{i:03}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graph: BTreeSet<(usize, usize)> = BTreeSet::new();
    if e > 0 {
        graph.extend((0..t).map(|i| (i, (i + 1) % t)));
        let mut rest: Vec<(usize, usize)> = (0..t)
            .flat_map(|a| (0..t).map(move |b| (a, b)))
            .filter(|p| !graph.contains(p))
            .collect();
        rest.shuffle(&mut rng);
        graph.extend(rest.into_iter().take(e - t));
    }
    let schema = bench_schema();
    let mut b = PdfaBuilder::new(params).vocab(tools.iter().cloned());
    let first = b.add_edge(&State::initial(), &tools[0], schema.clone(), 1);
    let mut succ = vec![Vec::new(); t];
    let mut with_tool = vec![Vec::new(); t];
    with_tool[0].push(first);
    for &(a, c) in &graph {
        succ[a].push(c);
        with_tool[c].push(State::new(&tools[c], &[tools[a].as_str()]));
    }
    for (a, states) in with_tool.iter().enumerate() {
        for s in states {
            for &c in &succ[a] {
                b.add_edge(s, &tools[c], schema.clone(), 1);
            }
        }
    }
    b.build().expect("synthetic automaton is well formed")
}

/// Measures per-call decision latency over seeded valid call streams on
/// synthetic automata of each requested size. Batches of the different sizes
/// are interleaved so background load affects every size alike.
pub fn bench_throughput(sizes: &[usize], calls: usize, seed: u64) -> Vec<BenchRow> {
    let calls = calls.max(BATCH);
    let mut runs: Vec<Run> = sizes.iter().map(|&n| Run::new(n, calls, seed)).collect();
    for r in &mut runs {
        r.warm_up();
    }
    let batches = calls.div_ceil(BATCH);
    for b in 0..batches {
        for r in &mut runs {
            r.timed_batch(b);
        }
    }
    runs.into_iter().map(Run::finish).collect()
}

struct Run {
    gw: Gateway,
    stream: Vec<(String, String, FlatParams)>,
    warmup: usize,
    states: usize,
    edges: usize,
    tools: usize,
    blocked: usize,
    per_call: Vec<f64>,
    elapsed: f64,
}

impl Run {
    fn new(n: usize, calls: usize, seed: u64) -> Run {
        let pdfa = synthetic_profile(n, seed);
        let tools_at: Vec<Vec<String>> = (0..pdfa.states().len())
            .map(|s| pdfa.outgoing(s).map(|e| e.tool.clone()).collect())
            .collect();
        let warmup = (calls / 10).min(10_000);
        let total = warmup + calls;

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbe4c);
        let mut cursors: Vec<(String, usize)> = (0..SESSIONS).map(|i| (format!("s{i}"), 0)).collect();
        let mut fresh = SESSIONS;
        let mut stream = Vec::with_capacity(total);
        for i in 0..total {
            let cur = &mut cursors[i % SESSIONS];
            if tools_at[cur.1].is_empty() {
                *cur = (format!("s{fresh}"), 0);
                fresh += 1;
            }
            let tool = tools_at[cur.1].choose(&mut rng).expect("non-terminal").clone();
            let mut p = FlatParams::default();
            p.insert("amount", Leaf::Number(rng.gen_range(0..=1000) as f64));
            p.insert("mode", Leaf::Str(if rng.gen() { "a" } else { "b" }.into()));
            cur.1 = pdfa.edges()[pdfa.step(cur.1, &tool).expect("edge exists")].dst;
            stream.push((cur.0.clone(), tool, p));
        }

        let (states, edges, tools) = (pdfa.states().len(), pdfa.edges().len(), pdfa.vocab().len());
        let emb = Arc::new(ReferenceEmbedder::new(pdfa.params().embedding_dim));
        let config = GatewayConfig {
            session_capacity: fresh + 1,
            ..GatewayConfig::default()
        };
        let gw = Gateway::new(pdfa, emb, AuditLog::discard(), config).expect("dimension matches");
        Run {
            gw,
            stream,
            warmup,
            states,
            edges,
            tools,
            blocked: 0,
            per_call: Vec::with_capacity(calls / BATCH + 1),
            elapsed: 0.0,
        }
    }

    fn warm_up(&mut self) {
        for (sid, tool, p) in &self.stream[..self.warmup] {
            self.blocked += !self.gw.evaluate_at(sid, tool, p, 0).allowed() as usize;
        }
    }

    fn timed_batch(&mut self, b: usize) {
        let from = self.warmup + b * BATCH;
        let to = (from + BATCH).min(self.stream.len());
        if from >= to {
            return;
        }
        let t = Instant::now();
        for (sid, tool, p) in &self.stream[from..to] {
            self.blocked += !self.gw.evaluate_at(sid, tool, p, 0).allowed() as usize;
        }
        let dt = t.elapsed();
        self.elapsed += dt.as_secs_f64();
        self.per_call.push(dt.as_nanos() as f64 / (to - from) as f64);
    }

    fn finish(mut self) -> BenchRow {
        let calls = self.stream.len() - self.warmup;
        self.per_call.sort_by(f64::total_cmp);
        BenchRow {
            states: self.states,
            edges: self.edges,
            tools: self.tools,
            calls,
            blocked: self.blocked,
            median_ns: percentile(&self.per_call, 0.5),
            p95_ns: percentile(&self.per_call, 0.95),
            tps: calls as f64 / self.elapsed.max(f64::MIN_POSITIVE),
        }
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

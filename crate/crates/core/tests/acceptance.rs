//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

// `ensure!` negates its condition on purpose: a NaN comparison must fail.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use proptest::prelude::{any, prop, Just, Strategy};
use proptest::{prop_assert, prop_assume, prop_oneof};
use proptest::test_runner::{Config, TestRunner};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use praetor_core::audit::{verify, AuditEntry, AuditLog, Verification};
use praetor_core::embedding::{Embedder, ReferenceEmbedder};
use praetor_core::guards::{
    check_guard, synthesize_numeric, synthesize_schema, EdgeObservations, NumericInterval,
    SensitivePolicy, SynthesisParams,
};
use praetor_core::harness::{
    bench_throughput, corpus_calls, generate_benign, generate_context_sequential, generate_from,
    graybox, run_campaign, splice_exfiltration, CampaignMode, GrayboxConfig, Scenario, ValueGen,
};
use praetor_core::profiler::{
    compile_profile, compile_with_exemptions, EdgeKey, Pdfa, PdfaBuilder, ProfileParams, State,
};
use praetor_core::store::{enumerate_paths, resolved_edge_records, serialize, DEFAULT_EXPANSION_BUDGET};
use praetor_core::trace::{Corpus, FlatParams, Leaf, ToolCallRecord, Trace};
use praetor_core::updates::incremental_recompile;

const SEED: u64 = 20240417;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("context-sequential blocking", c1_context_sequential),
        ("spliced exfiltration decomposition", c2_splice),
        ("replay closure and BTFR floor", c3_replay_closure),
        ("path density arithmetic", c4_density),
        ("guard formula exactness", c5_guards),
        ("determinism and prune fixpoint", c6_determinism),
        ("audit tamper evidence", c7_audit),
        ("scale independence", c8_scale),
        ("incremental update equivalence", c9_updates),
        ("gray-box monotonicity", c10_graybox),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let res = panic::catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(&p))));
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS  criterion {:>2}  {name}: {detail} ({secs:.2}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL  criterion {:>2}  {name}: {why} ({secs:.2}s)", i + 1);
            }
        }
    }
    let _ = panic::take_hook();
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

struct Setup {
    scenario: Scenario,
    params: ProfileParams,
    embedder: Arc<dyn Embedder>,
}

fn customer_service() -> Setup {
    let scenario = Scenario::builtin("customer-service").expect("built-in scenario");
    let params = ProfileParams {
        sensitive: scenario.policy(),
        ..ProfileParams::default()
    };
    let embedder: Arc<dyn Embedder> = Arc::new(ReferenceEmbedder::new(params.embedding_dim));
    Setup {
        scenario,
        params,
        embedder,
    }
}

fn c1_context_sequential() -> Outcome {
    let t = Instant::now();
    let s = customer_service();
    ensure!(
        (s.params.w, s.params.theta, s.params.eps_num, s.params.eps_str) == (3, 3, 0.05, 0.05),
        "defaults drifted: {:?}",
        s.params
    );
    let sample = generate_benign(&s.scenario, 400, SEED);
    let compiled = compile_profile(&sample.corpus, &s.params, s.embedder.as_ref()).map_err(|e| e.to_string())?;
    let attacks = generate_context_sequential(&s.scenario, 200, SEED + 1);
    let r = run_campaign(&compiled.pdfa, s.embedder.clone(), &attacks, CampaignMode::Attack);
    let elapsed = t.elapsed();
    ensure!(r.attempts == 200, "ran {} attacks", r.attempts);
    ensure!(r.executed == 0, "{} attacks executed: {:?}", r.executed, r.reasons);
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!("executed 0/200, blocks {:?}", r.reasons))
}

fn pools_disjoint(s: &Scenario) -> bool {
    s.attack.iter().all(|(tool, gens)| {
        gens.iter().all(|(path, g)| match (g, s.params.get(tool).and_then(|b| b.get(path))) {
            (ValueGen::Choice { pool }, Some(ValueGen::Choice { pool: benign })) => {
                pool.iter().all(|v| !benign.contains(v))
            }
            _ => true,
        })
    })
}

fn c2_splice() -> Outcome {
    let t = Instant::now();
    let s = customer_service();
    ensure!(pools_disjoint(&s.scenario), "payload pools overlap benign pools");
    let sample = generate_benign(&s.scenario, 400, SEED);
    let compiled = compile_profile(&sample.corpus, &s.params, s.embedder.as_ref()).map_err(|e| e.to_string())?;
    let targets: Vec<String> = s.scenario.attack.keys().cloned().collect();
    let attacks = splice_exfiltration(&s.scenario, &sample.corpus, &targets, 1000, SEED + 2);
    let r = run_campaign(&compiled.pdfa, s.embedder.clone(), &attacks, CampaignMode::Attack);
    let elapsed = t.elapsed();
    let rejected_structurally = r.vocab_blocks + r.contextual_blocks;
    ensure!(
        r.structural_matches + rejected_structurally == 1000,
        "{} structural + {} structural blocks != 1000",
        r.structural_matches,
        rejected_structurally
    );
    ensure!(r.executed == 0, "{} of {} structural matches executed", r.executed, r.structural_matches);
    ensure!(r.guard_blocks == r.structural_matches, "guard blocks {} != matches", r.guard_blocks);
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "{} structural matches ({:.1}%), {} vocabulary + {} contextual blocks, 0 executed",
        r.structural_matches,
        r.structural_matches as f64 / 10.0,
        r.vocab_blocks,
        r.contextual_blocks
    ))
}

fn c3_replay_closure() -> Outcome {
    let s = customer_service();
    let theta = s.params.theta as usize;
    let sample = generate_benign(&s.scenario, 400, SEED);
    let compiled = compile_profile(&sample.corpus, &s.params, s.embedder.as_ref()).map_err(|e| e.to_string())?;
    let counts = sample.template_counts();
    let frequent: BTreeSet<String> = counts.iter().filter(|(_, &c)| c >= theta).map(|(t, _)| t.clone()).collect();
    let rare: BTreeSet<String> = s
        .scenario
        .templates
        .iter()
        .map(|t| t.name.clone())
        .filter(|t| !frequent.contains(t))
        .collect();

    let replay: Vec<Trace> = sample
        .corpus
        .traces
        .iter()
        .zip(&sample.templates)
        .filter(|(_, t)| frequent.contains(*t))
        .map(|(tr, _)| tr.clone())
        .collect();
    let replay_corpus = Corpus::from_traces(replay);
    let train = run_campaign(&compiled.pdfa, s.embedder.clone(), &corpus_calls(&replay_corpus), CampaignMode::Benign);

    let held = generate_from(&s.scenario, 200, SEED + 3, |t| frequent.contains(&t.name));
    let held_r = run_campaign(&compiled.pdfa, s.embedder.clone(), &corpus_calls(&held.corpus), CampaignMode::Benign);

    ensure!(!rare.is_empty(), "seed produced no long-tail template");
    let tail = generate_from(&s.scenario, 20, SEED + 4, |t| rare.contains(&t.name));
    let tail_r = run_campaign(&compiled.pdfa, s.embedder.clone(), &corpus_calls(&tail.corpus), CampaignMode::Benign);

    // Frozen for SEED: template draws out of 400 training traces.
    let expected: BTreeMap<String, usize> = [
        ("db-escalate", 1),
        ("lookup", 101),
        ("resolve", 190),
        ("retry-escalate", 108),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_owned(), v))
    .collect();
    ensure!(counts == expected, "template counts changed: {counts:?}");
    ensure!(train.attempts == 399 && train.blocked() == 0, "training replay: {:?}", train);
    ensure!(held_r.attempts == 200 && held_r.blocked() == 0, "held-out BTFR {}: {:?}", held_r.btfr(), held_r.reasons);
    ensure!(tail_r.attempts == 20 && tail_r.blocked() == 20, "long tail: {:?}", tail_r);
    Ok(format!(
        "train 0/{} blocked, held-out 0/{} blocked, long-tail {}/{} blocked {:?}",
        train.attempts, held_r.attempts, tail_r.blocked(), tail_r.attempts, tail_r.reasons
    ))
}

fn c4_density() -> Outcome {
    let tools: Vec<String> = (0..15).map(|i| format!("t{i:02}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut seqs: BTreeSet<Vec<usize>> = BTreeSet::new();
    while seqs.len() < 142 {
        seqs.insert((0..5).map(|_| rng.gen_range(0..15)).collect());
    }
    let params = ProfileParams {
        w: 5,
        ..ProfileParams::default()
    };
    let mut b = PdfaBuilder::new(params).vocab(tools.iter().cloned());
    for seq in &seqs {
        let mut cur = State::initial();
        for &t in seq {
            cur = b.add_edge(&cur, &tools[t], Default::default(), 3);
        }
    }
    let p = b.build().map_err(|e| e.to_string())?;

    // Independent count: walk every one of the 15^5 sequences.
    let mut brute = 0u64;
    for code in 0..15u32.pow(5) {
        let seq: Vec<&str> = (0..5).map(|d| tools[(code / 15u32.pow(d) % 15) as usize].as_str()).collect();
        brute += p.accepts_tools(&seq) as u64;
    }
    let stats = enumerate_paths(&p, 5, None, DEFAULT_EXPANSION_BUDGET).map_err(|e| e.to_string())?;
    let rho = 142.0 / 759_375.0;
    ensure!(brute == 142, "brute-force count {brute}");
    ensure!(stats.total_paths == 142 && stats.vocab_size == 15, "{stats:?}");
    ensure!((stats.density - rho).abs() <= 1e-9, "density {} vs {rho}", stats.density);
    Ok(format!("142 paths over |T|=15, density {:.4e}", stats.density))
}

fn flat(pairs: &[(&str, Leaf)]) -> FlatParams {
    let mut f = FlatParams::default();
    for (k, v) in pairs {
        f.insert(*k, v.clone());
    }
    f
}

fn leaf_strategy() -> impl Strategy<Value = Leaf> {
    prop_oneof![
        (-1e6f64..1e6).prop_map(Leaf::Number),
        (-50i32..50).prop_map(|n| Leaf::Number(n as f64)),
        any::<bool>().prop_map(Leaf::Bool),
        "[a-e]{1,3}( [a-e]{1,4}){0,3}".prop_map(Leaf::Str),
        Just(Leaf::Json("[]".into())),
    ]
}

fn c5_guards() -> Outcome {
    let close = |a: NumericInterval, lo: f64, hi: f64| (a.lo - lo).abs() < 1e-12 && (a.hi - hi).abs() < 1e-12;
    let a = synthesize_numeric(&[10.0, 20.0], 0.05);
    ensure!(close(a, 9.5, 21.0), "[10,20] -> {a:?}");
    let b = synthesize_numeric(&[-10.0, 20.0], 0.05);
    ensure!(close(b, -10.5, 21.0), "[-10,20] -> {b:?}");

    let emb = ReferenceEmbedder::new(32);
    let none = SensitivePolicy::default();
    let paths = ["a", "b.c", "b.d", "e_path"];
    let obs_strategy = prop::collection::vec(
        prop::collection::btree_map(prop::sample::select(paths.to_vec()), leaf_strategy(), 0..4),
        1..12,
    );

    let mut runner = TestRunner::new(Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&(obs_strategy, 0.0f64..0.3, 1usize..8, 1usize..6), |(rows, eps, card, cap)| {
            let mut obs = EdgeObservations::new(cap, 7);
            let rows: Vec<FlatParams> = rows
                .iter()
                .map(|r| flat(&r.iter().map(|(k, v)| (*k, v.clone())).collect::<Vec<_>>()))
                .collect();
            for r in &rows {
                obs.observe(r);
            }
            let sp = SynthesisParams {
                eps_num: eps,
                eps_str: eps,
                cat_max_card: card,
                policy: &none,
            };
            let (schema, _) = synthesize_schema(&obs, &sp, &emb);
            for r in &rows {
                let v = check_guard(&schema, r, &emb);
                prop_assert!(v.pass, "observation {:?} rejected: {:?}", r, v);
            }
            Ok(())
        })
        .map_err(|e| format!("soundness: {e}"))?;

    let policy = SensitivePolicy::new(["*_path", "to"]).map_err(|e| e.to_string())?;
    let mut runner = TestRunner::new(Config {
        cases: 2_000,
        failure_persistence: None,
        ..Config::default()
    });
    let sensitive_case = (
        prop::collection::vec(prop::sample::select(vec!["to", "dest_path"]), 1..2),
        prop::collection::vec(leaf_strategy(), 1..20),
        leaf_strategy(),
    );
    runner
        .run(&sensitive_case, |(names, observed, probe)| {
            let path = names[0];
            let seen: BTreeSet<String> = observed.iter().map(Leaf::canonical).collect();
            prop_assume!(!seen.contains(&probe.canonical()));
            let mut obs = EdgeObservations::new(4, 1);
            for v in &observed {
                obs.observe(&flat(&[(path, v.clone())]));
            }
            let sp = SynthesisParams {
                eps_num: 0.5,
                eps_str: 1.0,
                cat_max_card: 1,
                policy: &policy,
            };
            let (schema, _) = synthesize_schema(&obs, &sp, &emb);
            prop_assert!(!check_guard(&schema, &flat(&[(path, probe)]), &emb).pass);
            Ok(())
        })
        .map_err(|e| format!("sensitive override: {e}"))?;
    Ok("interval formulas exact; 10000 soundness cases, 2000 sensitive-override cases".into())
}

fn random_corpus(rng: &mut impl Rng, tools: &[&str], max_traces: usize, max_len: usize) -> Corpus {
    let n = rng.gen_range(1..=max_traces);
    let traces = (0..n)
        .map(|i| {
            let sid = format!("r{i:03}");
            let len = rng.gen_range(1..=max_len);
            let calls = (0..len)
                .map(|j| {
                    let tool = tools[rng.gen_range(0..tools.len())];
                    ToolCallRecord::new(sid.clone(), j as u64, tool, random_params(rng))
                })
                .collect();
            Trace { session_id: sid, calls }
        })
        .collect();
    Corpus::from_traces(traces)
}

fn random_params(rng: &mut impl Rng) -> Map<String, Value> {
    const WORDS: [&str; 7] = ["alpha beta", "beta gamma", "gamma", "delta alpha", "beta", "eps zeta", "alpha"];
    let v = match rng.gen_range(0..4) {
        0 => json!({}),
        1 => json!({"n": rng.gen_range(-20..40)}),
        2 => {
            let s = WORDS[rng.gen_range(0..WORDS.len())];
            json!({"s": s})
        }
        _ => {
            let (n, p) = (rng.gen_range(0..5), ["/a", "/b"][rng.gen_range(0..2)]);
            json!({"n": n, "file_path": p})
        }
    };
    v.as_object().cloned().unwrap_or_default()
}

/// Support of every reachable state, recomputed from the edge list.
fn threshold_violations(p: &Pdfa) -> Vec<String> {
    let mut reach = vec![false; p.states().len()];
    reach[0] = true;
    let mut changed = true;
    while changed {
        changed = false;
        for e in p.edges() {
            if reach[e.src] && !reach[e.dst] {
                reach[e.dst] = true;
                changed = true;
            }
        }
    }
    let mut support = vec![0u64; p.states().len()];
    for e in p.edges() {
        support[e.src] += e.count;
    }
    for (&s, &c) in p.end_counts() {
        support[s] += c;
    }
    let mut v = Vec::new();
    for i in 1..p.states().len() {
        if !reach[i] {
            v.push(format!("{} unreachable", p.states()[i]));
        } else if support[i] < p.params().theta {
            v.push(format!("{} support {}", p.states()[i], support[i]));
        }
    }
    v
}

fn c6_determinism() -> Outcome {
    let emb = ReferenceEmbedder::new(16);
    let tools = ["a", "b", "c", "d", "e", "f"];
    let failures: Vec<String> = (0..1000u64)
        .into_par_iter()
        .filter_map(|case| {
            let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ case);
            let k = rng.gen_range(2..=6);
            let corpus = random_corpus(&mut rng, &tools[..k], 30, 8);
            let params = ProfileParams {
                w: rng.gen_range(1..=3),
                theta: rng.gen_range(1..=4),
                embedding_dim: 16,
                reservoir_cap: rng.gen_range(2..=8),
                sensitive: SensitivePolicy::new(["*_path"]).unwrap(),
                ..ProfileParams::default()
            };
            let a = compile_profile(&corpus, &params, &emb).ok()?;
            let b = compile_profile(&corpus, &params, &emb).ok()?;
            let keys: BTreeSet<(usize, &str)> = a.pdfa.edges().iter().map(|e| (e.src, e.tool.as_str())).collect();
            if keys.len() != a.pdfa.edges().len() {
                return Some(format!("case {case}: duplicate (state, tool) edges"));
            }
            let v = threshold_violations(&a.pdfa);
            if !v.is_empty() {
                return Some(format!("case {case}: {v:?}"));
            }
            if serialize(&a.pdfa) != serialize(&b.pdfa) {
                return Some(format!("case {case}: recompilation differs"));
            }
            None
        })
        .collect();
    ensure!(failures.is_empty(), "{} failures, first: {}", failures.len(), failures[0]);
    Ok("1000 random corpora: deterministic, fixpoint holds, byte-identical".into())
}

fn c7_audit() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut total_positions = 0usize;
    for log_no in 0..3 {
        let path = dir.path().join(format!("audit-{log_no}.jsonl"));
        let mut log = AuditLog::open(&path).map_err(|e| e.to_string())?;
        for i in 0..100u64 {
            let mut params = FlatParams::default();
            params.insert("amount", Leaf::Number(rng.gen_range(0..10_000) as f64 / 100.0));
            params.insert("to", Leaf::Str(format!("user{}@example.com", rng.gen_range(0..50))));
            log.append(&AuditEntry {
                index: i,
                session_id: format!("sess-{}", rng.gen_range(0..5)),
                state: State::new("read_ticket", &["start"]),
                tool: ["send_email", "read_db", "close_ticket"][rng.gen_range(0..3)].into(),
                params,
                timestamp: 1_700_000_000_000 + i,
                reason: "guard_failure".into(),
                detail: Some("categorical_mismatch at to".into()),
            })
            .map_err(|e| e.to_string())?;
        }
        drop(log);
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        ensure!(verify(&bytes).is_ok(), "untampered log {log_no} fails verification");
        let line_of: Vec<u64> = {
            let mut line = 0u64;
            bytes
                .iter()
                .map(|&b| {
                    let l = line;
                    line += (b == b'\n') as u64;
                    l
                })
                .collect()
        };
        total_positions += bytes.len();
        let bad: Vec<String> = (0..bytes.len())
            .into_par_iter()
            .map(|pos| (pos, [0x01u8, 0x20, 0x80][pos % 3]))
            .filter_map(|(pos, m)| {
                let mut t = bytes.clone();
                t[pos] ^= m;
                match verify(&t) {
                    Verification::Broken { index, .. } if index <= line_of[pos] => None,
                    other => Some(format!("log {log_no} byte {pos} ^{m:#x}: {other:?}")),
                }
            })
            .collect();
        ensure!(bad.is_empty(), "{} undetected mutations, first: {}", bad.len(), bad[0]);
    }
    let elapsed = t.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("{} single-byte mutations over 3 logs all detected", total_positions))
}

fn c8_scale() -> Outcome {
    let rows = bench_throughput(&[10, 10_000], 200_000, SEED);
    let (small, large) = (&rows[0], &rows[1]);
    ensure!(small.blocked == 0 && large.blocked == 0, "valid stream blocked: {rows:?}");
    let ratio = large.median_ns.max(small.median_ns) / large.median_ns.min(small.median_ns);
    ensure!(ratio <= 2.0, "median latency ratio {ratio:.2}: {rows:?}");
    Ok(format!(
        "median {:.0} ns ({} states) vs {:.0} ns ({} states), ratio {ratio:.2}; TPS {:.0} / {:.0}",
        small.median_ns, small.states, large.median_ns, large.states, small.tps, large.tps
    ))
}

fn walked_edges(fragment: &[ToolCallRecord], w: usize) -> BTreeSet<EdgeKey> {
    let mut cur = State::initial();
    let mut out = BTreeSet::new();
    for c in fragment {
        out.insert((cur.clone(), c.tool.clone()));
        cur = cur.successor(&c.tool, w);
    }
    out
}

fn all_sequences(tools: &[&str], max_len: usize) -> Vec<Vec<String>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for seq in &frontier {
            for t in tools {
                let mut s: Vec<String> = seq.clone();
                s.push((*t).to_owned());
                next.push(s);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn c9_updates() -> Outcome {
    let emb = ReferenceEmbedder::new(16);
    let tools = ["a", "b", "c", "d", "e"];
    let sequences = all_sequences(&tools, 6);
    let failures: Vec<String> = (0..60u64)
        .into_par_iter()
        .filter_map(|case| {
            let mut rng = ChaCha8Rng::seed_from_u64(SEED.wrapping_mul(31) ^ case);
            let corpus = random_corpus(&mut rng, &tools, 50, 6);
            let params = ProfileParams {
                w: rng.gen_range(1..=3),
                theta: rng.gen_range(2..=4),
                embedding_dim: 16,
                ..ProfileParams::default()
            };
            let base = compile_profile(&corpus, &params, &emb).ok()?;

            let (same, same_d, _) = incremental_recompile(&base.pdfa, &base.digests, &[], &emb).ok()?;
            if serialize(&same) != serialize(&base.pdfa) || same_d != base.digests {
                return Some(format!("case {case}: zero-fragment update is not an identity"));
            }

            let frags: Vec<Vec<ToolCallRecord>> = (0..rng.gen_range(1..=3))
                .map(|f| {
                    let sid = format!("frag-{f}");
                    (0..rng.gen_range(1..=6))
                        .map(|j| {
                            let tool = tools[rng.gen_range(0..tools.len())];
                            ToolCallRecord::new(sid.clone(), j as u64, tool, random_params(&mut rng))
                        })
                        .collect()
                })
                .collect();
            let refs: Vec<(u64, &[ToolCallRecord])> =
                frags.iter().enumerate().map(|(i, f)| (i as u64, f.as_slice())).collect();
            let (next, _, _) = match incremental_recompile(&base.pdfa, &base.digests, &refs, &emb) {
                Ok(r) => r,
                Err(e) => return Some(format!("case {case}: update failed: {e}")),
            };

            let mut walked = BTreeSet::new();
            let mut traces = corpus.traces.clone();
            for f in &frags {
                walked.extend(walked_edges(f, params.w));
                traces.push(Trace {
                    session_id: f[0].session_id.clone(),
                    calls: f.clone(),
                });
            }
            let union = Corpus::from_traces(traces);
            let reference = compile_with_exemptions(&union, &params, &emb, &walked).ok()?;
            for seq in &sequences {
                if next.accepts_tools(seq) != reference.pdfa.accepts_tools(seq) {
                    return Some(format!("case {case}: languages differ on {seq:?}"));
                }
            }
            for f in &frags {
                let tools: Vec<&str> = f.iter().map(|c| c.tool.as_str()).collect();
                if !next.accepts_tools(&tools) {
                    return Some(format!("case {case}: approved fragment {tools:?} rejected"));
                }
            }
            let before = resolved_edge_records(&base.pdfa);
            let after = resolved_edge_records(&next);
            for (k, rec) in &before {
                if !walked.contains(k) && after.get(k) != Some(rec) {
                    return Some(format!("case {case}: untouched edge {k:?} changed"));
                }
            }
            None
        })
        .collect();
    ensure!(failures.is_empty(), "{} failures, first: {}", failures.len(), failures[0]);
    Ok(format!("60 corpora x {} sequences: languages equal, untouched records identical", sequences.len()))
}

fn c10_graybox() -> Outcome {
    let s = customer_service();
    let sample = generate_benign(&s.scenario, 400, SEED);
    let defender = compile_profile(&sample.corpus, &s.params, s.embedder.as_ref()).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut last = -1.0;
    for k in [0.1, 0.5, 0.9] {
        let cfg = GrayboxConfig {
            k,
            seed: SEED,
            query_budget: 10_000,
            attacks: 200,
        };
        let r = graybox(&s.scenario, &sample, &defender, &s.params, s.embedder.clone(), cfg)
            .map_err(|e| e.to_string())?;
        ensure!(r.structural_recovery >= last, "recovery fell to {} at k={k}", r.structural_recovery);
        ensure!(r.structurally_valid > 0, "no structurally valid attacks at k={k}");
        ensure!(r.guard_rejection_rate > 0.9, "guard rejection {} at k={k}", r.guard_rejection_rate);
        last = r.structural_recovery;
        lines.push(format!(
            "k={k}: recovery {:.3}, guard rejection {:.3}, ASR {:.3}",
            r.structural_recovery,
            r.guard_rejection_rate,
            r.attack.asr()
        ));
    }
    Ok(lines.join("; "))
}

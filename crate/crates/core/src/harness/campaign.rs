use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::scenario::{generate_from, BenignSample, Scenario};
use crate::audit::AuditLog;
use crate::embedding::Embedder;
use crate::gateway::{Gateway, GatewayConfig, Reason};
use crate::profiler::{compile_profile, CompileError, Compiled, EdgeKey, Pdfa, ProfileParams};
use crate::trace::{Corpus, FlatParams, Leaf, Trace};

/// One proposed tool call.
#[derive(Debug, Clone, PartialEq)]
pub struct Call {
    pub tool: String,
    pub params: FlatParams,
}

pub type CallTrace = Vec<Call>;

pub fn calls_of(trace: &Trace) -> CallTrace {
    trace
        .calls
        .iter()
        .map(|c| Call {
            tool: c.tool.clone(),
            params: c.flat_params(),
        })
        .collect()
}

pub fn corpus_calls(corpus: &Corpus) -> Vec<CallTrace> {
    corpus.traces.iter().map(calls_of).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CampaignMode {
    /// Traces are expected to pass; reports the blocked-trace fraction.
    Benign,
    /// Traces are attacks; reports the fraction executed end to end.
    Attack,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CampaignReport {
    pub mode: CampaignMode,
    pub attempts: u64,
    /// Traces whose every call was allowed.
    pub executed: u64,
    /// Traces valid under the structural transition function alone.
    pub structural_matches: u64,
    pub vocab_blocks: u64,
    pub contextual_blocks: u64,
    pub guard_blocks: u64,
    /// First-block reason per blocked trace.
    pub reasons: BTreeMap<String, u64>,
    /// Gateway evaluations issued.
    pub queries: u64,
}

impl CampaignReport {
    /// Attack success rate.
    pub fn asr(&self) -> f64 {
        ratio(self.executed, self.attempts)
    }

    /// Benign trace failure rate.
    pub fn btfr(&self) -> f64 {
        ratio(self.attempts - self.executed, self.attempts)
    }

    pub fn blocked(&self) -> u64 {
        self.attempts - self.executed
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

struct Outcome {
    first_block: Option<Reason>,
    structural: bool,
    queries: u64,
}

/// Replays every trace in a fresh session and stops each at its first block.
/// Traces run in parallel; the report does not depend on scheduling.
pub fn run_campaign(
    pdfa: &Pdfa,
    embedder: Arc<dyn Embedder>,
    traces: &[CallTrace],
    mode: CampaignMode,
) -> CampaignReport {
    let config = GatewayConfig {
        session_capacity: traces.len().max(1),
        ..GatewayConfig::default()
    };
    let gw = Gateway::new(pdfa.clone(), embedder, AuditLog::discard(), config)
        .expect("embedder dimension matches profile");
    let outcomes: Vec<Outcome> = traces
        .par_iter()
        .enumerate()
        .map(|(i, trace)| {
            let sid = format!("campaign-{i}");
            let mut first_block = None;
            let mut queries = 0;
            for call in trace {
                queries += 1;
                let d = gw.evaluate_at(&sid, &call.tool, &call.params, 0);
                if !d.allowed() {
                    first_block = Some(d.reason);
                    break;
                }
            }
            Outcome {
                first_block,
                structural: structurally_valid(pdfa, trace),
                queries,
            }
        })
        .collect();

    let mut r = CampaignReport {
        mode,
        attempts: traces.len() as u64,
        executed: 0,
        structural_matches: 0,
        vocab_blocks: 0,
        contextual_blocks: 0,
        guard_blocks: 0,
        reasons: BTreeMap::new(),
        queries: 0,
    };
    for o in outcomes {
        r.queries += o.queries;
        r.structural_matches += o.structural as u64;
        match o.first_block {
            None => r.executed += 1,
            Some(reason) => {
                *r.reasons.entry(reason.as_str().to_owned()).or_default() += 1;
                match reason {
                    Reason::UnknownTool => r.vocab_blocks += 1,
                    Reason::GuardFailure => r.guard_blocks += 1,
                    _ => r.contextual_blocks += 1,
                }
            }
        }
    }
    r
}

/// Whether the tool sequence is accepted ignoring parameters.
pub fn structurally_valid(pdfa: &Pdfa, trace: &[Call]) -> bool {
    let mut cur = pdfa.s0();
    for c in trace {
        match pdfa.step(cur, &c.tool) {
            Some(e) => cur = pdfa.edges()[e].dst,
            None => return false,
        }
    }
    true
}

/// Context-sequential attacks: the first three calls of a benign template
/// followed by one high-value call carrying an attacker payload.
pub fn generate_context_sequential(scenario: &Scenario, n: usize, seed: u64) -> Vec<CallTrace> {
    let preambles = generate_from(scenario, n, seed, |t| t.sequence.len() >= 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a77a);
    preambles
        .corpus
        .traces
        .iter()
        .map(|t| {
            let mut calls = calls_of(t);
            calls.truncate(3);
            let tool = scenario.high_value.choose(&mut rng).expect("scenario has high-value tools");
            let params = scenario.attack_flat(tool, &mut rng).expect("validated on load");
            calls.push(Call {
                tool: tool.clone(),
                params,
            });
            calls
        })
        .collect()
}

/// Splicing attacks: a benign prefix taken from `corpus` (possibly empty)
/// followed by one call to a target tool with an attacker payload.
pub fn splice_exfiltration(
    scenario: &Scenario,
    corpus: &Corpus,
    targets: &[String],
    n: usize,
    seed: u64,
) -> Vec<CallTrace> {
    assert!(!targets.is_empty(), "no splice targets");
    assert!(!corpus.is_empty(), "no traces to splice into");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let t = &corpus.traces[rng.gen_range(0..corpus.len())];
            let cut = rng.gen_range(0..=t.calls.len());
            let mut calls = calls_of(t);
            calls.truncate(cut);
            let tool = &targets[rng.gen_range(0..targets.len())];
            let params = scenario.attack_flat(tool, &mut rng).unwrap_or_default();
            calls.push(Call {
                tool: tool.clone(),
                params,
            });
            calls
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrayboxReport {
    pub k: f64,
    pub adversary_traces: usize,
    pub true_edges: usize,
    pub recovered_edges: usize,
    /// Fraction of the defender's transitions present in the adversary's model.
    pub structural_recovery: f64,
    pub attack: CampaignReport,
    /// Attacks whose tool sequence is valid in the defender's profile.
    pub structurally_valid: u64,
    /// Guard blocks among structurally valid attacks.
    pub guard_rejection_rate: f64,
    /// Same walks as the attacks but with benign final payloads.
    pub probe: CampaignReport,
    pub p_pass: f64,
    pub queries_used: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct GrayboxConfig {
    pub k: f64,
    pub seed: u64,
    /// Maximum gateway evaluations across attacks and probes together.
    pub query_budget: u64,
    pub attacks: usize,
}

/// Gray-box adversary: it knows the algorithm and parameters, sees a
/// `k`-fraction of the benign corpus, compiles its own profile, and aims
/// attacks at high-value transitions it believes exist.
///
/// Fractions are nested prefixes of one seeded shuffle, so a larger `k`
/// always sees a superset of the traces a smaller one saw.
pub fn graybox(
    scenario: &Scenario,
    sample: &BenignSample,
    defender: &Compiled,
    params: &ProfileParams,
    embedder: Arc<dyn Embedder>,
    cfg: GrayboxConfig,
) -> Result<GrayboxReport, CompileError> {
    if !(cfg.k > 0.0 && cfg.k <= 1.0) {
        return Err(CompileError::InvalidParams(format!("k must be in (0, 1], got {}", cfg.k)));
    }
    let mut order: Vec<usize> = (0..sample.corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let take = ((cfg.k * order.len() as f64).ceil() as usize).clamp(1, order.len());
    let seen: Vec<Trace> = order[..take].iter().map(|&i| sample.corpus.traces[i].clone()).collect();
    let adversary = compile_profile(&Corpus::from_traces(seen), params, embedder.as_ref())?;

    let keys = |p: &Pdfa| -> BTreeSet<EdgeKey> { p.edges().iter().map(|e| p.edge_key(e)).collect() };
    let true_keys = keys(&defender.pdfa);
    let adv_keys = keys(&adversary.pdfa);
    let recovered = adv_keys.intersection(&true_keys).count();

    let walks = adversary_walks(scenario, &adversary, cfg.attacks, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa77a_c4e5);
    let budget = cfg.query_budget as usize;
    let mut attacks = Vec::new();
    let mut probes = Vec::new();
    let mut spent = 0;
    for (prefix, tool, benign) in walks {
        let cost = 2 * (prefix.len() + 1);
        if spent + cost > budget {
            break;
        }
        spent += cost;
        let mut a = prefix.clone();
        a.push(Call {
            tool: tool.clone(),
            params: scenario.attack_flat(&tool, &mut rng).expect("high-value tools have payloads"),
        });
        let mut p = prefix;
        p.push(Call { tool, params: benign });
        attacks.push(a);
        probes.push(p);
    }

    let attack = run_campaign(&defender.pdfa, embedder.clone(), &attacks, CampaignMode::Attack);
    let probe = run_campaign(&defender.pdfa, embedder, &probes, CampaignMode::Benign);
    let structurally_valid = attack.structural_matches;
    Ok(GrayboxReport {
        k: cfg.k,
        adversary_traces: take,
        true_edges: true_keys.len(),
        recovered_edges: recovered,
        structural_recovery: ratio(recovered as u64, true_keys.len() as u64),
        guard_rejection_rate: ratio(attack.guard_blocks, structurally_valid),
        structurally_valid,
        p_pass: ratio(probe.executed, probe.attempts),
        queries_used: attack.queries + probe.queries,
        attack,
        probe,
    })
}

/// Paths from s0 to each high-value transition in the adversary's model,
/// with parameters the adversary saw on every step. Each item is
/// (prefix, final tool, benign params for the final call).
fn adversary_walks(
    scenario: &Scenario,
    adv: &Compiled,
    n: usize,
    seed: u64,
) -> Vec<(CallTrace, String, FlatParams)> {
    let p = &adv.pdfa;
    // Shortest edge path to every state.
    let mut parent: Vec<Option<usize>> = vec![None; p.states().len()];
    let mut seen = vec![false; p.states().len()];
    seen[p.s0()] = true;
    let mut queue = VecDeque::from([p.s0()]);
    while let Some(s) = queue.pop_front() {
        for edge in p.outgoing(s) {
            let d = edge.dst;
            if !seen[d] {
                seen[d] = true;
                parent[d] = p.step(s, &edge.tool);
                queue.push_back(d);
            }
        }
    }
    let targets: Vec<usize> = (0..p.edges().len())
        .filter(|&e| scenario.high_value.contains(&p.edges()[e].tool) && seen[p.edges()[e].src])
        .collect();
    if targets.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0bad_cafe);
    (0..n)
        .map(|_| {
            let target = targets[rng.gen_range(0..targets.len())];
            let mut chain = Vec::new();
            let mut s = p.edges()[target].src;
            while let Some(e) = parent[s] {
                chain.push(e);
                s = p.edges()[e].src;
            }
            chain.reverse();
            let prefix = chain
                .iter()
                .map(|&e| Call {
                    tool: p.edges()[e].tool.clone(),
                    params: observed_params(adv, e, &mut rng),
                })
                .collect();
            let benign = observed_params(adv, target, &mut rng);
            (prefix, p.edges()[target].tool.clone(), benign)
        })
        .collect()
}

/// One observed value per required path of an edge in the adversary's model.
fn observed_params(adv: &Compiled, edge: usize, rng: &mut impl Rng) -> FlatParams {
    let p = &adv.pdfa;
    let e = &p.edges()[edge];
    let key = (p.states()[e.src].clone(), e.tool.clone());
    let obs = &adv.digests.raw.edges[&key];
    let mut out = FlatParams::default();
    for path in &e.schema.required {
        let values: Vec<&String> = obs.paths[path].distinct.iter().collect();
        let v = values[rng.gen_range(0..values.len())];
        out.insert(path.clone(), Leaf::from_canonical(v));
    }
    out
}

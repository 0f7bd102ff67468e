use std::collections::BTreeMap;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::guards::SensitivePolicy;
use crate::trace::{flatten_params, Corpus, FlatParams, ToolCallRecord, Trace};

const BUILTIN: &[(&str, &str)] = &[
    ("customer-service", include_str!("scenarios/customer-service.json")),
    ("os-automation", include_str!("scenarios/os-automation.json")),
];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario {0:?}")]
    Unknown(String),
    #[error("scenario is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// How one parameter value is drawn.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ValueGen {
    /// Uniform integer in the inclusive range.
    Int { range: [i64; 2] },
    /// Uniform float in the range, rounded to two decimals.
    Float { range: [f64; 2] },
    Bool,
    /// Uniform pick from a pool of strings.
    Choice { pool: Vec<String> },
    /// One pick from each part, joined with spaces.
    Compose { parts: Vec<Vec<String>> },
}

impl ValueGen {
    fn sample(&self, rng: &mut impl Rng) -> Value {
        match self {
            ValueGen::Int { range } => Value::from(rng.gen_range(range[0]..=range[1])),
            ValueGen::Float { range } => {
                let x: f64 = rng.gen_range(range[0]..=range[1]);
                Value::from((x * 100.0).round() / 100.0)
            }
            ValueGen::Bool => Value::Bool(rng.gen()),
            ValueGen::Choice { pool } => Value::String(pool[rng.gen_range(0..pool.len())].clone()),
            ValueGen::Compose { parts } => Value::String(
                parts
                    .iter()
                    .map(|p| p[rng.gen_range(0..p.len())].as_str())
                    .collect::<Vec<_>>()
                    .join(" "),
            ),
        }
    }

    fn check(&self) -> Result<(), String> {
        match self {
            ValueGen::Int { range } if range[0] > range[1] => Err("empty int range".into()),
            ValueGen::Float { range } if range[0] > range[1] => Err("empty float range".into()),
            ValueGen::Choice { pool } if pool.is_empty() => Err("empty pool".into()),
            ValueGen::Compose { parts } if parts.is_empty() || parts.iter().any(|p| p.is_empty()) => {
                Err("empty compose part".into())
            }
            _ => Ok(()),
        }
    }
}

/// Parameter generators for one tool, keyed by dotted path.
pub type ToolGen = BTreeMap<String, ValueGen>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Repeat {
    pub start: usize,
    pub end: usize,
    /// The segment `sequence[start..=end]` is repeated 0..=max_extra extra times.
    pub max_extra: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    pub name: String,
    pub weight: f64,
    pub sequence: Vec<String>,
    #[serde(default)]
    pub repeat: Option<Repeat>,
}

impl Template {
    fn draw(&self, rng: &mut impl Rng) -> Vec<String> {
        match self.repeat {
            None => self.sequence.clone(),
            Some(r) => {
                let extra = rng.gen_range(0..=r.max_extra);
                let mut out = self.sequence[..=r.end].to_vec();
                for _ in 0..extra {
                    out.extend_from_slice(&self.sequence[r.start..=r.end]);
                }
                out.extend_from_slice(&self.sequence[r.end + 1..]);
                out
            }
        }
    }
}

/// A synthetic workload: tools, benign templates with parameter generators,
/// and attacker payload pools.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub tools: Vec<String>,
    pub high_value: Vec<String>,
    pub sensitive: Vec<String>,
    pub params: BTreeMap<String, ToolGen>,
    pub templates: Vec<Template>,
    /// Malicious parameter generators per tool. Tools here that are not in
    /// `tools` model out-of-vocabulary attack targets.
    pub attack: BTreeMap<String, ToolGen>,
}

impl Scenario {
    pub fn builtin(name: &str) -> Result<Scenario, ScenarioError> {
        let (_, text) = BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ScenarioError::Unknown(name.to_owned()))?;
        Scenario::from_json(text)
    }

    pub fn builtin_names() -> Vec<&'static str> {
        BUILTIN.iter().map(|(n, _)| *n).collect()
    }

    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate().map_err(ScenarioError::Invalid)?;
        Ok(s)
    }

    fn validate(&self) -> Result<(), String> {
        if self.templates.is_empty() {
            return Err("no templates".into());
        }
        for t in &self.templates {
            if t.sequence.is_empty() || t.weight <= 0.0 {
                return Err(format!("template {} is empty or has no weight", t.name));
            }
            if let Some(r) = t.repeat {
                if r.start > r.end || r.end >= t.sequence.len() {
                    return Err(format!("template {} has a bad repeat segment", t.name));
                }
            }
            for tool in &t.sequence {
                if !self.tools.contains(tool) {
                    return Err(format!("template {} uses undeclared tool {tool}", t.name));
                }
                if !self.params.contains_key(tool) {
                    return Err(format!("tool {tool} has no parameter generators"));
                }
            }
        }
        for tool in &self.high_value {
            if !self.attack.contains_key(tool) {
                return Err(format!("high-value tool {tool} has no attack payloads"));
            }
        }
        for (tool, gens) in self.params.iter().chain(&self.attack) {
            for (path, g) in gens {
                g.check().map_err(|e| format!("{tool}.{path}: {e}"))?;
            }
        }
        SensitivePolicy::new(&self.sensitive).map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn policy(&self) -> SensitivePolicy {
        SensitivePolicy::new(&self.sensitive).expect("validated on load")
    }

    pub fn template(&self, name: &str) -> Option<&Template> {
        self.templates.iter().find(|t| t.name == name)
    }

    pub fn benign_params(&self, tool: &str, rng: &mut impl Rng) -> Map<String, Value> {
        sample_params(&self.params[tool], rng)
    }

    /// Malicious parameters for `tool`, or `None` when the scenario has no
    /// payload pool for it.
    pub fn attack_params(&self, tool: &str, rng: &mut impl Rng) -> Option<Map<String, Value>> {
        self.attack.get(tool).map(|g| sample_params(g, rng))
    }

    pub fn attack_flat(&self, tool: &str, rng: &mut impl Rng) -> Option<FlatParams> {
        self.attack_params(tool, rng).map(|m| flatten_params(&m))
    }
}

fn sample_params(gens: &ToolGen, rng: &mut impl Rng) -> Map<String, Value> {
    let mut root = Map::new();
    for (path, g) in gens {
        let v = g.sample(rng);
        let mut parts: Vec<&str> = path.split('.').collect();
        let last = parts.pop().expect("split yields one part");
        let mut cur = &mut root;
        for p in parts {
            cur = cur
                .entry(p.to_owned())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("generator paths do not collide with leaves");
        }
        cur.insert(last.to_owned(), v);
    }
    root
}

/// A generated corpus together with the template behind each trace.
#[derive(Debug, Clone)]
pub struct BenignSample {
    pub corpus: Corpus,
    /// Template name per trace, aligned with `corpus.traces`.
    pub templates: Vec<String>,
}

impl BenignSample {
    /// Number of traces drawn from each template.
    pub fn template_counts(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for t in &self.templates {
            *m.entry(t.clone()).or_default() += 1;
        }
        m
    }
}

/// Draws `n` benign traces. Deterministic in `(scenario, n, seed)`.
pub fn generate_benign(scenario: &Scenario, n: usize, seed: u64) -> BenignSample {
    generate_from(scenario, n, seed, |_| true)
}

/// Like [`generate_benign`] but only from templates accepted by `keep`.
pub fn generate_from(
    scenario: &Scenario,
    n: usize,
    seed: u64,
    keep: impl Fn(&Template) -> bool,
) -> BenignSample {
    let pool: Vec<&Template> = scenario.templates.iter().filter(|t| keep(t)).collect();
    assert!(!pool.is_empty(), "template filter rejected every template");
    let dist = WeightedIndex::new(pool.iter().map(|t| t.weight)).expect("weights validated");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut traces = Vec::with_capacity(n);
    let mut templates = Vec::with_capacity(n);
    for i in 0..n {
        let t = pool[dist.sample(&mut rng)];
        let sid = format!("{}-{seed}-{i:06}", scenario.name);
        let base = 1_700_000_000_000 + (i as u64) * 60_000;
        let calls = t
            .draw(&mut rng)
            .into_iter()
            .enumerate()
            .map(|(j, tool)| {
                let params = scenario.benign_params(&tool, &mut rng);
                ToolCallRecord::new(sid.clone(), base + j as u64 * 1_000, tool, params)
            })
            .collect();
        traces.push(Trace {
            session_id: sid,
            calls,
        });
        templates.push(t.name.clone());
    }
    BenignSample {
        corpus: Corpus::from_traces(traces),
        templates,
    }
}

//! Binary profile format, digest sidecar, and structural statistics.
//!
//! A profile is the 8-byte tag `PRAETOR1` followed by a MessagePack map.
//! Struct fields below are declared in sorted order so that the encoding is
//! canonical: equal automata always produce identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::EmbeddingVector;
use crate::guards::{CategoricalSet, Guard, NumericInterval, ParamSchema, SensitivePolicy, StringBall};
use crate::profiler::{Digests, Edge, EdgeKey, Pdfa, ProfileParams, State};

pub const PROFILE_MAGIC: &[u8; 8] = b"PRAETOR1";
pub const DIGEST_MAGIC: &[u8; 8] = b"PRAETORD";
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_EXPANSION_BUDGET: u64 = 10_000_000;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated or malformed body: {0}")]
    Malformed(String),
    #[error("invalid automaton: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct ParamsRecord {
    cat_max_card: usize,
    embedding_dim: usize,
    eps_num: f64,
    eps_str: f64,
    reservoir_cap: usize,
    sensitive: Vec<String>,
    theta: u64,
    w: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct GuardRecord {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    centroid: Option<Vec<f32>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    hi: Option<f64>,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    lo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    values: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct SchemaRecord {
    guards: BTreeMap<String, GuardRecord>,
    optional: Vec<String>,
    required: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct StateRecord {
    ctx: Vec<String>,
    tool: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct EdgeRecord {
    count: u64,
    dst: u32,
    schema: SchemaRecord,
    src: u32,
    tool: String,
}

#[derive(Serialize, Deserialize)]
struct ProfileBody {
    digests: Option<String>,
    edges: Vec<EdgeRecord>,
    end_counts: BTreeMap<u32, u64>,
    params: ParamsRecord,
    s0: u32,
    states: Vec<StateRecord>,
    version: u32,
    vocab: Vec<String>,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

fn guard_record(g: &Guard) -> GuardRecord {
    let empty = GuardRecord {
        centroid: None,
        hi: None,
        kind: String::new(),
        lo: None,
        radius: None,
        values: None,
    };
    match g {
        Guard::Numeric(iv) => GuardRecord {
            kind: "numeric".into(),
            lo: Some(iv.lo),
            hi: Some(iv.hi),
            ..empty
        },
        Guard::String(b) => GuardRecord {
            kind: "string".into(),
            centroid: Some(b.centroid.0.iter().map(|&x| x as f32).collect()),
            radius: Some(b.radius),
            ..empty
        },
        Guard::Categorical(c) => GuardRecord {
            kind: "categorical".into(),
            values: Some(c.values.iter().cloned().collect()),
            ..empty
        },
    }
}

fn guard_from(r: GuardRecord) -> Result<Guard, StoreError> {
    let missing = |f: &str| StoreError::Malformed(format!("{} guard without {f}", r.kind));
    match r.kind.as_str() {
        "numeric" => Ok(Guard::Numeric(NumericInterval {
            lo: r.lo.ok_or_else(|| missing("lo"))?,
            hi: r.hi.ok_or_else(|| missing("hi"))?,
        })),
        "string" => Ok(Guard::String(StringBall {
            centroid: EmbeddingVector(
                r.centroid
                    .clone()
                    .ok_or_else(|| missing("centroid"))?
                    .into_iter()
                    .map(f64::from)
                    .collect(),
            ),
            radius: r.radius.ok_or_else(|| missing("radius"))?,
        })),
        "categorical" => Ok(Guard::Categorical(CategoricalSet {
            values: r.values.clone().ok_or_else(|| missing("values"))?.into_iter().collect(),
        })),
        other => Err(StoreError::Malformed(format!("unknown guard kind {other:?}"))),
    }
}

pub(crate) fn schema_record(s: &ParamSchema) -> SchemaRecord {
    SchemaRecord {
        guards: s.guards.iter().map(|(k, g)| (k.clone(), guard_record(g))).collect(),
        optional: s.optional.iter().cloned().collect(),
        required: s.required.iter().cloned().collect(),
    }
}

fn schema_from(r: SchemaRecord) -> Result<ParamSchema, StoreError> {
    let mut guards = BTreeMap::new();
    for (k, g) in r.guards {
        guards.insert(k, guard_from(g)?);
    }
    Ok(ParamSchema {
        guards,
        required: r.required.into_iter().collect(),
        optional: r.optional.into_iter().collect(),
    })
}

fn encode<T: Serialize>(magic: &[u8; 8], body: &T) -> Vec<u8> {
    let mut out = magic.to_vec();
    rmp_serde::encode::write_named(&mut out, body).expect("encoding to memory cannot fail");
    out
}

fn decode<T: for<'de> Deserialize<'de>>(magic: &[u8; 8], bytes: &[u8]) -> Result<T, StoreError> {
    if bytes.len() < magic.len() {
        return if magic.starts_with(bytes) && !bytes.is_empty() {
            Err(StoreError::Malformed("file shorter than header".into()))
        } else {
            Err(StoreError::BadMagic)
        };
    }
    if &bytes[..8] != magic {
        return Err(StoreError::BadMagic);
    }
    let body = &bytes[8..];
    if let Ok(probe) = rmp_serde::from_slice::<VersionProbe>(body) {
        if probe.version != FORMAT_VERSION {
            return Err(StoreError::VersionMismatch {
                found: probe.version,
                expected: FORMAT_VERSION,
            });
        }
    }
    let mut cur = Cursor::new(body);
    let value: T = rmp_serde::from_read(&mut cur).map_err(|e| StoreError::Malformed(e.to_string()))?;
    if cur.position() as usize != body.len() {
        return Err(StoreError::Malformed(format!(
            "{} trailing bytes after body",
            body.len() - cur.position() as usize
        )));
    }
    Ok(value)
}

pub fn serialize(p: &Pdfa) -> Vec<u8> {
    let params = p.params();
    let body = ProfileBody {
        digests: p.digest_ref().map(str::to_owned),
        edges: p
            .edges()
            .iter()
            .map(|e| EdgeRecord {
                count: e.count,
                dst: e.dst as u32,
                schema: schema_record(&e.schema),
                src: e.src as u32,
                tool: e.tool.clone(),
            })
            .collect(),
        end_counts: p.end_counts().iter().map(|(&i, &c)| (i as u32, c)).collect(),
        params: ParamsRecord {
            cat_max_card: params.cat_max_card,
            embedding_dim: params.embedding_dim,
            eps_num: params.eps_num,
            eps_str: params.eps_str,
            reservoir_cap: params.reservoir_cap,
            sensitive: params.sensitive.patterns().to_vec(),
            theta: params.theta,
            w: params.w,
        },
        s0: p.s0() as u32,
        states: p
            .states()
            .iter()
            .map(|s| StateRecord {
                ctx: s.ctx.clone(),
                tool: s.tool.clone(),
            })
            .collect(),
        version: FORMAT_VERSION,
        vocab: p.vocab().iter().cloned().collect(),
    };
    encode(PROFILE_MAGIC, &body)
}

pub fn deserialize(bytes: &[u8]) -> Result<Pdfa, StoreError> {
    let body: ProfileBody = decode(PROFILE_MAGIC, bytes)?;
    if body.s0 != 0 {
        return Err(StoreError::Invalid(format!("initial state index {} is not 0", body.s0)));
    }
    let pr = body.params;
    let params = ProfileParams {
        w: pr.w,
        theta: pr.theta,
        eps_num: pr.eps_num,
        eps_str: pr.eps_str,
        cat_max_card: pr.cat_max_card,
        sensitive: SensitivePolicy::new(pr.sensitive).map_err(|e| StoreError::Invalid(e.to_string()))?,
        reservoir_cap: pr.reservoir_cap,
        embedding_dim: pr.embedding_dim,
    };
    let states = body
        .states
        .into_iter()
        .map(|s| State { tool: s.tool, ctx: s.ctx })
        .collect();
    let mut edges = Vec::with_capacity(body.edges.len());
    for e in body.edges {
        edges.push(Edge {
            src: e.src as usize,
            tool: e.tool,
            dst: e.dst as usize,
            count: e.count,
            schema: schema_from(e.schema)?,
        });
    }
    let end_counts = body.end_counts.into_iter().map(|(i, c)| (i as usize, c)).collect();
    Pdfa::new(params, body.vocab.into_iter().collect(), states, edges, end_counts, body.digests)
        .map_err(|e| StoreError::Invalid(e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct DigestBody {
    applied: Vec<u64>,
    exempt: Vec<EdgeKey>,
    raw: crate::profiler::RawGraph,
    version: u32,
}

pub fn serialize_digests(d: &Digests) -> Vec<u8> {
    encode(
        DIGEST_MAGIC,
        &DigestBody {
            applied: d.applied.iter().copied().collect(),
            exempt: d.exempt.iter().cloned().collect(),
            raw: d.raw.clone(),
            version: FORMAT_VERSION,
        },
    )
}

pub fn deserialize_digests(bytes: &[u8]) -> Result<Digests, StoreError> {
    let body: DigestBody = decode(DIGEST_MAGIC, bytes)?;
    Ok(Digests {
        raw: body.raw,
        exempt: body.exempt.into_iter().collect(),
        applied: body.applied.into_iter().collect(),
    })
}

#[derive(Serialize)]
struct ResolvedEdge<'a> {
    count: u64,
    dst: &'a State,
    schema: SchemaRecord,
    src: &'a State,
    tool: &'a str,
}

/// Each edge encoded with its endpoint states spelled out rather than as
/// indices, so records can be compared across profiles whose state
/// numbering differs.
pub fn resolved_edge_records(p: &Pdfa) -> BTreeMap<EdgeKey, Vec<u8>> {
    p.edges()
        .iter()
        .map(|e| {
            let rec = ResolvedEdge {
                count: e.count,
                dst: &p.states()[e.dst],
                schema: schema_record(&e.schema),
                src: &p.states()[e.src],
                tool: &e.tool,
            };
            let bytes = rmp_serde::to_vec_named(&rec).expect("encoding to memory cannot fail");
            (p.edge_key(e), bytes)
        })
        .collect()
}

/// Hex SHA-256 of the encoded digests, recorded in the profile so a profile
/// and its sidecar can be matched up.
pub fn digests_fingerprint(d: &Digests) -> String {
    hex::encode(Sha256::digest(serialize_digests(d)))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_profile(path: impl AsRef<Path>, p: &Pdfa) -> Result<(), StoreError> {
    write_atomic(path.as_ref(), &serialize(p))
}

pub fn load_profile(path: impl AsRef<Path>) -> Result<Pdfa, StoreError> {
    deserialize(&fs::read(path)?)
}

pub fn save_digests(path: impl AsRef<Path>, d: &Digests) -> Result<(), StoreError> {
    write_atomic(path.as_ref(), &serialize_digests(d))
}

pub fn load_digests(path: impl AsRef<Path>) -> Result<Digests, StoreError> {
    deserialize_digests(&fs::read(path)?)
}

/// Conventional sidecar location: `<profile>.digests`.
pub fn digests_path_for(profile: &Path) -> std::path::PathBuf {
    let mut s = profile.as_os_str().to_owned();
    s.push(".digests");
    s.into()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutDegreeStats {
    /// Mean over states with at least one outgoing edge; 0 when there are none.
    pub mean: f64,
    pub max: usize,
    /// Degree → number of states with that degree (terminal states included).
    pub histogram: BTreeMap<usize, usize>,
    /// True when the automaton has no edges and `mean` is a placeholder.
    pub degenerate: bool,
    /// Max out-degree over states with an edge on a high-value tool.
    pub max_high_value: Option<usize>,
}

pub fn out_degree_stats(p: &Pdfa, high_value: &BTreeSet<String>) -> OutDegreeStats {
    let mut histogram = BTreeMap::new();
    let mut sum = 0usize;
    let mut non_terminal = 0usize;
    let mut max = 0usize;
    let mut max_high_value: Option<usize> = None;
    for s in 0..p.states().len() {
        let d = p.out_degree(s);
        *histogram.entry(d).or_insert(0) += 1;
        max = max.max(d);
        if d > 0 {
            sum += d;
            non_terminal += 1;
        }
        if p.outgoing(s).any(|e| high_value.contains(&e.tool)) {
            max_high_value = Some(max_high_value.map_or(d, |m| m.max(d)));
        }
    }
    OutDegreeStats {
        mean: if non_terminal == 0 { 0.0 } else { sum as f64 / non_terminal as f64 },
        max,
        histogram,
        degenerate: non_terminal == 0,
        max_high_value,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathStats {
    pub k: usize,
    pub total_paths: u64,
    pub target: Option<String>,
    pub target_paths: Option<u64>,
    pub vocab_size: usize,
    pub density: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum EnumerateError {
    #[error("k must be >= 1")]
    InvalidK,
    #[error("expansion budget of {budget} nodes exceeded after counting {partial_paths} paths")]
    BudgetExceeded { budget: u64, partial_paths: u64 },
}

/// Counts length-`k` tool sequences realizable from the initial state by
/// depth-first search. Because transitions are deterministic, each sequence
/// corresponds to exactly one walk.
pub fn enumerate_paths(
    p: &Pdfa,
    k: usize,
    target: Option<&str>,
    budget: u64,
) -> Result<PathStats, EnumerateError> {
    if k == 0 {
        return Err(EnumerateError::InvalidK);
    }
    let mut total = 0u64;
    let mut hits = 0u64;
    let mut expanded = 0u64;
    // (state, depth)
    let mut stack: Vec<(usize, usize)> = vec![(p.s0(), 0)];
    while let Some((s, depth)) = stack.pop() {
        expanded += 1;
        if expanded > budget {
            return Err(EnumerateError::BudgetExceeded {
                budget,
                partial_paths: total,
            });
        }
        for e in p.outgoing(s) {
            if depth + 1 == k {
                total += 1;
                if target == Some(e.tool.as_str()) {
                    hits += 1;
                }
            } else {
                stack.push((e.dst, depth + 1));
            }
        }
    }
    let t = p.vocab().len();
    let space = (t as f64).powi(k as i32);
    Ok(PathStats {
        k,
        total_paths: total,
        target: target.map(str::to_owned),
        target_paths: target.map(|_| hits),
        vocab_size: t,
        density: if space > 0.0 { total as f64 / space } else { 0.0 },
    })
}

//! Compact lookup structures the gateway uses per decision.
//!
//! Transitions are stored in one array sorted by (source, tool) with interned
//! tool ids, so a lookup reads one contiguous run. Every edge's schema is
//! mirrored as a run of slots with interned paths and categorical values
//! stored inline, which accepts typical calls without touching the schema's
//! tree maps or the embedder.

use std::collections::{BTreeSet, HashMap};
use std::ops::Range;

use crate::guards::{Guard, ParamSchema};
use crate::trace::{FlatParams, Leaf};

#[derive(Debug, Clone, Copy)]
enum Word {
    /// A guarded path. A categorical slot is followed by `len` value words.
    Slot { path: u32, required: bool, check: Check },
    Value(u32),
}

#[derive(Debug, Clone, Copy)]
enum Check {
    Numeric { lo: f64, hi: f64 },
    Categorical { len: u32 },
    /// Needs the embedder; the fast path cannot decide.
    String,
}

#[derive(Debug, Clone, Copy)]
struct Trans {
    tool: u32,
    dst: u32,
    words: u32,
    len: u32,
    required: u32,
    /// A required path without a guard: nothing can pass.
    unsatisfiable: bool,
}

/// Result of the fast guard check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FastVerdict {
    Pass,
    Fail,
    /// A string guard is involved; evaluate the full schema.
    Undecided,
}

#[derive(Debug, Clone, Default)]
pub struct Runtime {
    tool_ids: HashMap<String, u32>,
    offsets: Vec<u32>,
    trans: Vec<Trans>,
    words: Vec<Word>,
    paths: HashMap<String, u32>,
    values: HashMap<String, u32>,
}

impl Runtime {
    /// `edges` are (src, tool, dst, schema), sorted by (src, tool) with at
    /// most one edge per pair.
    pub fn build<'a>(
        n_states: usize,
        vocab: &BTreeSet<String>,
        edges: impl IntoIterator<Item = (usize, &'a str, usize, &'a ParamSchema)>,
    ) -> Self {
        let mut rt = Runtime {
            // Ids follow vocabulary order, so per-state runs are sorted by id.
            tool_ids: vocab.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect(),
            ..Default::default()
        };
        let mut counts = vec![0u32; n_states + 1];
        for (src, tool, dst, schema) in edges {
            counts[src + 1] += 1;
            let words = rt.words.len() as u32;
            rt.push_schema(schema);
            rt.trans.push(Trans {
                tool: rt.tool_ids[tool],
                dst: dst as u32,
                words,
                len: rt.words.len() as u32 - words,
                required: schema.required.len() as u32,
                unsatisfiable: schema.required.iter().any(|p| !schema.guards.contains_key(p)),
            });
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        rt.offsets = counts;
        rt
    }

    fn push_schema(&mut self, schema: &ParamSchema) {
        for (path, guard) in &schema.guards {
            let path_id = intern(&mut self.paths, path);
            let required = schema.required.contains(path);
            let check = match guard {
                Guard::Numeric(iv) => Check::Numeric { lo: iv.lo, hi: iv.hi },
                Guard::String(_) => Check::String,
                Guard::Categorical(set) => Check::Categorical {
                    len: set.values.len() as u32,
                },
            };
            self.words.push(Word::Slot {
                path: path_id,
                required,
                check,
            });
            if let Guard::Categorical(set) = guard {
                let mut ids: Vec<u32> = set.values.iter().map(|v| intern(&mut self.values, v)).collect();
                ids.sort_unstable();
                self.words.extend(ids.into_iter().map(Word::Value));
            }
        }
    }

    pub fn knows_tool(&self, tool: &str) -> bool {
        self.tool_ids.contains_key(tool)
    }

    /// Edge indices leaving `src`.
    pub fn range(&self, src: usize) -> Range<usize> {
        self.offsets[src] as usize..self.offsets[src + 1] as usize
    }

    pub fn step(&self, src: usize, tool: &str) -> Option<usize> {
        let id = *self.tool_ids.get(tool)?;
        let r = self.range(src);
        let run = &self.trans[r.clone()];
        let hit = if run.len() <= 8 {
            run.iter().position(|t| t.tool == id)
        } else {
            run.binary_search_by_key(&id, |t| t.tool).ok()
        };
        hit.map(|i| r.start + i)
    }

    pub fn dst(&self, edge: usize) -> usize {
        self.trans[edge].dst as usize
    }

    /// Decides `params` against edge `edge`. `Pass` and `Fail` agree with
    /// [`crate::guards::check_guard`] on the same schema.
    pub fn check(&self, edge: usize, params: &FlatParams) -> FastVerdict {
        let t = self.trans[edge];
        if t.unsatisfiable {
            return FastVerdict::Fail;
        }
        let words = &self.words[t.words as usize..(t.words + t.len) as usize];
        let mut required_seen = 0;
        let mut undecided = false;
        for (path, leaf) in &params.entries {
            let Some(&pid) = self.paths.get(path) else {
                return FastVerdict::Fail;
            };
            let Some(at) = words
                .iter()
                .position(|w| matches!(w, Word::Slot { path, .. } if *path == pid))
            else {
                return FastVerdict::Fail;
            };
            let Word::Slot { required, check, .. } = words[at] else {
                unreachable!("position matched a slot")
            };
            required_seen += required as u32;
            match (check, leaf) {
                (Check::Numeric { lo, hi }, Leaf::Number(x)) if lo <= *x && *x <= hi => {}
                (Check::Categorical { len }, leaf) => {
                    let set = &words[at + 1..at + 1 + len as usize];
                    let hit = self.values.get(&leaf.canonical()).is_some_and(|id| {
                        set.binary_search_by_key(id, |w| match w {
                            Word::Value(v) => *v,
                            Word::Slot { .. } => u32::MAX,
                        })
                        .is_ok()
                    });
                    if !hit {
                        return FastVerdict::Fail;
                    }
                }
                (Check::String, Leaf::Str(_)) => undecided = true,
                _ => return FastVerdict::Fail,
            }
        }
        if required_seen != t.required {
            FastVerdict::Fail
        } else if undecided {
            FastVerdict::Undecided
        } else {
            FastVerdict::Pass
        }
    }
}

fn intern(table: &mut HashMap<String, u32>, key: &str) -> u32 {
    if let Some(&id) = table.get(key) {
        return id;
    }
    let id = table.len() as u32;
    table.insert(key.to_owned(), id);
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::ReferenceEmbedder;
    use crate::guards::{check_guard, synthesize_schema, EdgeObservations, SensitivePolicy, SynthesisParams};
    use proptest::prelude::*;

    fn leaf() -> impl Strategy<Value = Leaf> {
        prop_oneof![
            (-30i32..30).prop_map(|n| Leaf::Number(n as f64)),
            any::<bool>().prop_map(Leaf::Bool),
            "[ab]{1,2}( [ab]{1,2}){0,2}".prop_map(Leaf::Str),
            Just(Leaf::Json("null".into())),
        ]
    }

    fn params() -> impl Strategy<Value = FlatParams> {
        prop::collection::btree_map(prop::sample::select(vec!["x", "y", "z_path", "w"]), leaf(), 0..4)
            .prop_map(|m| FlatParams {
                entries: m.into_iter().map(|(k, v)| (k.to_owned(), v)).collect(),
            })
    }

    fn runtime_for(schemas: &[ParamSchema]) -> Runtime {
        let vocab: BTreeSet<String> = (0..schemas.len()).map(|i| format!("t{i:03}")).collect();
        let names: Vec<&String> = vocab.iter().collect();
        Runtime::build(
            1,
            &vocab,
            schemas.iter().enumerate().map(|(i, s)| (0, names[i].as_str(), 0, s)),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn agrees_with_check_guard(
            observed in prop::collection::vec(prop::collection::vec(params(), 1..6), 1..4),
            probes in prop::collection::vec(params(), 1..12),
            card in 1usize..6,
        ) {
            let emb = ReferenceEmbedder::new(16);
            let policy = SensitivePolicy::new(["*_path"]).unwrap();
            let sp = SynthesisParams { eps_num: 0.1, eps_str: 0.1, cat_max_card: card, policy: &policy };
            let schemas: Vec<ParamSchema> = observed
                .iter()
                .map(|rows| {
                    let mut obs = EdgeObservations::new(8, 1);
                    rows.iter().for_each(|r| obs.observe(r));
                    synthesize_schema(&obs, &sp, &emb).0
                })
                .collect();
            let rt = runtime_for(&schemas);
            for (i, s) in schemas.iter().enumerate() {
                for p in observed[i].iter().chain(&probes) {
                    let full = check_guard(s, p, &emb).pass;
                    match rt.check(i, p) {
                        FastVerdict::Pass => prop_assert!(full),
                        FastVerdict::Fail => prop_assert!(!full),
                        FastVerdict::Undecided => prop_assert!(s.has_string_guard()),
                    }
                }
            }
        }
    }

    #[test]
    fn required_without_guard_never_passes() {
        let mut s = ParamSchema::default();
        s.required.insert("a".into());
        let rt = runtime_for(&[s]);
        assert_eq!(rt.check(0, &FlatParams::default()), FastVerdict::Fail);
    }

    #[test]
    fn wide_states_use_sorted_runs() {
        let schemas = vec![ParamSchema::default(); 40];
        let rt = runtime_for(&schemas);
        assert_eq!(rt.range(0), 0..40);
        for i in 0..40 {
            assert_eq!(rt.step(0, &format!("t{i:03}")), Some(i));
        }
        assert_eq!(rt.step(0, "nope"), None);
    }
}

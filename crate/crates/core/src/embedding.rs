//! String embeddings for parameter guards.
//!
//! The reference embedder is a signed feature-hashing bag of tokens: ASCII
//! lowercase, split on non-alphanumeric codepoints, FNV-1a 64 per token, sign
//! from the top hash bit, then L2-normalize. It needs no model files and is
//! bit-identical across platforms. An external implementation can be plugged
//! in through a process-local slot.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::warn;

pub const DEFAULT_DIMENSION: usize = 384;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("external embedder requested but none is registered")]
    ExternalUnavailable,
    #[error("external embedder returned {got} components, expected {expected}")]
    BadDimension { expected: usize, got: usize },
    #[error("embedding dimension must be at least 2, got {0}")]
    InvalidDimension(usize),
    #[error("embedding cache I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// A fixed-length vector; either zero or unit-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn zeros(dimension: usize) -> Self {
        EmbeddingVector(vec![0.0; dimension])
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }

    pub fn components(&self) -> &[f64] {
        &self.0
    }

    /// Scales to unit length; the zero vector stays zero.
    pub fn normalized(mut self) -> Self {
        let norm = self.norm();
        if norm > 0.0 {
            for x in &mut self.0 {
                *x /= norm;
            }
        }
        self
    }

    /// Rounds every component to the nearest `f32`, the precision used on disk.
    pub fn to_f32_precision(mut self) -> Self {
        for x in &mut self.0 {
            *x = *x as f32 as f64;
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedderKind {
    ReferenceHash,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedderConfig {
    pub dimension: usize,
    pub implementation: EmbedderKind,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            dimension: DEFAULT_DIMENSION,
            implementation: EmbedderKind::ReferenceHash,
        }
    }
}

impl EmbedderConfig {
    pub fn reference(dimension: usize) -> Self {
        EmbedderConfig {
            dimension,
            implementation: EmbedderKind::ReferenceHash,
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dimension < 2 {
            return Err(EmbedError::InvalidDimension(self.dimension));
        }
        Ok(())
    }
}

/// Anything that maps text to an embedding of fixed dimension.
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> EmbeddingVector;
}

#[derive(Debug, Clone, Copy)]
pub struct ReferenceEmbedder {
    dimension: usize,
}

impl ReferenceEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension >= 2, "embedding dimension must be >= 2");
        ReferenceEmbedder { dimension }
    }
}

impl Default for ReferenceEmbedder {
    fn default() -> Self {
        ReferenceEmbedder::new(DEFAULT_DIMENSION)
    }
}

impl Embedder for ReferenceEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> EmbeddingVector {
        reference_embed(text, self.dimension)
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Lowercased (ASCII only) alphanumeric runs of `text`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_ascii_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

pub fn reference_embed(text: &str, dimension: usize) -> EmbeddingVector {
    let mut v = vec![0.0f64; dimension];
    for token in tokenize(text) {
        let h = fnv1a64(token.as_bytes());
        let slot = (h % dimension as u64) as usize;
        if h >> 63 == 0 {
            v[slot] += 1.0;
        } else {
            v[slot] -= 1.0;
        }
    }
    EmbeddingVector(v).normalized()
}

type ExternalFn = Arc<dyn Fn(&str) -> Vec<f64> + Send + Sync>;

static EXTERNAL: RwLock<Option<ExternalFn>> = RwLock::new(None);

/// Installs the process-wide external embedder used by [`EmbedderKind::External`].
pub fn register_external_embedder(f: ExternalFn) {
    *EXTERNAL.write().expect("embedder slot poisoned") = Some(f);
}

pub fn clear_external_embedder() {
    *EXTERNAL.write().expect("embedder slot poisoned") = None;
}

pub fn embed(text: &str, cfg: &EmbedderConfig) -> Result<EmbeddingVector, EmbedError> {
    cfg.validate()?;
    match cfg.implementation {
        EmbedderKind::ReferenceHash => Ok(reference_embed(text, cfg.dimension)),
        EmbedderKind::External => {
            let slot = EXTERNAL.read().expect("embedder slot poisoned");
            let f = slot.as_ref().ok_or(EmbedError::ExternalUnavailable)?;
            let raw = f(text);
            if raw.len() != cfg.dimension {
                return Err(EmbedError::BadDimension {
                    expected: cfg.dimension,
                    got: raw.len(),
                });
            }
            Ok(EmbeddingVector(raw).normalized())
        }
    }
}

/// Builds a boxed embedder for a config, failing if it cannot be served.
pub fn embedder_for(cfg: &EmbedderConfig) -> Result<Box<dyn Embedder>, EmbedError> {
    cfg.validate()?;
    match cfg.implementation {
        EmbedderKind::ReferenceHash => Ok(Box::new(ReferenceEmbedder::new(cfg.dimension))),
        EmbedderKind::External => {
            if EXTERNAL.read().expect("embedder slot poisoned").is_none() {
                return Err(EmbedError::ExternalUnavailable);
            }
            Ok(Box::new(ExternalEmbedder {
                dimension: cfg.dimension,
            }))
        }
    }
}

struct ExternalEmbedder {
    dimension: usize,
}

impl Embedder for ExternalEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> EmbeddingVector {
        embed(text, &EmbedderConfig {
            dimension: self.dimension,
            implementation: EmbedderKind::External,
        })
        .unwrap_or_else(|e| {
            warn!("external embedder failed: {e}; using zero vector");
            EmbeddingVector::zeros(self.dimension)
        })
    }
}

/// `1 - cos(a, b)`, clamped to `[0, 2]`. Zero-norm inputs give 1.0.
///
/// Panics if the dimensions differ.
pub fn cosine_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    assert_eq!(
        a.dimension(),
        b.dimension(),
        "cosine_distance: dimension mismatch"
    );
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

/// Content-addressed on-disk store: one file per string, named by the
/// SHA-256 of its bytes, holding `d` little-endian `f32`s.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    dir: PathBuf,
}

impl EmbeddingCache {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, EmbedError> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(EmbeddingCache {
            dir: dir.as_ref().to_path_buf(),
        })
    }

    pub fn key(text: &str) -> String {
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn path_for(&self, text: &str) -> PathBuf {
        self.dir.join(Self::key(text))
    }

    fn read(&self, path: &Path, dimension: usize) -> Option<EmbeddingVector> {
        let bytes = fs::read(path).ok()?;
        if bytes.len() != dimension * 4 {
            warn!(path = %path.display(), "embedding cache entry has wrong size; recomputing");
            return None;
        }
        let v = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect::<Vec<_>>();
        if v.iter().any(|x| !x.is_finite()) {
            warn!(path = %path.display(), "embedding cache entry is corrupt; recomputing");
            return None;
        }
        Some(EmbeddingVector(v))
    }

    fn write(&self, path: &Path, v: &EmbeddingVector) -> Result<(), EmbedError> {
        let bytes: Vec<u8> = v.0.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
        // temp file + rename keeps concurrent writers of one key from tearing
        let tmp = self.dir.join(format!(
            ".{}.{}.tmp",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("entry"),
            std::process::id()
        ));
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_data()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Returns the cached vector for `text`, computing and persisting it on a
/// miss. Results are always at `f32` precision so hits and misses agree.
pub fn cached_embed(
    text: &str,
    cfg: &EmbedderConfig,
    cache: &EmbeddingCache,
) -> Result<EmbeddingVector, EmbedError> {
    let path = cache.path_for(text);
    if path.exists() {
        if let Some(v) = cache.read(&path, cfg.dimension) {
            return Ok(v);
        }
    }
    let v = embed(text, cfg)?.to_f32_precision();
    cache.write(&path, &v)?;
    Ok(v)
}

/// An [`Embedder`] that goes through an [`EmbeddingCache`].
pub struct CachedEmbedder {
    cfg: EmbedderConfig,
    cache: EmbeddingCache,
}

impl CachedEmbedder {
    pub fn new(cfg: EmbedderConfig, cache: EmbeddingCache) -> Result<Self, EmbedError> {
        embedder_for(&cfg)?;
        Ok(CachedEmbedder { cfg, cache })
    }
}

impl Embedder for CachedEmbedder {
    fn dimension(&self) -> usize {
        self.cfg.dimension
    }

    fn embed(&self, text: &str) -> EmbeddingVector {
        cached_embed(text, &self.cfg, &self.cache).unwrap_or_else(|e| {
            warn!("embedding cache unavailable ({e}); computing directly");
            embed(text, &self.cfg)
                .map(EmbeddingVector::to_f32_precision)
                .unwrap_or_else(|_| EmbeddingVector::zeros(self.cfg.dimension))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_is_zero() {
        let v = reference_embed("", 384);
        assert_eq!(v.dimension(), 384);
        assert!(v.is_zero());
        assert!(reference_embed(" --- !!", 16).is_zero());
    }

    #[test]
    fn deterministic() {
        assert_eq!(reference_embed("refund order", 384), reference_embed("refund order", 384));
    }

    #[test]
    fn case_and_whitespace_fold() {
        // Both inputs tokenize to ["refund", "order"].
        assert_eq!(tokenize("refund order"), vec!["refund", "order"]);
        assert_eq!(tokenize("REFUND   order"), vec!["refund", "order"]);
        assert_eq!(
            reference_embed("refund order", 384),
            reference_embed("REFUND   order", 384)
        );
    }

    #[test]
    fn fnv_known_vectors() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn single_token_hits_one_slot() {
        let d = 384;
        let h = fnv1a64(b"refund");
        let v = reference_embed("Refund", d);
        let slot = (h % d as u64) as usize;
        let expected = if h >> 63 == 0 { 1.0 } else { -1.0 };
        assert_eq!(v.0[slot], expected);
        assert_eq!(v.0.iter().filter(|x| **x != 0.0).count(), 1);
    }

    #[test]
    fn cosine_cases() {
        let v = reference_embed("send the summary", 64);
        assert!(cosine_distance(&v, &v).abs() < 1e-12);
        let neg = EmbeddingVector(v.0.iter().map(|x| -x).collect());
        assert!((cosine_distance(&v, &neg) - 2.0).abs() < 1e-12);
        assert_eq!(cosine_distance(&EmbeddingVector::zeros(64), &v), 1.0);
        assert_eq!(cosine_distance(&v, &EmbeddingVector::zeros(64)), 1.0);
    }

    #[test]
    #[should_panic(expected = "dimension mismatch")]
    fn cosine_dimension_mismatch_panics() {
        cosine_distance(&EmbeddingVector::zeros(3), &EmbeddingVector::zeros(4));
    }

    #[test]
    fn external_unavailable_is_config_error() {
        clear_external_embedder();
        let cfg = EmbedderConfig {
            dimension: 8,
            implementation: EmbedderKind::External,
        };
        assert!(matches!(embed("x", &cfg), Err(EmbedError::ExternalUnavailable)));
        assert!(EmbedderConfig::reference(1).validate().is_err());
    }

    #[test]
    fn cache_roundtrip_and_recovery() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::open(dir.path()).unwrap();
        let cfg = EmbedderConfig::reference(32);

        let a = cached_embed("refund my order", &cfg, &cache).unwrap();
        let path = cache.path_for("refund my order");
        let stamp = fs::metadata(&path).unwrap().modified().unwrap();
        let b = cached_embed("refund my order", &cfg, &cache).unwrap();
        assert_eq!(a, b);
        assert_eq!(fs::metadata(&path).unwrap().modified().unwrap(), stamp);

        fs::remove_file(&path).unwrap();
        assert_eq!(cached_embed("refund my order", &cfg, &cache).unwrap(), a);

        fs::write(&path, b"garbage").unwrap();
        assert_eq!(cached_embed("refund my order", &cfg, &cache).unwrap(), a);
        assert_eq!(fs::read(&path).unwrap().len(), 32 * 4);

        assert_ne!(EmbeddingCache::key("a"), EmbeddingCache::key("b"));
    }

    #[test]
    fn colliding_tokens_can_cancel() {
        let (a, b) = (fnv1a64(b"mxo7c"), fnv1a64(b"bx"));
        assert_eq!(a % 384, b % 384);
        assert_ne!(a >> 63, b >> 63);
        assert!(reference_embed("MXo7c_bx", 384).is_zero());
    }

    proptest! {
        #[test]
        fn unit_norm_or_zero(text in "[a-zA-Z0-9 ,.!_-]{0,60}") {
            let v = reference_embed(&text, 384);
            if tokenize(&text).is_empty() {
                prop_assert!(v.is_zero());
            } else {
                // Opposite-signed tokens in one bucket can cancel to zero.
                prop_assert!(v.is_zero() || (v.norm() - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn cosine_symmetric(a in "[a-z ]{0,30}", b in "[a-z ]{0,30}") {
            let va = reference_embed(&a, 64);
            let vb = reference_embed(&b, 64);
            prop_assert_eq!(cosine_distance(&va, &vb), cosine_distance(&vb, &va));
            let d = cosine_distance(&va, &vb);
            prop_assert!((0.0..=2.0).contains(&d));
        }
    }
}

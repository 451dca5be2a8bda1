//! Text embeddings, cosine similarity and the mapping from cosine to a
//! relevance score in `[0, 1]`.
//!
//! Two providers are available. The builtin one is a seeded signed feature-hashing
//! embedder: fully offline and bit-reproducible. The HTTP one talks to an
//! OpenAI-compatible `/embeddings` endpoint. Both go through an optional
//! content-addressed on-disk cache.

use std::fs;
use std::io::{self, Read};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canon::{fmt_sig, sha256_hex, write_atomic, SIG_DIGITS};
use crate::records::Record;

pub const DEFAULT_DIM: usize = 256;
pub const DEFAULT_BUILTIN_MODEL: &str = "lprisma-hash-v1";
/// Character limit for texts sent to an HTTP provider.
pub const HTTP_MAX_CHARS: usize = 8192;
pub const EMBED_TOKEN_ENV: &str = "LPRISMA_EMBED_TOKEN";
const HTTP_BATCH: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("text is empty")]
    EmptyText,
    #[error("embedding endpoint returned HTTP {status}: {body}")]
    HttpError { status: u16, body: String },
    #[error("embedding request failed: {0}")]
    Transport(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("cosine {0} is outside [-1, 1]")]
    OutOfRangeInput(f64),
    #[error("invalid provider config: {0}")]
    InvalidConfig(String),
    #[error("embedding cache: {0}")]
    Cache(String),
}

/// The review intent statement every record is compared against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentStatement {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refinement_log: Option<Vec<Refinement>>,
}

/// One tool-assisted rewrite of the intent statement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Refinement {
    pub tool_name: String,
    pub prompt: String,
    pub resulting_text: String,
}

impl IntentStatement {
    pub fn new(text: impl Into<String>) -> Result<Self, EmbedError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        Ok(IntentStatement { text, refinement_log: None })
    }

    /// Replaces the text and appends the step to the refinement log.
    pub fn refine(&mut self, tool_name: &str, prompt: &str, resulting_text: &str) -> Result<(), EmbedError> {
        if resulting_text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        self.refinement_log.get_or_insert_with(Vec::new).push(Refinement {
            tool_name: tool_name.to_string(),
            prompt: prompt.to_string(),
            resulting_text: resulting_text.to_string(),
        });
        self.text = resulting_text.to_string();
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub dim: usize,
    pub unit_norm: bool,
}

impl EmbeddingVector {
    /// Wraps raw values, L2-normalizing them. An all-zero input stays zero and is
    /// flagged with `unit_norm = false`.
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let unit_norm = norm > 0.0;
        if unit_norm {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector { dim: values.len(), values, unit_norm }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Builtin,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMapping {
    /// `(c + 1) / 2`
    #[default]
    Affine,
    /// `max(0, c)`
    Clamp,
}

impl FromStr for ScoreMapping {
    type Err = EmbedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "affine" => Ok(ScoreMapping::Affine),
            "clamp" => Ok(ScoreMapping::Clamp),
            other => Err(EmbedError::InvalidConfig(format!("unknown score mapping `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub model_id: String,
    #[serde(default)]
    pub endpoint: Option<String>,
    pub dim: usize,
    pub seed: u64,
    #[serde(default)]
    pub score_mapping: ScoreMapping,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Builtin,
            model_id: DEFAULT_BUILTIN_MODEL.to_string(),
            endpoint: None,
            dim: DEFAULT_DIM,
            seed: 0,
            score_mapping: ScoreMapping::Affine,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dim == 0 {
            return Err(EmbedError::InvalidConfig("dim must be positive".into()));
        }
        if self.model_id.trim().is_empty() {
            return Err(EmbedError::InvalidConfig("model_id is empty".into()));
        }
        if self.kind == ProviderKind::Http && self.endpoint.as_deref().is_none_or(|e| e.trim().is_empty()) {
            return Err(EmbedError::InvalidConfig("http provider requires an endpoint".into()));
        }
        Ok(())
    }

    /// Cache namespace: everything besides the text that determines the vector.
    pub fn cache_namespace(&self) -> String {
        match self.kind {
            ProviderKind::Builtin => format!("builtin|{}|dim={}|seed={}", self.model_id, self.dim, self.seed),
            ProviderKind::Http => format!("http|{}|dim={}", self.model_id, self.dim),
        }
    }
}

// Builtin hashing embedder

/// Seeded 64-bit token hash: FNV-1a over `seed (LE) ++ token`, then the
/// SplitMix64 finalizer for avalanche.
pub fn token_hash(seed: u64, token: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes().iter().chain(token.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

/// Signed term-frequency feature hashing into `dim` buckets, then L2 normalization.
/// Bucket is `hash % dim`; the top hash bit selects the sign.
pub fn builtin_embed(text: &str, dim: usize, seed: u64) -> Result<EmbeddingVector, EmbedError> {
    if text.trim().is_empty() {
        return Err(EmbedError::EmptyText);
    }
    if dim == 0 {
        return Err(EmbedError::InvalidConfig("dim must be positive".into()));
    }
    let mut values = vec![0.0f64; dim];
    for token in tokenize(text) {
        let h = token_hash(seed, &token);
        let bucket = (h % dim as u64) as usize;
        values[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
    }
    Ok(EmbeddingVector::normalized(values))
}

/// `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.values.len() != b.values.len() {
        return Err(EmbedError::DimensionMismatch { expected: a.values.len(), actual: b.values.len() });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.values.iter().zip(&b.values) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

pub fn map_score(cosine: f64, mapping: ScoreMapping) -> Result<f64, EmbedError> {
    if !(-1.0..=1.0).contains(&cosine) {
        return Err(EmbedError::OutOfRangeInput(cosine));
    }
    Ok(match mapping {
        ScoreMapping::Affine => ((cosine + 1.0) / 2.0).clamp(0.0, 1.0),
        ScoreMapping::Clamp => cosine.max(0.0),
    })
}

// Cache

/// Content-addressed embedding store: one little-endian `f64` file per key.
#[derive(Debug)]
pub struct EmbeddingCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl EmbeddingCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        EmbeddingCache { dir: dir.into(), write_lock: Mutex::new(()) }
    }

    pub fn key(namespace: &str, text: &str) -> String {
        let mut buf = Vec::with_capacity(namespace.len() + text.len() + 1);
        buf.extend_from_slice(namespace.as_bytes());
        buf.push(0);
        buf.extend_from_slice(text.as_bytes());
        sha256_hex(&buf)
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.f64"))
    }

    pub fn get(&self, key: &str) -> Result<Option<EmbeddingVector>, EmbedError> {
        let bytes = match fs::read(self.path(key)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(EmbedError::Cache(e.to_string())),
        };
        if bytes.len() % 8 != 0 {
            return Err(EmbedError::Cache(format!("corrupt entry {key}")));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(Some(EmbeddingVector { dim: values.len(), unit_norm: (norm - 1.0).abs() < 1e-9, values }))
    }

    pub fn put(&self, key: &str, v: &EmbeddingVector) -> Result<(), EmbedError> {
        let bytes: Vec<u8> = v.values.iter().flat_map(|x| x.to_le_bytes()).collect();
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        write_atomic(&self.path(key), &bytes).map_err(|e| EmbedError::Cache(e.to_string()))
    }
}

// Provider front end

pub struct Embedder {
    cfg: ProviderConfig,
    cache: Option<EmbeddingCache>,
    http: Option<reqwest::blocking::Client>,
}

#[derive(Serialize)]
struct EmbeddingsRequest<'a> {
    model: &'a str,
    input: Vec<&'a str>,
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f64>,
}

impl Embedder {
    pub fn new(cfg: ProviderConfig, cache: Option<EmbeddingCache>) -> Result<Self, EmbedError> {
        cfg.validate()?;
        let http = match cfg.kind {
            ProviderKind::Builtin => None,
            ProviderKind::Http => Some(
                reqwest::blocking::Client::builder()
                    .timeout(Duration::from_secs(120))
                    .build()
                    .map_err(|e| EmbedError::Transport(e.to_string()))?,
            ),
        };
        Ok(Embedder { cfg, cache, http })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.cfg
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        self.embed_many(&[text]).pop().expect("one result per input")
    }

    /// Embeds every text; the result vector is aligned with the input.
    pub fn embed_many(&self, texts: &[&str]) -> Vec<Result<EmbeddingVector, EmbedError>> {
        let ns = self.cfg.cache_namespace();
        let prepared: Vec<String> = texts.iter().map(|t| self.prepare(t)).collect();
        let mut results: Vec<Option<Result<EmbeddingVector, EmbedError>>> = prepared
            .iter()
            .map(|t| {
                if t.trim().is_empty() {
                    return Some(Err(EmbedError::EmptyText));
                }
                match &self.cache {
                    Some(c) => c.get(&EmbeddingCache::key(&ns, t)).transpose(),
                    None => None,
                }
            })
            .collect();

        let missing: Vec<usize> = (0..prepared.len()).filter(|&i| results[i].is_none()).collect();
        let computed: Vec<(usize, Result<EmbeddingVector, EmbedError>)> = match self.cfg.kind {
            ProviderKind::Builtin => missing
                .par_iter()
                .map(|&i| (i, builtin_embed(&prepared[i], self.cfg.dim, self.cfg.seed)))
                .collect(),
            ProviderKind::Http => missing
                .chunks(HTTP_BATCH)
                .flat_map(|chunk| {
                    let batch: Vec<&str> = chunk.iter().map(|&i| prepared[i].as_str()).collect();
                    match self.request_batch(&batch) {
                        Ok(vs) => chunk.iter().copied().zip(vs.into_iter().map(Ok)).collect::<Vec<_>>(),
                        Err(e) => chunk.iter().map(|&i| (i, Err(e.clone()))).collect(),
                    }
                })
                .collect(),
        };
        for (i, res) in computed {
            let res = res.and_then(|v| {
                if let Some(c) = &self.cache {
                    c.put(&EmbeddingCache::key(&ns, &prepared[i]), &v)?;
                }
                Ok(v)
            });
            results[i] = Some(res);
        }
        results.into_iter().map(|r| r.expect("every slot filled")).collect()
    }

    fn prepare(&self, text: &str) -> String {
        match self.cfg.kind {
            ProviderKind::Builtin => text.to_string(),
            ProviderKind::Http => text.chars().take(HTTP_MAX_CHARS).collect(),
        }
    }

    fn request_batch(&self, batch: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let client = self.http.as_ref().expect("http client for http provider");
        let endpoint = self.cfg.endpoint.as_deref().expect("validated endpoint");
        let mut req = client
            .post(endpoint)
            .json(&EmbeddingsRequest { model: &self.cfg.model_id, input: batch.to_vec() });
        if let Ok(token) = std::env::var(EMBED_TOKEN_ENV) {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| EmbedError::Transport(e.to_string()))?;
        let status = resp.status();
        let mut body = String::new();
        resp.take(4 << 20).read_to_string(&mut body).map_err(|e| EmbedError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(EmbedError::HttpError { status: status.as_u16(), body: excerpt(&body) });
        }
        let mut parsed: EmbeddingsResponse = serde_json::from_str(&body)
            .map_err(|e| EmbedError::HttpError { status: status.as_u16(), body: format!("{e}: {}", excerpt(&body)) })?;
        parsed.data.sort_by_key(|d| d.index);
        if parsed.data.len() != batch.len() || parsed.data.iter().enumerate().any(|(i, d)| d.index != i) {
            return Err(EmbedError::HttpError {
                status: status.as_u16(),
                body: format!("expected {} embeddings, got {}", batch.len(), parsed.data.len()),
            });
        }
        parsed
            .data
            .into_iter()
            .map(|d| {
                if d.embedding.len() != self.cfg.dim {
                    return Err(EmbedError::DimensionMismatch { expected: self.cfg.dim, actual: d.embedding.len() });
                }
                Ok(EmbeddingVector::normalized(d.embedding))
            })
            .collect()
    }
}

fn excerpt(body: &str) -> String {
    body.chars().take(200).collect()
}

// Scoring

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub record_id: String,
    pub cosine: f64,
    pub s: f64,
    pub provider: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFailure {
    pub record_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreOutcome {
    /// Sorted by `record_id`.
    pub scores: Vec<SimilarityScore>,
    pub failures: Vec<ScoreFailure>,
}

/// Scores each record's title+abstract against the intent statement.
/// Fails as a whole only when the intent statement itself cannot be embedded.
pub fn score_corpus(
    embedder: &Embedder,
    intent: &IntentStatement,
    records: &[Record],
) -> Result<ScoreOutcome, EmbedError> {
    let intent_vec = embedder.embed(&intent.text)?;
    if !intent_vec.unit_norm {
        return Err(EmbedError::ZeroVector);
    }
    let texts: Vec<String> = records.iter().map(Record::text).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let vectors = embedder.embed_many(&refs);

    let cfg = embedder.config();
    let mut out = ScoreOutcome::default();
    for (rec, v) in records.iter().zip(vectors) {
        let scored = v.and_then(|v| cosine(&intent_vec, &v)).and_then(|c| Ok((c, map_score(c, cfg.score_mapping)?)));
        match scored {
            Ok((c, s)) => out.scores.push(SimilarityScore {
                record_id: rec.id.clone(),
                cosine: c,
                s,
                provider: cfg.model_id.clone(),
            }),
            Err(e) => out.failures.push(ScoreFailure { record_id: rec.id.clone(), error: e.to_string() }),
        }
    }
    out.scores.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    out.failures.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    Ok(out)
}

// Score file: CSV `record_id,cosine,s,provider`, 12 significant digits.

pub fn write_scores_csv(scores: &[SimilarityScore]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(["record_id", "cosine", "s", "provider"]).expect("in-memory write");
    for sc in scores {
        w.write_record([
            sc.record_id.as_str(),
            &fmt_sig(sc.cosine, SIG_DIGITS),
            &fmt_sig(sc.s, SIG_DIGITS),
            sc.provider.as_str(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn read_scores_csv(bytes: &[u8]) -> Result<Vec<SimilarityScore>, String> {
    let mut r = csv::Reader::from_reader(bytes);
    let headers = r.headers().map_err(|e| e.to_string())?.clone();
    if headers.iter().collect::<Vec<_>>() != ["record_id", "cosine", "s", "provider"] {
        return Err(format!("unexpected score file header: {headers:?}"));
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| e.to_string())?;
        let num = |i: usize| -> Result<f64, String> {
            row[i].parse::<f64>().map_err(|e| format!("row {:?}: {e}", row.position().map(|p| p.line())))
        };
        out.push(SimilarityScore {
            record_id: row[0].to_string(),
            cosine: num(1)?,
            s: num(2)?,
            provider: row[3].to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_of(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector { values: values.to_vec(), dim: values.len(), unit_norm: false }
    }

    #[test]
    fn builtin_is_deterministic_and_unit_norm() {
        let a = builtin_embed("semantic similarity", 256, 42).unwrap();
        let b = builtin_embed("semantic similarity", 256, 42).unwrap();
        assert_eq!(
            a.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        for text in ["x", "Automated grading of short answers", "a a a a b"] {
            let v = builtin_embed(text, 256, 7).unwrap();
            assert!((v.norm() - 1.0).abs() < 1e-9);
            assert!(v.unit_norm);
        }
    }

    #[test]
    fn builtin_rejects_empty_and_flags_tokenless_text() {
        assert_eq!(builtin_embed("   ", 256, 1), Err(EmbedError::EmptyText));
        let v = builtin_embed("!!! ---", 256, 1).unwrap();
        assert!(!v.unit_norm);
        assert!(v.values.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn cosine_identities() {
        let v = vec_of(&[0.3, -1.2, 2.0]);
        let neg = vec_of(&[-0.3, 1.2, -2.0]);
        assert_eq!(cosine(&v, &v).unwrap(), 1.0);
        assert_eq!(cosine(&v, &neg).unwrap(), -1.0);
        assert_eq!(cosine(&v, &vec_of(&[0.0, 0.0, 0.0])), Err(EmbedError::ZeroVector));
        assert_eq!(
            cosine(&v, &vec_of(&[1.0])),
            Err(EmbedError::DimensionMismatch { expected: 3, actual: 1 })
        );
    }

    #[test]
    fn score_mapping_endpoints() {
        assert_eq!(map_score(1.0, ScoreMapping::Affine).unwrap(), 1.0);
        assert_eq!(map_score(-1.0, ScoreMapping::Affine).unwrap(), 0.0);
        assert_eq!(map_score(0.0, ScoreMapping::Affine).unwrap(), 0.5);
        assert_eq!(map_score(-0.3, ScoreMapping::Clamp).unwrap(), 0.0);
        assert_eq!(map_score(0.4, ScoreMapping::Clamp).unwrap(), 0.4);
        assert_eq!(map_score(1.5, ScoreMapping::Affine), Err(EmbedError::OutOfRangeInput(1.5)));
        assert!(map_score(f64::NAN, ScoreMapping::Clamp).is_err());
    }

    #[test]
    fn provider_validation() {
        let mut cfg = ProviderConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.kind = ProviderKind::Http;
        assert!(cfg.validate().is_err());
        cfg.endpoint = Some("http://localhost:1/v1/embeddings".into());
        assert!(cfg.validate().is_ok());
        cfg.dim = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn intent_refinement_is_append_only() {
        let mut intent = IntentStatement::new("grading").unwrap();
        intent.refine("ChatGPT", "improve", "automated grading").unwrap();
        intent.refine("Claude", "shorten", "auto grading").unwrap();
        let log = intent.refinement_log.as_ref().unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(log[0].resulting_text, "automated grading");
        assert_eq!(intent.text, "auto grading");
        assert!(IntentStatement::new(" ").is_err());
    }

    #[test]
    fn cache_hit_is_bitwise_equal() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ProviderConfig { seed: 9, ..Default::default() };
        let first = Embedder::new(cfg.clone(), Some(EmbeddingCache::new(dir.path()))).unwrap();
        let a = first.embed("cached text, please").unwrap();
        let key = EmbeddingCache::key(&cfg.cache_namespace(), "cached text, please");
        let cached = EmbeddingCache::new(dir.path()).get(&key).unwrap().unwrap();
        assert_eq!(
            a.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            cached.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let again = Embedder::new(cfg, Some(EmbeddingCache::new(dir.path()))).unwrap().embed("cached text, please").unwrap();
        assert_eq!(again, a);
    }

    #[test]
    fn score_file_round_trip_at_twelve_digits() {
        let scores = vec![SimilarityScore {
            record_id: "ab".into(),
            cosine: 1.0 / 3.0,
            s: 2.0 / 3.0,
            provider: "m,1".into(),
        }];
        let bytes = write_scores_csv(&scores);
        assert_eq!(
            String::from_utf8(bytes.clone()).unwrap(),
            "record_id,cosine,s,provider\nab,0.333333333333,0.666666666667,\"m,1\"\n"
        );
        let back = read_scores_csv(&bytes).unwrap();
        assert_eq!(back[0].provider, "m,1");
        assert!((back[0].s - 2.0 / 3.0).abs() < 1e-12);
    }
}

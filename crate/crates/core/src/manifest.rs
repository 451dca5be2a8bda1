//! Canonical, self-hashing reproducibility manifest for a run directory.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canon::{canonical_json, canonical_value, sha256_hex};
use crate::embed::{IntentStatement, ProviderConfig};
use crate::mixture::{BoundaryRule, Cutoffs, EmOptions, GmmParams};
use crate::records::QuerySpec;
use crate::screenai::{LlmConfig, ScreenSettings};
use crate::triage::TriageCounts;

pub const MANIFEST_FILE: &str = "lprisma-manifest.json";
/// Directory inside a run directory that holds disposable caches.
pub const CACHE_DIR: &str = "cache";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("stage `{0}` has not completed")]
    MissingStage(&'static str),
    #[error("cannot hash run directory: {0}")]
    Io(#[from] io::Error),
    #[error("manifest serialization: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Options that affect results and are not already part of another manifest
/// field, each as recorded by the stage that used it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub fit: EmOptions,
    pub bins: usize,
    pub screening: Option<ScreenSettings>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateHash {
    pub template_id: String,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub created_at: String,
    pub queries: Vec<QuerySpec>,
    pub intent: IntentStatement,
    pub provider: ProviderConfig,
    pub gmm: GmmParams,
    pub rule: BoundaryRule,
    pub cutoffs: Cutoffs,
    pub triage_counts: TriageCounts,
    pub llm: Option<LlmConfig>,
    pub criteria_hash: Option<String>,
    pub prompt_template_hashes: Vec<TemplateHash>,
    pub input_hashes: BTreeMap<String, String>,
    pub master_seed: u64,
    pub settings: RunSettings,
    /// SHA-256 of the canonical form of every other field.
    #[serde(default)]
    pub self_hash: String,
}

impl RunManifest {
    pub fn compute_self_hash(&self) -> Result<String, ManifestError> {
        let mut v = serde_json::to_value(self)?;
        Ok(self_hash_of(&mut v))
    }

    /// Canonical bytes, LF-terminated.
    pub fn to_canonical_bytes(&self) -> Result<Vec<u8>, ManifestError> {
        let mut s = canonical_json(self)?;
        s.push('\n');
        Ok(s.into_bytes())
    }
}

fn self_hash_of(v: &mut Value) -> String {
    if let Value::Object(map) = v {
        map.remove("self_hash");
    }
    sha256_hex(canonical_value(v).as_bytes())
}

/// Run state gathered from the stage outputs. `None` marks a stage that has not run.
#[derive(Debug, Clone, Default)]
pub struct ManifestParts {
    pub tool_version: String,
    pub created_at: String,
    pub queries: Option<Vec<QuerySpec>>,
    pub intent: Option<IntentStatement>,
    pub provider: Option<ProviderConfig>,
    pub gmm: Option<GmmParams>,
    pub cutoffs: Option<Cutoffs>,
    pub triage_counts: Option<TriageCounts>,
    pub llm: Option<LlmConfig>,
    pub criteria_hash: Option<String>,
    pub prompt_template_hashes: Vec<TemplateHash>,
    pub input_hashes: BTreeMap<String, String>,
    pub master_seed: u64,
    pub settings: Option<RunSettings>,
}

pub fn build_manifest(parts: ManifestParts) -> Result<RunManifest, ManifestError> {
    let cutoffs = parts.cutoffs.ok_or(ManifestError::MissingStage("cutoffs"))?;
    let mut m = RunManifest {
        tool_version: parts.tool_version,
        created_at: parts.created_at,
        queries: parts.queries.ok_or(ManifestError::MissingStage("ingest"))?,
        intent: parts.intent.ok_or(ManifestError::MissingStage("score"))?,
        provider: parts.provider.ok_or(ManifestError::MissingStage("score"))?,
        gmm: parts.gmm.ok_or(ManifestError::MissingStage("fit"))?,
        rule: cutoffs.rule,
        cutoffs,
        triage_counts: parts.triage_counts.ok_or(ManifestError::MissingStage("partition"))?,
        llm: parts.llm,
        criteria_hash: parts.criteria_hash,
        prompt_template_hashes: parts.prompt_template_hashes,
        input_hashes: parts.input_hashes,
        master_seed: parts.master_seed,
        settings: parts.settings.ok_or(ManifestError::MissingStage("fit"))?,
        self_hash: String::new(),
    };
    m.self_hash = m.compute_self_hash()?;
    Ok(m)
}

/// Timestamp for a manifest: `SOURCE_DATE_EPOCH` when set, else the latest
/// query execution date, so reruns over the same inputs agree byte for byte.
pub fn created_at(queries: &[QuerySpec]) -> String {
    if let Some(ts) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse::<i64>().ok())
        .and_then(|secs| chrono::DateTime::from_timestamp(secs, 0))
    {
        return ts.format("%Y-%m-%dT%H:%M:%SZ").to_string();
    }
    match queries.iter().map(|q| q.executed_on.as_str()).max() {
        Some(d) => format!("{d}T00:00:00Z"),
        None => "1970-01-01T00:00:00Z".to_string(),
    }
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn excluded(rel: &str) -> bool {
    rel == MANIFEST_FILE
        || rel == CACHE_DIR
        || rel.starts_with(&format!("{CACHE_DIR}/"))
        || rel.split('/').any(|part| part.starts_with('.'))
}

/// Content hash of every file in `dir`, keyed by `/`-separated relative path.
/// The manifest itself, dot-files (lock, temp files) and the cache directory are skipped.
pub fn hash_run_dir(dir: &Path) -> Result<BTreeMap<String, String>, ManifestError> {
    let mut out = BTreeMap::new();
    let walker = walkdir::WalkDir::new(dir).min_depth(1).into_iter().filter_entry(|e| !excluded(&relative(dir, e.path())));
    for entry in walker {
        let entry = entry.map_err(io::Error::from)?;
        if entry.file_type().is_file() {
            out.insert(relative(dir, entry.path()), sha256_hex(&fs::read(entry.path())?));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryStatus {
    Pass,
    Fail,
    Absent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationEntry {
    pub name: String,
    pub status: EntryStatus,
    pub expected: String,
    pub actual: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub entries: Vec<VerificationEntry>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.status == EntryStatus::Pass)
    }

    pub fn failures(&self) -> Vec<&VerificationEntry> {
        self.entries.iter().filter(|e| e.status != EntryStatus::Pass).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| {
                let status = match e.status {
                    EntryStatus::Pass => "PASS",
                    EntryStatus::Fail => "FAIL",
                    EntryStatus::Absent => "ABSENT",
                };
                format!("{status:<6} {}\n", e.name)
            })
            .collect()
    }
}

pub const SELF_HASH_ENTRY: &str = "self_hash";

/// Recomputes the self-hash and every input hash. Never fails: problems become entries.
pub fn verify_manifest(manifest_path: &Path, dir: &Path) -> VerificationReport {
    let mut entries = Vec::new();
    let bytes = match fs::read(manifest_path) {
        Ok(b) => b,
        Err(_) => {
            entries.push(VerificationEntry {
                name: MANIFEST_FILE.into(),
                status: EntryStatus::Absent,
                expected: String::new(),
                actual: None,
            });
            return VerificationReport { entries };
        }
    };
    let mut value: Value = match serde_json::from_slice(&bytes) {
        Ok(v) => v,
        Err(e) => {
            entries.push(VerificationEntry {
                name: MANIFEST_FILE.into(),
                status: EntryStatus::Fail,
                expected: "valid JSON".into(),
                actual: Some(e.to_string()),
            });
            return VerificationReport { entries };
        }
    };
    let recorded = value.get("self_hash").and_then(Value::as_str).unwrap_or_default().to_string();
    let canonical = format!("{}\n", canonical_value(&value)).into_bytes() == bytes;
    let inputs: BTreeMap<String, String> = value
        .get("input_hashes")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default();
    let recomputed = self_hash_of(&mut value);
    entries.push(VerificationEntry {
        name: SELF_HASH_ENTRY.into(),
        status: if canonical && recomputed == recorded { EntryStatus::Pass } else { EntryStatus::Fail },
        expected: recorded,
        actual: Some(if canonical { recomputed } else { format!("{recomputed} (not in canonical form)") }),
    });
    for (name, expected) in inputs {
        let entry = match fs::read(dir.join(&name)) {
            Ok(b) => {
                let actual = sha256_hex(&b);
                VerificationEntry {
                    status: if actual == expected { EntryStatus::Pass } else { EntryStatus::Fail },
                    name,
                    expected,
                    actual: Some(actual),
                }
            }
            Err(_) => VerificationEntry { name, status: EntryStatus::Absent, expected, actual: None },
        };
        entries.push(entry);
    }
    VerificationReport { entries }
}

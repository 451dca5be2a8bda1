//! Stage orchestration over a run directory.
//!
//! Each stage reads its inputs from files written by earlier stages and writes
//! its outputs atomically, so a run directory is always a consistent,
//! inspectable record of how far a review has progressed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, ErrorKind};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::canon::write_atomic;
use crate::embed::{read_scores_csv, score_corpus, write_scores_csv, Embedder, EmbeddingCache, IntentStatement, ProviderConfig, ScoreFailure};
use crate::flow::{build_flow, export_histogram, export_pdf_curve, render_flow, FlowError, FlowInputs, PrescreenLosses, RenderFormat, ScreeningTallies};
use crate::manifest::{build_manifest, created_at, hash_run_dir, verify_manifest, ManifestParts, RunSettings, TemplateHash, VerificationReport, CACHE_DIR, MANIFEST_FILE};
use crate::mixture::{derive_cutoffs, fit_em, BoundaryRule, Cutoffs, EmOptions, GmmParams, CURVE_POINTS};
use crate::records::{dedupe, normalize, parse, read_jsonl, write_jsonl, DuplicateReport, Format, QuerySpec, Record};
use crate::screenai::{
    approve, bundles_for_bin, covers_genai_bin, reject, template_hash, EligibilityCriteria, LlmConfig, Moderation, ResponseStore,
    ScreenClient, ScreenSettings, ScreeningVerdict, DEFAULT_CONCURRENCY, DEFAULT_SUMMARY_STYLE, TEMPLATE_IDS,
};
use crate::triage::{apply_overrides, override_bin, partition, Bin, Override, TriageResult};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const LOCK_FILE: &str = ".lprisma.lock";

pub const STAGES: [&str; 10] =
    ["ingest", "dedupe", "score", "fit", "cutoffs", "partition", "flow", "screen", "manifest", "verify"];

/// File names inside a run directory.
pub mod files {
    pub const QUERIES: &str = "queries.json";
    pub const INTENT: &str = "intent.json";
    pub const CRITERIA: &str = "criteria.json";
    pub const SCREENING: &str = "screening.json";
    pub const OVERRIDES: &str = "overrides.jsonl";

    pub const RAW_RECORDS: &str = "raw_records.jsonl";
    pub const INGEST_REPORT: &str = "ingest_report.json";
    pub const RECORDS: &str = "records.jsonl";
    pub const DEDUPE_REPORT: &str = "dedupe_report.json";
    pub const SCORES: &str = "scores.csv";
    pub const SCORE_FAILURES: &str = "score_failures.json";
    pub const GMM: &str = "gmm.json";
    pub const PDF_CURVE: &str = "pdf_curve.csv";
    pub const CUTOFFS: &str = "cutoffs.json";
    pub const TRIAGE_JSON: &str = "triage.json";
    pub const TRIAGE_CSV: &str = "triage.csv";
    pub const FLOW_JSON: &str = "flow.json";
    pub const HISTOGRAM: &str = "histogram.csv";
    pub const PROMPTS: &str = "prompts.jsonl";
    pub const VERDICTS: &str = "verdicts.jsonl";
    pub const RESPONSES_DIR: &str = "responses";
    pub const STAGES_DIR: &str = "stages";
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing prerequisite `{file}`: run `{stage}` first")]
    MissingPrerequisite { stage: String, file: String },
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("run directory is locked by another run (remove {0} if that run is gone)")]
    Locked(String),
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("{stage}: {source}")]
    Reconciliation { stage: &'static str, source: FlowError },
    #[error("verify: {failed} manifest entries did not verify")]
    Verification { failed: usize, report: VerificationReport },
}

impl PipelineError {
    /// Process exit status: 1 usage, 2 stage failure, 3 reconciliation failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::ConfigInvalid(_) => 1,
            PipelineError::Reconciliation { .. } => 3,
            _ => 2,
        }
    }
}

fn stage_err(stage: &'static str) -> impl Fn(&dyn std::fmt::Display) -> PipelineError {
    move |e| PipelineError::Stage { stage, message: e.to_string() }
}

// Configuration

mod rule_text {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Text(String),
        Tagged(BoundaryRule),
    }

    pub fn serialize<S: Serializer>(rule: &BoundaryRule, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&rule.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BoundaryRule, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
            Repr::Tagged(r) => Ok(r),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    pub provider: ProviderConfig,
    #[serde(rename = "K")]
    pub k: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub restarts: usize,
    #[serde(with = "rule_text")]
    pub rule: BoundaryRule,
    pub bins: usize,
    pub master_seed: u64,
    pub llm: Option<LlmConfig>,
    pub criteria_file: Option<PathBuf>,
    pub dry_run: bool,
    pub template_id: String,
    pub summary_style: String,
    pub concurrency: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let em = EmOptions::default();
        RunConfig {
            run_dir: PathBuf::from("."),
            provider: ProviderConfig::default(),
            k: em.k,
            tol: em.tol,
            max_iter: em.max_iter,
            restarts: em.restarts,
            rule: BoundaryRule::TwoSigmaOverlap,
            bins: 40,
            master_seed: 0,
            llm: None,
            criteria_file: None,
            dry_run: false,
            template_id: "screen-v1".into(),
            summary_style: DEFAULT_SUMMARY_STYLE.into(),
            concurrency: DEFAULT_CONCURRENCY,
        }
    }
}

impl RunConfig {
    pub fn em_options(&self) -> EmOptions {
        EmOptions { k: self.k, tol: self.tol, max_iter: self.max_iter, restarts: self.restarts, seed: self.master_seed }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |e: &dyn std::fmt::Display| PipelineError::ConfigInvalid(e.to_string());
        self.provider.validate().map_err(|e| bad(&e))?;
        self.em_options().validate().map_err(|e| bad(&e))?;
        self.rule.validate().map_err(|e| bad(&e))?;
        if self.bins == 0 {
            return Err(bad(&"bins must be positive"));
        }
        if self.concurrency == 0 {
            return Err(bad(&"concurrency must be positive"));
        }
        if !TEMPLATE_IDS.contains(&self.template_id.as_str()) {
            return Err(bad(&format!("unknown prompt template `{}`", self.template_id)));
        }
        if let Some(llm) = &self.llm {
            llm.validate().map_err(|e| bad(&e))?;
        }
        Ok(())
    }

    /// Screening runs offline when asked to, or when no endpoint is configured.
    pub fn effective_dry_run(&self) -> bool {
        self.dry_run || self.llm.is_none()
    }
}

// Inputs and intermediate reports

/// One search query plus the export file holding its results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryInput {
    #[serde(flatten)]
    pub spec: QuerySpec,
    /// Path relative to the run directory.
    pub file: String,
    #[serde(default)]
    pub format: Option<Format>,
}

impl QueryInput {
    pub fn resolved_format(&self) -> Result<Format, String> {
        if let Some(f) = self.format {
            return Ok(f);
        }
        let ext = Path::new(&self.file).extension().and_then(|e| e.to_str()).unwrap_or_default();
        ext.parse().map_err(|_| format!("cannot infer export format of `{}`; set `format`", self.file))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSource {
    pub query_id: String,
    pub file: String,
    pub parsed: usize,
    pub skipped: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub sources: Vec<IngestSource>,
    pub skipped_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScreenRecord {
    settings: ScreenSettings,
    llm: Option<LlmConfig>,
    criteria_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FlowRecord {
    bins: usize,
}

/// Outcome of one stage, for display.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageReport {
    pub stage: &'static str,
    pub lines: Vec<String>,
}

impl StageReport {
    fn new(stage: &'static str, lines: Vec<String>) -> Self {
        StageReport { stage, lines }
    }
}

// Lock

/// Exclusive claim on a run directory; released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(PipelineError::Locked(path.display().to_string())),
            Err(e) => Err(PipelineError::Stage { stage: "lock", message: format!("{}: {e}", path.display()) }),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

// Pipeline

pub struct Pipeline {
    cfg: RunConfig,
    dir: PathBuf,
    _lock: RunLock,
}

impl Pipeline {
    pub fn open(cfg: RunConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let dir = cfg.run_dir.clone();
        if !dir.is_dir() {
            return Err(PipelineError::ConfigInvalid(format!("run directory {} does not exist", dir.display())));
        }
        let lock = RunLock::acquire(&dir)?;
        Ok(Pipeline { cfg, dir, _lock: lock })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn require(&self, file: &str, stage: &str) -> Result<PathBuf, PipelineError> {
        let p = self.path(file);
        if p.is_file() {
            Ok(p)
        } else {
            Err(PipelineError::MissingPrerequisite { stage: stage.into(), file: file.into() })
        }
    }

    fn read_bytes(&self, file: &str, stage: &str, reader: &'static str) -> Result<Vec<u8>, PipelineError> {
        let p = self.require(file, stage)?;
        fs::read(&p).map_err(|e| PipelineError::Stage { stage: reader, message: format!("{file}: {e}") })
    }

    fn read_json<T: DeserializeOwned>(&self, file: &str, stage: &str, reader: &'static str) -> Result<T, PipelineError> {
        let bytes = self.read_bytes(file, stage, reader)?;
        serde_json::from_slice(&bytes).map_err(|e| PipelineError::Stage { stage: reader, message: format!("{file}: {e}") })
    }

    fn read_json_opt<T: DeserializeOwned>(&self, file: &str, reader: &'static str) -> Result<Option<T>, PipelineError> {
        if !self.path(file).is_file() {
            return Ok(None);
        }
        self.read_json(file, "", reader).map(Some)
    }

    fn read_records(&self, file: &str, stage: &str, reader: &'static str) -> Result<Vec<Record>, PipelineError> {
        let p = self.require(file, stage)?;
        let f = fs::File::open(&p).map_err(|e| stage_err(reader)(&e))?;
        read_jsonl(BufReader::new(f)).map_err(|e| PipelineError::Stage { stage: reader, message: format!("{file}: {e}") })
    }

    fn read_scores(&self, reader: &'static str) -> Result<Vec<crate::embed::SimilarityScore>, PipelineError> {
        let bytes = self.read_bytes(files::SCORES, "score", reader)?;
        read_scores_csv(&bytes).map_err(|e| PipelineError::Stage { stage: reader, message: format!("{}: {e}", files::SCORES) })
    }

    fn write(&self, name: &str, bytes: &[u8], stage: &'static str) -> Result<(), PipelineError> {
        write_atomic(&self.path(name), bytes).map_err(|e| PipelineError::Stage { stage, message: format!("{name}: {e}") })
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T, stage: &'static str) -> Result<(), PipelineError> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| stage_err(stage)(&e))?;
        s.push('\n');
        self.write(name, s.as_bytes(), stage)
    }

    fn write_jsonl<T: Serialize>(&self, name: &str, items: &[T], stage: &'static str) -> Result<(), PipelineError> {
        let mut buf = Vec::new();
        write_jsonl(items, &mut buf).map_err(|e| stage_err(stage)(&e))?;
        self.write(name, &buf, stage)
    }

    fn stage_record(name: &str) -> String {
        format!("{}/{name}.json", files::STAGES_DIR)
    }

    pub fn run(&self, stage: &str) -> Result<Vec<StageReport>, PipelineError> {
        let one = |r: Result<StageReport, PipelineError>| r.map(|r| vec![r]);
        match stage {
            "ingest" => one(self.ingest()),
            "dedupe" => one(self.dedupe()),
            "score" => one(self.score()),
            "fit" => one(self.fit()),
            "cutoffs" => one(self.cutoffs()),
            "partition" => one(self.partition()),
            "flow" => one(self.flow()),
            "screen" => one(self.screen()),
            "manifest" => one(self.manifest()),
            "verify" => one(self.verify()),
            "all" => self.all(),
            other => Err(PipelineError::ConfigInvalid(format!("unknown stage `{other}`"))),
        }
    }

    pub fn all(&self) -> Result<Vec<StageReport>, PipelineError> {
        let mut out = Vec::new();
        for stage in STAGES {
            if stage == "screen" && self.criteria_path().is_none() {
                out.push(StageReport::new("screen", vec!["skipped: no eligibility criteria".into()]));
                continue;
            }
            out.extend(self.run(stage)?);
        }
        Ok(out)
    }

    pub fn ingest(&self) -> Result<StageReport, PipelineError> {
        const S: &str = "ingest";
        let queries: Vec<QueryInput> = self.read_json(files::QUERIES, "input", S)?;
        let mut seen = BTreeSet::new();
        let mut records = Vec::new();
        let mut sources = Vec::new();
        for q in &queries {
            q.spec.validate().map_err(|e| stage_err(S)(&e))?;
            if !seen.insert(q.spec.id.clone()) {
                return Err(PipelineError::Stage { stage: S, message: format!("duplicate query id `{}`", q.spec.id) });
            }
            let format = q.resolved_format().map_err(|e| stage_err(S)(&e))?;
            let path = self.require(&q.file, "input")?;
            let f = fs::File::open(&path).map_err(|e| stage_err(S)(&e))?;
            let outcome =
                parse(format, f, &q.spec).map_err(|e| PipelineError::Stage { stage: S, message: format!("{}: {e}", q.file) })?;
            sources.push(IngestSource {
                query_id: q.spec.id.clone(),
                file: q.file.clone(),
                parsed: outcome.records.len(),
                skipped: outcome.skipped,
                warnings: outcome.warnings,
            });
            records.extend(outcome.records.iter().map(normalize));
        }
        let report = IngestReport { skipped_total: sources.iter().map(|s| s.skipped).sum(), sources };
        self.write_jsonl(files::RAW_RECORDS, &records, S)?;
        self.write_json(files::INGEST_REPORT, &report, S)?;
        Ok(StageReport::new(
            S,
            vec![format!("{} records from {} queries ({} skipped)", records.len(), queries.len(), report.skipped_total)],
        ))
    }

    pub fn dedupe(&self) -> Result<StageReport, PipelineError> {
        const S: &str = "dedupe";
        let raw = self.read_records(files::RAW_RECORDS, "ingest", S)?;
        let (unique, report) = dedupe(raw);
        self.write_jsonl(files::RECORDS, &unique, S)?;
        self.write_json(files::DEDUPE_REPORT, &report, S)?;
        Ok(StageReport::new(
            S,
            vec![format!("{} unique of {} ({} duplicates removed)", report.unique_count, report.input_count, report.duplicates_removed)],
        ))
    }

    pub fn score(&self) -> Result<StageReport, PipelineError> {
        const S: &str = "score";
        let records = self.read_records(files::RECORDS, "dedupe", S)?;
        let intent: IntentStatement = self.read_json(files::INTENT, "input", S)?;
        let cache = EmbeddingCache::new(self.path(CACHE_DIR).join("embeddings"));
        let embedder = Embedder::new(self.cfg.provider.clone(), Some(cache)).map_err(|e| stage_err(S)(&e))?;
        let outcome = score_corpus(&embedder, &intent, &records).map_err(|e| stage_err(S)(&e))?;
        self.write(files::SCORES, &write_scores_csv(&outcome.scores), S)?;
        self.write_json(files::SCORE_FAILURES, &outcome.failures, S)?;
        self.write_json(&Self::stage_record(S), &self.cfg.provider, S)?;
        Ok(StageReport::new(
            S,
            vec![format!(
                "{} records scored with {} ({} unscorable)",
                outcome.scores.len(),
                self.cfg.provider.model_id,
                outcome.failures.len()
            )],
        ))
    }

    pub fn fit(&self) -> Result<StageReport, PipelineError> {
        const S: &str = "fit";
        let s: Vec<f64> = self.read_scores(S)?.iter().map(|x| x.s).collect();
        let opts = self.cfg.em_options();
        let params = fit_em(&s, &opts).map_err(|e| stage_err(S)(&e))?;
        self.write_json(files::GMM, &params, S)?;
        self.write(files::PDF_CURVE, export_pdf_curve(&params, CURVE_POINTS).as_bytes(), S)?;
        self.write_json(&Self::stage_record(S), &opts, S)?;
        let comps: Vec<String> = (0..params.k)
            .map(|i| format!("(w={:.4}, mu={:.4}, sd={:.4})", params.weights[i], params.means[i], params.stddevs[i]))
            .collect();
        Ok(StageReport::new(
            S,
            vec![
                format!("K={} loglik={:.6} iterations={} converged={}", params.k, params.loglik, params.iterations, params.converged),
                comps.join(" "),
            ],
        ))
    }

    pub fn cutoffs(&self) -> Result<StageReport, PipelineError> {
        const S: &str = "cutoffs";
        let params: GmmParams = self.read_json(files::GMM, "fit", S)?;
        let s: Vec<f64> = self.read_scores(S)?.iter().map(|x| x.s).collect();
        let c = derive_cutoffs(&params, &s, self.cfg.rule).map_err(|e| stage_err(S)(&e))?;
        self.write_json(files::CUTOFFS, &c, S)?;
        Ok(StageReport::new(S, vec![format!("rule {}: lower={:.6} upper={:.6}", c.rule, c.lower, c.upper)]))
    }

    fn load_overrides(&self, stage: &'static str) -> Result<Vec<Override>, PipelineError> {
        let p = self.path(files::OVERRIDES);
        if !p.is_file() {
            return Ok(Vec::new());
        }
        let f = fs::File::open(&p).map_err(|e| stage_err(stage)(&e))?;
        read_jsonl(BufReader::new(f)).map_err(|e| stage_err(stage)(&e))
    }

    fn write_triage(&self, t: &TriageResult, stage: &'static str) -> Result<(), PipelineError> {
        self.write_json(files::TRIAGE_JSON, t, stage)?;
        self.write(files::TRIAGE_CSV, &t.to_csv(), stage)
    }

    pub fn partition(&self) -> Result<StageReport, PipelineError> {
        const S: &str = "partition";
        let cutoffs: Cutoffs = self.read_json(files::CUTOFFS, "cutoffs", S)?;
        let params: GmmParams = self.read_json(files::GMM, "fit", S)?;
        let actual = params.params_hash();
        if cutoffs.params_hash != actual {
            return Err(PipelineError::Reconciliation {
                stage: S,
                source: FlowError::HashMismatch { expected: actual, actual: cutoffs.params_hash },
            });
        }
        let scores = self.read_scores(S)?;
        let fresh = partition(&scores, &cutoffs).map_err(|e| stage_err(S)(&e))?;
        let log = self.load_overrides(S)?;
        let t = apply_overrides(&fresh, &log).map_err(|e| stage_err(S)(&e))?;
        self.write_triage(&t, S)?;
        Ok(StageReport::new(
            S,
            vec![format!(
                "excluded={} genai={} human={} ({} overrides)",
                t.counts.excluded,
                t.counts.genai,
                t.counts.human,
                t.overrides.len()
            )],
        ))
    }

    /// Records a manual bin change and re-applies it to the current triage.
    pub fn override_record(&self, record_id: &str, to: Bin, reason: &str, reviewer: &str) -> Result<StageReport, PipelineError> {
        const S: &str = "override";
        let t: TriageResult = self.read_json(files::TRIAGE_JSON, "partition", S)?;
        let next = override_bin(&t, record_id, to, reason, reviewer).map_err(|e| stage_err(S)(&e))?;
        let mut log = self.load_overrides(S)?;
        let entry = next.overrides.last().expect("override appended").clone();
        log.push(entry.clone());
        self.write_jsonl(files::OVERRIDES, &log, S)?;
        self.write_triage(&next, S)?;
        Ok(StageReport::new(S, vec![format!("{}: {} -> {} by {}", entry.record_id, entry.from_bin, entry.to_bin, entry.reviewer)]))
    }

    pub fn flow_counts(&self) -> Result<crate::flow::FlowCounts, PipelineError> {
        const S: &str = "flow";
        let queries: Vec<QueryInput> = self.read_json(files::QUERIES, "input", S)?;
        let specs: Vec<QuerySpec> = queries.into_iter().map(|q| q.spec).collect();
        let ingest: IngestReport = self.read_json(files::INGEST_REPORT, "ingest", S)?;
        let dup: DuplicateReport = self.read_json(files::DEDUPE_REPORT, "dedupe", S)?;
        let failures: Vec<ScoreFailure> = self.read_json(files::SCORE_FAILURES, "score", S)?;
        let params: GmmParams = self.read_json(files::GMM, "fit", S)?;
        let triage: TriageResult = self.read_json(files::TRIAGE_JSON, "partition", S)?;
        let tallies: ScreeningTallies = self.read_json_opt(files::SCREENING, S)?.unwrap_or_default();
        let expected = params.params_hash();
        build_flow(&FlowInputs {
            queries: &specs,
            duplicates: &dup,
            triage: &triage,
            tallies: &tallies,
            losses: PrescreenLosses { ingest_skipped: ingest.skipped_total as u64, unscorable: failures.len() as u64 },
            expected_params_hash: Some(&expected),
        })
        .map_err(|e| PipelineError::Reconciliation { stage: S, source: e })
    }

    pub fn flow(&self) -> Result<StageReport, PipelineError> {
        const S: &str = "flow";
        let counts = self.flow_counts()?;
        self.write_json(files::FLOW_JSON, &counts, S)?;
        for fmt in [RenderFormat::Mermaid, RenderFormat::Dot, RenderFormat::Text] {
            let text = render_flow(&counts, fmt).map_err(|e| PipelineError::Reconciliation { stage: S, source: e })?;
            self.write(&format!("flow.{}", fmt.extension()), text.as_bytes(), S)?;
        }
        let params: GmmParams = self.read_json(files::GMM, "fit", S)?;
        let cutoffs: Cutoffs = self.read_json(files::CUTOFFS, "cutoffs", S)?;
        let s: Vec<f64> = self.read_scores(S)?.iter().map(|x| x.s).collect();
        let hist = export_histogram(&s, &params, &cutoffs, self.cfg.bins).map_err(|e| stage_err(S)(&e))?;
        self.write(files::HISTOGRAM, hist.as_bytes(), S)?;
        self.write_json(&Self::stage_record(S), &FlowRecord { bins: self.cfg.bins }, S)?;
        let p = counts.prescreening;
        Ok(StageReport::new(
            S,
            vec![format!(
                "identified={} scored={} excluded={} genai={} human={}",
                counts.identification.total(),
                p.scored,
                p.excluded,
                p.genai,
                p.human
            )],
        ))
    }

    fn criteria_path(&self) -> Option<PathBuf> {
        match &self.cfg.criteria_file {
            Some(p) => Some(p.clone()),
            None => Some(self.path(files::CRITERIA)).filter(|p| p.is_file()),
        }
    }

    pub fn screen(&self) -> Result<StageReport, PipelineError> {
        const S: &str = "screen";
        let crit_path = self
            .criteria_path()
            .ok_or_else(|| PipelineError::MissingPrerequisite { stage: "input".into(), file: files::CRITERIA.into() })?;
        let bytes = fs::read(&crit_path)
            .map_err(|e| PipelineError::Stage { stage: S, message: format!("{}: {e}", crit_path.display()) })?;
        let criteria: EligibilityCriteria = serde_json::from_slice(&bytes).map_err(|e| stage_err(S)(&e))?;
        criteria.validate().map_err(|e| stage_err(S)(&e))?;
        let triage: TriageResult = self.read_json(files::TRIAGE_JSON, "partition", S)?;
        let records = self.read_records(files::RECORDS, "dedupe", S)?;
        let bundles = bundles_for_bin(&triage, &records, &criteria, &self.cfg.template_id, &self.cfg.summary_style)
            .map_err(|e| stage_err(S)(&e))?;
        self.write_jsonl(files::PROMPTS, &bundles, S)?;

        let dry_run = self.cfg.effective_dry_run();
        let client = if dry_run {
            ScreenClient::dry_run()
        } else {
            let llm = self.cfg.llm.clone().expect("endpoint configured");
            ScreenClient::new(llm, Some(ResponseStore::new(self.path(files::RESPONSES_DIR)))).map_err(|e| stage_err(S)(&e))?
        };
        let mut verdicts = Vec::with_capacity(bundles.len());
        for (id, r) in client.screen_batch(&bundles, self.cfg.concurrency) {
            verdicts.push(r.map_err(|e| PipelineError::Stage { stage: S, message: format!("{id}: {e}") })?);
        }
        if !covers_genai_bin(&triage, &verdicts) {
            return Err(PipelineError::Stage { stage: S, message: "screened records differ from the GenAIReview bin".into() });
        }
        // Keep earlier moderation decisions for verdicts that did not change.
        let previous: BTreeMap<String, ScreeningVerdict> = self
            .read_verdicts_opt(S)?
            .into_iter()
            .map(|v| (v.record_id.clone(), v))
            .collect();
        for v in &mut verdicts {
            if let Some(old) = previous.get(&v.record_id) {
                if old.prompt_hash == v.prompt_hash && old.raw_response == v.raw_response {
                    v.moderation = old.moderation;
                    v.moderator = old.moderator.clone();
                }
            }
        }
        self.write_jsonl(files::VERDICTS, &verdicts, S)?;
        let record = ScreenRecord {
            settings: ScreenSettings {
                dry_run,
                template_id: self.cfg.template_id.clone(),
                summary_style: self.cfg.summary_style.clone(),
                concurrency: self.cfg.concurrency,
            },
            llm: if dry_run { None } else { self.cfg.llm.clone() },
            criteria_hash: criteria.hash(),
        };
        self.write_json(&Self::stage_record(S), &record, S)?;
        let pending = verdicts.iter().filter(|v| v.moderation == Moderation::Pending).count();
        Ok(StageReport::new(
            S,
            vec![format!(
                "{} prompts, {} verdicts ({} pending moderation){}; {} network requests",
                bundles.len(),
                verdicts.len(),
                pending,
                if dry_run { ", dry run" } else { "" },
                client.request_count()
            )],
        ))
    }

    fn read_verdicts_opt(&self, stage: &'static str) -> Result<Vec<ScreeningVerdict>, PipelineError> {
        let p = self.path(files::VERDICTS);
        if !p.is_file() {
            return Ok(Vec::new());
        }
        let f = fs::File::open(&p).map_err(|e| stage_err(stage)(&e))?;
        read_jsonl(BufReader::new(f)).map_err(|e| stage_err(stage)(&e))
    }

    /// Approves or rejects one verdict on behalf of a named moderator.
    pub fn moderate(&self, record_id: &str, approved: bool, moderator: &str) -> Result<StageReport, PipelineError> {
        const S: &str = "moderate";
        self.require(files::VERDICTS, "screen")?;
        let mut verdicts = self.read_verdicts_opt(S)?;
        let v = verdicts
            .iter_mut()
            .find(|v| v.record_id == record_id)
            .ok_or_else(|| PipelineError::Stage { stage: S, message: format!("no verdict for record `{record_id}`") })?;
        *v = if approved { approve(v, moderator) } else { reject(v, moderator) }.map_err(|e| stage_err(S)(&e))?;
        let line = format!("{record_id}: {:?} by {moderator}", v.moderation).to_lowercase();
        self.write_jsonl(files::VERDICTS, &verdicts, S)?;
        Ok(StageReport::new(S, vec![line]))
    }

    pub fn manifest(&self) -> Result<StageReport, PipelineError> {
        const S: &str = "manifest";
        let queries: Option<Vec<QueryInput>> = self.read_json_opt(files::QUERIES, S)?;
        let queries: Option<Vec<QuerySpec>> = queries.map(|qs| qs.into_iter().map(|q| q.spec).collect());
        let fit: Option<EmOptions> = self.read_json_opt(&Self::stage_record("fit"), S)?;
        let flow: Option<FlowRecord> = self.read_json_opt(&Self::stage_record("flow"), S)?;
        let screen: Option<ScreenRecord> = self.read_json_opt(&Self::stage_record("screen"), S)?;
        let triage: Option<TriageResult> = self.read_json_opt(files::TRIAGE_JSON, S)?;
        if !self.path(files::RAW_RECORDS).is_file() {
            return Err(PipelineError::MissingPrerequisite { stage: "ingest".into(), file: files::RAW_RECORDS.into() });
        }
        let flow = flow.ok_or_else(|| PipelineError::MissingPrerequisite {
            stage: "flow".into(),
            file: Self::stage_record("flow"),
        })?;
        let settings = fit.map(|fit| RunSettings { fit, bins: flow.bins, screening: screen.as_ref().map(|s| s.settings.clone()) });
        let master_seed = settings.as_ref().map(|s| s.fit.seed).unwrap_or(self.cfg.master_seed);
        let parts = ManifestParts {
            tool_version: TOOL_VERSION.to_string(),
            created_at: created_at(queries.as_deref().unwrap_or_default()),
            queries,
            intent: self.read_json_opt(files::INTENT, S)?,
            provider: self.read_json_opt(&Self::stage_record("score"), S)?,
            gmm: self.read_json_opt(files::GMM, S)?,
            cutoffs: self.read_json_opt(files::CUTOFFS, S)?,
            triage_counts: triage.map(|t| t.counts),
            llm: screen.as_ref().and_then(|s| s.llm.clone()),
            criteria_hash: screen.as_ref().map(|s| s.criteria_hash.clone()),
            prompt_template_hashes: screen
                .as_ref()
                .map(|s| {
                    vec![TemplateHash {
                        template_id: s.settings.template_id.clone(),
                        hash: template_hash(&s.settings.template_id).expect("validated template"),
                    }]
                })
                .unwrap_or_default(),
            input_hashes: hash_run_dir(&self.dir).map_err(|e| stage_err(S)(&e))?,
            master_seed,
            settings,
        };
        let m = build_manifest(parts).map_err(|e| match e {
            crate::manifest::ManifestError::MissingStage(stage) => {
                PipelineError::MissingPrerequisite { stage: stage.into(), file: format!("{stage} outputs") }
            }
            other => stage_err(S)(&other),
        })?;
        let bytes = m.to_canonical_bytes().map_err(|e| stage_err(S)(&e))?;
        self.write(MANIFEST_FILE, &bytes, S)?;
        Ok(StageReport::new(S, vec![format!("{} files hashed, self_hash {}", m.input_hashes.len(), m.self_hash)]))
    }

    pub fn verify(&self) -> Result<StageReport, PipelineError> {
        const S: &str = "verify";
        let path = self.require(MANIFEST_FILE, "manifest")?;
        let report = verify_manifest(&path, &self.dir);
        let failed = report.failures().len();
        if failed > 0 {
            return Err(PipelineError::Verification { failed, report });
        }
        Ok(StageReport::new(S, vec![format!("{} entries verified", report.entries.len())]))
    }
}

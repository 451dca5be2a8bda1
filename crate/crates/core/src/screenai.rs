//! GenAI screening and summarisation of the middle triage bin.
//!
//! Prompts come from fixed templates and ask for a JSON-only reply. Replies
//! are persisted verbatim before parsing, and every verdict starts out
//! `pending` until a named moderator approves or rejects it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canon::{canonical_hash, sha256_hex, write_atomic};
use crate::records::Record;
use crate::triage::{Bin, TriageResult};

pub const LLM_TOKEN_ENV: &str = "LPRISMA_LLM_TOKEN";
pub const MAX_ATTEMPTS: u32 = 5;
pub const DEFAULT_CONCURRENCY: usize = 4;
pub const DEFAULT_SUMMARY_STYLE: &str = "one short paragraph";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScreenError {
    #[error("unknown prompt template `{0}`")]
    UnknownTemplate(String),
    #[error("invalid eligibility criteria: {0}")]
    InvalidCriteria(String),
    #[error("invalid LLM configuration: {0}")]
    InvalidConfig(String),
    #[error("record `{0}` has no title")]
    MissingTitle(String),
    #[error("record `{0}` is not in the GenAIReview bin")]
    NotInGenAiBin(String),
    #[error("record `{0}` is in the GenAIReview bin but missing from the record set")]
    UnknownRecord(String),
    #[error("LLM endpoint returned HTTP {status}: {body}")]
    HttpError { status: u16, body: String },
    #[error("LLM request timed out")]
    Timeout,
    #[error("LLM endpoint still rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("LLM transport error: {0}")]
    Transport(String),
    #[error("a moderator name is required")]
    MissingModerator,
    #[error("response store: {0}")]
    Store(String),
}

// Criteria and prompts

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EligibilityCriteria {
    pub inclusion: Vec<String>,
    #[serde(default)]
    pub exclusion: Vec<String>,
    #[serde(default)]
    pub notes: Option<String>,
}

impl EligibilityCriteria {
    pub fn validate(&self) -> Result<(), ScreenError> {
        if self.inclusion.iter().all(|c| c.trim().is_empty()) {
            return Err(ScreenError::InvalidCriteria("at least one inclusion criterion is required".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        canonical_hash(self).expect("criteria serialize")
    }
}

const SCREEN_V1: &str = "You are assisting with the screening stage of a systematic literature review.
Decide whether the record below meets the eligibility criteria.

Inclusion criteria:
{inclusion}
Exclusion criteria:
{exclusion}
{notes}
Record ID: {record_id}
Title: {title}
Abstract: {abstract}

Reply with a single JSON object and nothing else, using exactly these keys:
{\"decision\": \"include\" | \"exclude\" | \"uncertain\", \"rationale\": \"<one or two sentences>\", \"summary\": \"<optional one-sentence summary>\"}
";

const SUMMARISE_V1: &str = "You are assisting with the screening stage of a systematic literature review.
Summarise the record below as {style}, then judge it against the eligibility criteria.

Inclusion criteria:
{inclusion}
Exclusion criteria:
{exclusion}
{notes}
Record ID: {record_id}
Title: {title}
Abstract: {abstract}

Reply with a single JSON object and nothing else, using exactly these keys:
{\"decision\": \"include\" | \"exclude\" | \"uncertain\", \"rationale\": \"<one or two sentences>\", \"summary\": \"<the summary>\"}
";

pub const TEMPLATE_IDS: [&str; 2] = ["screen-v1", "summarise-v1"];

fn template_source(id: &str) -> Result<&'static str, ScreenError> {
    match id {
        "screen-v1" => Ok(SCREEN_V1),
        "summarise-v1" => Ok(SUMMARISE_V1),
        other => Err(ScreenError::UnknownTemplate(other.to_string())),
    }
}

/// SHA-256 of a template's source text.
pub fn template_hash(id: &str) -> Result<String, ScreenError> {
    template_source(id).map(|t| sha256_hex(t.as_bytes()))
}

/// Single-pass `{name}` substitution; unknown placeholders are left as written.
fn substitute(template: &str, vars: &BTreeMap<&str, String>) -> String {
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        let hit = tail.find('}').and_then(|end| vars.get(&tail[1..end]).map(|v| (end, v)));
        match hit {
            Some((end, v)) => {
                out.push_str(v);
                rest = &tail[end + 1..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

fn bullet_list(items: &[String]) -> String {
    let lines: Vec<String> = items.iter().filter(|c| !c.trim().is_empty()).map(|c| format!("- {c}")).collect();
    if lines.is_empty() {
        "- none".to_string()
    } else {
        lines.join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub record_id: String,
    pub template_id: String,
    pub rendered: String,
    pub criteria_hash: String,
}

impl PromptBundle {
    pub fn prompt_hash(&self) -> String {
        sha256_hex(self.rendered.as_bytes())
    }
}

pub fn render_prompt(record: &Record, criteria: &EligibilityCriteria, template_id: &str) -> Result<PromptBundle, ScreenError> {
    render_prompt_styled(record, criteria, template_id, DEFAULT_SUMMARY_STYLE)
}

pub fn render_prompt_styled(
    record: &Record,
    criteria: &EligibilityCriteria,
    template_id: &str,
    style: &str,
) -> Result<PromptBundle, ScreenError> {
    let template = template_source(template_id)?;
    criteria.validate()?;
    if record.title.trim().is_empty() {
        return Err(ScreenError::MissingTitle(record.id.clone()));
    }
    let mut vars = BTreeMap::new();
    vars.insert("inclusion", bullet_list(&criteria.inclusion));
    vars.insert("exclusion", bullet_list(&criteria.exclusion));
    vars.insert(
        "notes",
        match criteria.notes.as_deref().map(str::trim) {
            Some(n) if !n.is_empty() => format!("Notes: {n}\n"),
            _ => String::new(),
        },
    );
    vars.insert("record_id", record.id.clone());
    vars.insert("title", record.title.clone());
    vars.insert(
        "abstract",
        match record.abstract_text.as_deref().map(str::trim) {
            Some(a) if !a.is_empty() => a.to_string(),
            _ => "(no abstract available)".to_string(),
        },
    );
    vars.insert("style", style.to_string());
    Ok(PromptBundle {
        record_id: record.id.clone(),
        template_id: template_id.to_string(),
        rendered: substitute(template, &vars),
        criteria_hash: criteria.hash(),
    })
}

// Verdicts

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Include,
    Exclude,
    Uncertain,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Include => "include",
            Decision::Exclude => "exclude",
            Decision::Uncertain => "uncertain",
        })
    }
}

impl FromStr for Decision {
    type Err = ScreenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "include" => Decision::Include,
            "exclude" => Decision::Exclude,
            _ => Decision::Uncertain,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Moderation {
    Pending,
    Approved,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreeningVerdict {
    pub record_id: String,
    pub template_id: String,
    pub prompt_hash: String,
    pub decision: Decision,
    pub rationale: String,
    pub summary: Option<String>,
    pub raw_response: String,
    pub moderation: Moderation,
    pub moderator: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedVerdict {
    pub decision: Decision,
    pub rationale: String,
    pub summary: Option<String>,
}

/// End index (exclusive) of the balanced `{...}` starting at `start`, skipping
/// braces inside JSON strings.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let (mut depth, mut in_str, mut escaped) = (0usize, false, false);
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_str {
            match (escaped, b) {
                (true, _) => escaped = false,
                (false, b'\\') => escaped = true,
                (false, b'"') => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// First balanced `{...}` in `raw` that parses as a JSON object.
pub fn first_json_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    let bytes = raw.as_bytes();
    let mut from = 0;
    while let Some(off) = raw[from..].find('{') {
        let start = from + off;
        if let Some(end) = balanced_end(bytes, start) {
            if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&raw[start..end]) {
                return Some(map);
            }
        }
        from = start + 1;
    }
    None
}

/// Total: anything unparseable yields `uncertain` with an empty rationale.
pub fn parse_verdict(raw: &str) -> ParsedVerdict {
    let Some(obj) = first_json_object(raw) else {
        return ParsedVerdict { decision: Decision::Uncertain, rationale: String::new(), summary: None };
    };
    let text = |k: &str| obj.get(k).and_then(Value::as_str).map(str::to_string);
    ParsedVerdict {
        decision: text("decision").map(|d| d.parse().expect("infallible")).unwrap_or(Decision::Uncertain),
        rationale: text("rationale").unwrap_or_default(),
        summary: text("summary"),
    }
}

fn verdict_from(bundle: &PromptBundle, raw: String, parsed: ParsedVerdict) -> ScreeningVerdict {
    ScreeningVerdict {
        record_id: bundle.record_id.clone(),
        template_id: bundle.template_id.clone(),
        prompt_hash: bundle.prompt_hash(),
        decision: parsed.decision,
        rationale: parsed.rationale,
        summary: parsed.summary,
        raw_response: raw,
        moderation: Moderation::Pending,
        moderator: None,
    }
}

fn moderate(verdict: &ScreeningVerdict, moderator: &str, to: Moderation) -> Result<ScreeningVerdict, ScreenError> {
    if moderator.trim().is_empty() {
        return Err(ScreenError::MissingModerator);
    }
    Ok(ScreeningVerdict { moderation: to, moderator: Some(moderator.trim().to_string()), ..verdict.clone() })
}

pub fn approve(verdict: &ScreeningVerdict, moderator: &str) -> Result<ScreeningVerdict, ScreenError> {
    moderate(verdict, moderator, Moderation::Approved)
}

pub fn reject(verdict: &ScreeningVerdict, moderator: &str) -> Result<ScreeningVerdict, ScreenError> {
    moderate(verdict, moderator, Moderation::Rejected)
}

// LLM client

/// Screening options recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenSettings {
    pub dry_run: bool,
    pub template_id: String,
    pub summary_style: String,
    pub concurrency: usize,
}

fn default_max_tokens() -> u32 {
    512
}

fn default_timeout() -> u64 {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model_id: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// Seconds.
    #[serde(default = "default_timeout")]
    pub request_timeout: u64,
}

impl LlmConfig {
    pub fn new(endpoint: impl Into<String>, model_id: impl Into<String>) -> Self {
        LlmConfig {
            endpoint: endpoint.into(),
            model_id: model_id.into(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            request_timeout: default_timeout(),
        }
    }

    pub fn validate(&self) -> Result<(), ScreenError> {
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(ScreenError::InvalidConfig(format!("endpoint `{}` is not an http(s) URL", self.endpoint)));
        }
        if self.model_id.trim().is_empty() {
            return Err(ScreenError::InvalidConfig("model_id is empty".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(ScreenError::InvalidConfig(format!("temperature {} must be >= 0", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(ScreenError::InvalidConfig("max_tokens must be positive".into()));
        }
        if self.request_timeout == 0 {
            return Err(ScreenError::InvalidConfig("request_timeout must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

/// Reply text inside a chat-completion envelope, if the body is one.
pub fn chat_content(body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    v.get("choices")?.get(0)?.get("message")?.get("content")?.as_str().map(str::to_string)
}

/// Responses keyed by (model_id, prompt hash), stored verbatim as received.
#[derive(Debug, Clone)]
pub struct ResponseStore {
    dir: PathBuf,
}

impl ResponseStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ResponseStore { dir: dir.into() }
    }

    pub fn key(model_id: &str, prompt_hash: &str) -> String {
        sha256_hex(format!("{model_id}\0{prompt_hash}").as_bytes())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.txt"))
    }

    pub fn get(&self, key: &str) -> Result<Option<Vec<u8>>, ScreenError> {
        match fs::read(self.path(key)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(ScreenError::Store(e.to_string())),
        }
    }

    pub fn put(&self, key: &str, body: &[u8]) -> Result<(), ScreenError> {
        fs::create_dir_all(&self.dir).map_err(|e| ScreenError::Store(e.to_string()))?;
        write_atomic(&self.path(key), body).map_err(|e| ScreenError::Store(e.to_string()))
    }
}

pub struct ScreenClient {
    cfg: Option<LlmConfig>,
    dry_run: bool,
    store: Option<ResponseStore>,
    http: Option<reqwest::blocking::Client>,
    requests: AtomicUsize,
    backoff_base: Duration,
    min_interval: Duration,
    last_request: Mutex<Option<Instant>>,
}

impl ScreenClient {
    /// Client that renders prompts only and never touches the network.
    pub fn dry_run() -> Self {
        ScreenClient {
            cfg: None,
            dry_run: true,
            store: None,
            http: None,
            requests: AtomicUsize::new(0),
            backoff_base: Duration::from_millis(500),
            min_interval: Duration::ZERO,
            last_request: Mutex::new(None),
        }
    }

    pub fn new(cfg: LlmConfig, store: Option<ResponseStore>) -> Result<Self, ScreenError> {
        cfg.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.request_timeout))
            .build()
            .map_err(|e| ScreenError::Transport(e.to_string()))?;
        Ok(ScreenClient { cfg: Some(cfg), dry_run: false, store, http: Some(http), ..ScreenClient::dry_run() })
    }

    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    /// Minimum spacing between requests to the endpoint.
    pub fn with_min_interval(mut self, interval: Duration) -> Self {
        self.min_interval = interval;
        self
    }

    pub fn is_dry_run(&self) -> bool {
        self.dry_run
    }

    pub fn config(&self) -> Option<&LlmConfig> {
        self.cfg.as_ref()
    }

    /// HTTP requests sent so far, retries included.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn screen_record(&self, bundle: &PromptBundle) -> Result<ScreeningVerdict, ScreenError> {
        if self.dry_run {
            return Ok(verdict_from(
                bundle,
                String::new(),
                ParsedVerdict { decision: Decision::Uncertain, rationale: String::new(), summary: None },
            ));
        }
        let cfg = self.cfg.as_ref().expect("configured client");
        let key = ResponseStore::key(&cfg.model_id, &bundle.prompt_hash());
        let cached = match &self.store {
            Some(s) => s.get(&key)?,
            None => None,
        };
        let body = match cached {
            Some(b) => b,
            None => {
                let b = self.send(cfg, &bundle.rendered)?;
                if let Some(s) = &self.store {
                    s.put(&key, &b)?;
                }
                b
            }
        };
        let body = String::from_utf8_lossy(&body).into_owned();
        let raw = chat_content(&body).unwrap_or(body);
        let parsed = parse_verdict(&raw);
        Ok(verdict_from(bundle, raw, parsed))
    }

    fn pace(&self) {
        if self.min_interval.is_zero() {
            return;
        }
        let mut last = self.last_request.lock().expect("rate limiter lock");
        if let Some(prev) = *last {
            let due = prev + self.min_interval;
            let now = Instant::now();
            if due > now {
                std::thread::sleep(due - now);
            }
        }
        *last = Some(Instant::now());
    }

    fn send(&self, cfg: &LlmConfig, prompt: &str) -> Result<Vec<u8>, ScreenError> {
        let client = self.http.as_ref().expect("http client");
        let payload = ChatRequest {
            model: &cfg.model_id,
            messages: vec![ChatMessage { role: "user", content: prompt }],
            temperature: cfg.temperature,
            max_tokens: cfg.max_tokens,
        };
        for attempt in 0..MAX_ATTEMPTS {
            if attempt > 0 {
                std::thread::sleep(self.backoff_base * 2u32.pow(attempt - 1));
            }
            self.pace();
            self.requests.fetch_add(1, Ordering::SeqCst);
            let mut req = client.post(&cfg.endpoint).json(&payload);
            if let Ok(token) = std::env::var(LLM_TOKEN_ENV) {
                req = req.bearer_auth(token);
            }
            let resp = req.send().map_err(|e| {
                if e.is_timeout() {
                    ScreenError::Timeout
                } else {
                    ScreenError::Transport(e.to_string())
                }
            })?;
            let status = resp.status();
            let mut body = Vec::new();
            resp.take(8 << 20).read_to_end(&mut body).map_err(|e| ScreenError::Transport(e.to_string()))?;
            if status.as_u16() == 429 {
                continue;
            }
            if !status.is_success() {
                return Err(ScreenError::HttpError {
                    status: status.as_u16(),
                    body: String::from_utf8_lossy(&body).chars().take(200).collect(),
                });
            }
            return Ok(body);
        }
        Err(ScreenError::RateLimited { attempts: MAX_ATTEMPTS })
    }

    /// Screens bundles with at most `concurrency` requests in flight.
    /// Results come back ordered by record id.
    pub fn screen_batch(
        &self,
        bundles: &[PromptBundle],
        concurrency: usize,
    ) -> Vec<(String, Result<ScreeningVerdict, ScreenError>)> {
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<(String, Result<ScreeningVerdict, ScreenError>)>> = Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for _ in 0..concurrency.max(1).min(bundles.len().max(1)) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(b) = bundles.get(i) else { break };
                    let r = self.screen_record(b);
                    results.lock().expect("results lock").push((b.record_id.clone(), r));
                });
            }
        });
        let mut out = results.into_inner().expect("results lock");
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn summarise_record(
        &self,
        triage: &TriageResult,
        record: &Record,
        criteria: &EligibilityCriteria,
        style: &str,
    ) -> Result<(PromptBundle, ScreeningVerdict), ScreenError> {
        if triage.assignments.get(&record.id) != Some(&Bin::GenAiReview) {
            return Err(ScreenError::NotInGenAiBin(record.id.clone()));
        }
        let bundle = render_prompt_styled(record, criteria, "summarise-v1", style)?;
        let verdict = self.screen_record(&bundle)?;
        Ok((bundle, verdict))
    }
}

/// Prompt bundles for exactly the GenAIReview bin, in record-id order.
pub fn bundles_for_bin(
    triage: &TriageResult,
    records: &[Record],
    criteria: &EligibilityCriteria,
    template_id: &str,
    style: &str,
) -> Result<Vec<PromptBundle>, ScreenError> {
    let by_id: BTreeMap<&str, &Record> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    triage
        .ids_in(Bin::GenAiReview)
        .into_iter()
        .map(|id| {
            let rec = by_id.get(id).ok_or_else(|| ScreenError::UnknownRecord(id.to_string()))?;
            render_prompt_styled(rec, criteria, template_id, style)
        })
        .collect()
}

/// True when the screened ids are exactly the GenAIReview bin.
pub fn covers_genai_bin(triage: &TriageResult, verdicts: &[ScreeningVerdict]) -> bool {
    let bin: BTreeSet<&str> = triage.ids_in(Bin::GenAiReview).into_iter().collect();
    let screened: BTreeSet<&str> = verdicts.iter().map(|v| v.record_id.as_str()).collect();
    bin == screened && screened.len() == verdicts.len()
}

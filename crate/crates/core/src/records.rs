//! Bibliographic record ingestion: CSV / BibTeX / RIS parsing, normalization
//! to content-addressed [`Record`]s, and cross-source deduplication.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RecordsError {
    #[error("unknown input format `{0}` (expected csv, bibtex or ris)")]
    UnknownFormat(String),
    #[error("malformed input at {locator}: {message}")]
    MalformedInput { locator: String, message: String },
    #[error("input is empty")]
    EmptyInput,
    #[error("invalid query spec: {0}")]
    InvalidQuery(String),
    #[error("record store line {line}: {message}")]
    Store { line: usize, message: String },
}

/// Export formats accepted by [`parse`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Bibtex,
    Ris,
}

impl FromStr for Format {
    type Err = RecordsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "bibtex" | "bib" => Ok(Format::Bibtex),
            "ris" => Ok(Format::Ris),
            other => Err(RecordsError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Csv => "csv",
            Format::Bibtex => "bibtex",
            Format::Ris => "ris",
        })
    }
}

/// One database search as reported in the identification phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub id: String,
    pub database: String,
    pub query: String,
    pub scope_label: String,
    /// ISO-8601 calendar date (`YYYY-MM-DD`).
    pub executed_on: String,
    pub reported_count: u64,
}

impl QuerySpec {
    pub fn validate(&self) -> Result<(), RecordsError> {
        if self.id.trim().is_empty() {
            return Err(RecordsError::InvalidQuery("id is empty".into()));
        }
        if self.query.trim().is_empty() {
            return Err(RecordsError::InvalidQuery(format!("query `{}` has empty query text", self.id)));
        }
        chrono::NaiveDate::parse_from_str(&self.executed_on, "%Y-%m-%d").map_err(|_| {
            RecordsError::InvalidQuery(format!(
                "query `{}`: executed_on `{}` is not a YYYY-MM-DD date",
                self.id, self.executed_on
            ))
        })?;
        Ok(())
    }
}

/// A record as it came out of an export file, before normalization.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub source_db: String,
    pub query_id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: Option<String>,
    pub authors: Vec<String>,
    pub year: Option<i32>,
    pub venue: Option<String>,
    pub doi: Option<String>,
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub source_db: String,
    pub query_id: String,
}

/// A normalized record. `id` is derived from the DOI when present, else the title.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub title: String,
    pub title_norm: String,
    #[serde(rename = "abstract")]
    pub abstract_text: Option<String>,
    pub missing_abstract: bool,
    pub doi_norm: Option<String>,
    pub authors: Vec<String>,
    pub year: Option<i32>,
    pub venue: Option<String>,
    pub provenance: Vec<Provenance>,
}

impl Record {
    /// Text used for scoring: title, plus the abstract when there is one.
    pub fn text(&self) -> String {
        match self.abstract_text.as_deref() {
            Some(a) if !a.trim().is_empty() => format!("{} {}", self.title, a),
            _ => self.title.clone(),
        }
    }
}

/// Result of parsing one export file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseOutcome {
    pub records: Vec<RawRecord>,
    /// Entries dropped because they had no usable title.
    pub skipped: usize,
    pub warnings: Vec<String>,
}

pub fn parse<R: std::io::Read>(
    format: Format,
    mut source: R,
    query: &QuerySpec,
) -> Result<ParseOutcome, RecordsError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes).map_err(|e| RecordsError::MalformedInput {
        locator: "stream".into(),
        message: e.to_string(),
    })?;
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(RecordsError::EmptyInput);
    }
    let entries = match format {
        Format::Csv => parse_csv(&bytes)?,
        Format::Bibtex => parse_bibtex(&decode_utf8(&bytes)?)?,
        Format::Ris => parse_ris(&decode_utf8(&bytes)?)?,
    };

    let mut out = ParseOutcome::default();
    for entry in entries {
        match entry.into_raw(query) {
            Some(raw) => out.records.push(raw),
            None => out.skipped += 1,
        }
    }
    if out.records.is_empty() && out.skipped == 0 {
        out.warnings.push(format!("{}: {}", query.id, RecordsError::EmptyInput));
    }
    if out.skipped > 0 {
        out.warnings.push(format!(
            "{}: skipped {} entr{} without a title",
            query.id,
            out.skipped,
            if out.skipped == 1 { "y" } else { "ies" }
        ));
    }
    Ok(out)
}

fn decode_utf8(bytes: &[u8]) -> Result<String, RecordsError> {
    let s = std::str::from_utf8(bytes).map_err(|e| RecordsError::MalformedInput {
        locator: format!("byte {}", e.valid_up_to()),
        message: "invalid UTF-8".into(),
    })?;
    Ok(s.strip_prefix('\u{feff}').unwrap_or(s).to_string())
}

/// Source-agnostic intermediate between a format parser and [`RawRecord`].
#[derive(Default)]
struct Entry {
    title: Option<String>,
    abstract_text: Option<String>,
    authors: Vec<String>,
    year: Option<String>,
    venue: Option<String>,
    doi: Option<String>,
    extra: BTreeMap<String, String>,
}

impl Entry {
    fn into_raw(mut self, query: &QuerySpec) -> Option<RawRecord> {
        let title = clean(self.title.as_deref()?);
        if title.is_empty() {
            return None;
        }
        let year = match self.year.as_deref().map(str::trim).filter(|y| !y.is_empty()) {
            None => None,
            Some(raw) => {
                let parsed = parse_year(raw);
                if parsed.is_none() {
                    self.extra.insert("year_raw".into(), raw.to_string());
                }
                parsed
            }
        };
        let non_empty = |v: Option<String>| v.map(|s| clean(&s)).filter(|s| !s.is_empty());
        Some(RawRecord {
            source_db: query.database.clone(),
            query_id: query.id.clone(),
            title,
            abstract_text: non_empty(self.abstract_text),
            authors: self.authors.iter().map(|a| clean(a)).filter(|a| !a.is_empty()).collect(),
            year,
            venue: non_empty(self.venue),
            doi: non_empty(self.doi),
            extra: self.extra,
        })
    }
}

fn clean(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// First run of four digits, accepted when it falls in 1900..=2100.
fn parse_year(raw: &str) -> Option<i32> {
    let bytes = raw.as_bytes();
    let mut i = 0;
    while i + 4 <= bytes.len() {
        if bytes[i..i + 4].iter().all(u8::is_ascii_digit)
            && !bytes.get(i + 4).is_some_and(u8::is_ascii_digit)
        {
            let y: i32 = raw[i..i + 4].parse().ok()?;
            return (1900..=2100).contains(&y).then_some(y);
        }
        i += 1;
    }
    None
}

// CSV (IEEE Xplore export shape)

fn parse_csv(bytes: &[u8]) -> Result<Vec<Entry>, RecordsError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(&e))?
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let h = if i == 0 { h.trim_start_matches('\u{feff}') } else { h };
            h.trim().to_string()
        })
        .collect();

    let mut entries = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(&e))?;
        let mut entry = Entry::default();
        for (name, value) in headers.iter().zip(row.iter()) {
            let value = value.trim();
            match name.as_str() {
                "Document Title" => entry.title = Some(value.to_string()),
                "Abstract" => entry.abstract_text = Some(value.to_string()),
                "Authors" => {
                    entry.authors = value.split(';').map(str::trim).filter(|a| !a.is_empty()).map(String::from).collect()
                }
                "Publication Year" => entry.year = Some(value.to_string()),
                "Publication Title" => entry.venue = Some(value.to_string()),
                "DOI" => entry.doi = Some(value.to_string()),
                _ if !value.is_empty() => {
                    entry.extra.insert(name.clone(), value.to_string());
                }
                _ => {}
            }
        }
        entries.push(entry);
    }
    Ok(entries)
}

fn csv_error(e: &csv::Error) -> RecordsError {
    let locator = e
        .position()
        .map(|p| format!("line {}", p.line()))
        .unwrap_or_else(|| "csv".to_string());
    RecordsError::MalformedInput { locator, message: e.to_string() }
}

// BibTeX

struct BibCursor {
    chars: Vec<char>,
    pos: usize,
}

impl BibCursor {
    fn new(src: &str) -> Self {
        BibCursor { chars: src.chars().collect(), pos: 0 }
    }

    fn line_at(&self, pos: usize) -> usize {
        1 + self.chars[..pos.min(self.chars.len())].iter().filter(|c| **c == '\n').count()
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn take_while(&mut self, f: impl Fn(char) -> bool) -> String {
        let start = self.pos;
        while self.peek().is_some_and(&f) {
            self.pos += 1;
        }
        self.chars[start..self.pos].iter().collect()
    }

    /// Reads a `{...}` group (cursor on the opening brace); returns the inner text.
    fn braced(&mut self) -> Option<String> {
        debug_assert_eq!(self.peek(), Some('{'));
        self.pos += 1;
        let start = self.pos;
        let mut depth = 1usize;
        while let Some(c) = self.peek() {
            match c {
                '\\' => self.pos += 1,
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        let inner = self.chars[start..self.pos].iter().collect();
                        self.pos += 1;
                        return Some(inner);
                    }
                }
                _ => {}
            }
            self.pos += 1;
        }
        None
    }

    fn quoted(&mut self) -> Option<String> {
        self.pos += 1;
        let start = self.pos;
        let mut depth = 0usize;
        while let Some(c) = self.peek() {
            match c {
                '\\' => self.pos += 1,
                '{' => depth += 1,
                '}' => depth = depth.saturating_sub(1),
                '"' if depth == 0 => {
                    let inner = self.chars[start..self.pos].iter().collect();
                    self.pos += 1;
                    return Some(inner);
                }
                _ => {}
            }
            self.pos += 1;
        }
        None
    }
}

fn parse_bibtex(src: &str) -> Result<Vec<Entry>, RecordsError> {
    let mut cur = BibCursor::new(src);
    let mut entries = Vec::new();
    loop {
        while cur.peek().is_some_and(|c| c != '@') {
            cur.pos += 1;
        }
        if cur.peek().is_none() {
            break;
        }
        let start = cur.pos;
        let malformed = |cur: &BibCursor, message: &str| RecordsError::MalformedInput {
            locator: format!("entry at line {}", cur.line_at(start)),
            message: message.to_string(),
        };
        cur.pos += 1;
        let kind = cur.take_while(|c| c.is_ascii_alphanumeric() || c == '_').to_ascii_lowercase();
        cur.skip_ws();
        let close = match cur.peek() {
            Some('{') => '}',
            Some('(') => ')',
            _ => return Err(malformed(&cur, "expected `{` or `(` after entry type")),
        };
        if matches!(kind.as_str(), "comment" | "preamble" | "string") {
            if close == '}' {
                cur.braced().ok_or_else(|| malformed(&cur, "unbalanced braces"))?;
            } else {
                while cur.peek().is_some_and(|c| c != ')') {
                    cur.pos += 1;
                }
                cur.pos += 1;
            }
            continue;
        }
        cur.pos += 1;
        cur.skip_ws();
        let key = cur.take_while(|c| c != ',' && c != close && !c.is_whitespace());
        cur.skip_ws();
        let mut entry = Entry::default();
        entry.extra.insert("entry_type".into(), kind.clone());
        if !key.is_empty() {
            entry.extra.insert("bibtex_key".into(), key);
        }
        loop {
            cur.skip_ws();
            match cur.peek() {
                Some(',') => {
                    cur.pos += 1;
                    continue;
                }
                Some(c) if c == close => {
                    cur.pos += 1;
                    break;
                }
                None => return Err(malformed(&cur, "unexpected end of input inside entry")),
                _ => {}
            }
            let name = cur
                .take_while(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | ':' | '.'))
                .to_ascii_lowercase();
            if name.is_empty() {
                return Err(malformed(&cur, "expected a field name"));
            }
            cur.skip_ws();
            if cur.peek() != Some('=') {
                return Err(malformed(&cur, &format!("expected `=` after field `{name}`")));
            }
            cur.pos += 1;
            let mut value = String::new();
            loop {
                cur.skip_ws();
                let part = match cur.peek() {
                    Some('{') => cur.braced().ok_or_else(|| malformed(&cur, "unbalanced braces"))?,
                    Some('"') => cur.quoted().ok_or_else(|| malformed(&cur, "unterminated string"))?,
                    Some(c) if c.is_alphanumeric() => cur.take_while(|c| c.is_alphanumeric() || c == '_'),
                    _ => return Err(malformed(&cur, &format!("bad value for field `{name}`"))),
                };
                value.push_str(&part);
                cur.skip_ws();
                if cur.peek() == Some('#') {
                    cur.pos += 1;
                    continue;
                }
                break;
            }
            let value = delatex(&value);
            match name.as_str() {
                "title" => entry.title = Some(value),
                "abstract" => entry.abstract_text = Some(value),
                "author" => entry.authors = split_bib_authors(&value),
                "year" => entry.year = Some(value),
                "journal" => entry.venue = Some(value),
                "booktitle" => {
                    if entry.venue.is_none() {
                        entry.venue = Some(value)
                    }
                }
                "doi" => entry.doi = Some(value),
                _ => {
                    entry.extra.insert(name, value);
                }
            }
        }
        entries.push(entry);
    }
    Ok(entries)
}

fn delatex(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    let mut chars = v.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' | '}' => {}
            '\\' => match chars.peek() {
                Some(&n) if "&%$#_{}".contains(n) => {
                    out.push(n);
                    chars.next();
                }
                _ => out.push(c),
            },
            _ => out.push(c),
        }
    }
    clean(&out)
}

fn split_bib_authors(v: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = v;
    while let Some(idx) = find_and(rest) {
        out.push(rest[..idx].trim().to_string());
        rest = &rest[idx + 5..];
    }
    out.push(rest.trim().to_string());
    out.retain(|a| !a.is_empty());
    out
}

fn find_and(s: &str) -> Option<usize> {
    s.match_indices(" and ").map(|(i, _)| i).next()
}

// RIS

fn parse_ris(src: &str) -> Result<Vec<Entry>, RecordsError> {
    let mut entries = Vec::new();
    let mut current: Option<(usize, Vec<(String, String)>)> = None;
    for (idx, line) in src.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim_end_matches('\r');
        match ris_tag(line) {
            Some(("TY", _)) => {
                if let Some((start, _)) = &current {
                    return Err(RecordsError::MalformedInput {
                        locator: format!("line {lineno}"),
                        message: format!("TY before ER for record starting at line {start}"),
                    });
                }
                current = Some((lineno, Vec::new()));
            }
            Some(("ER", _)) => match current.take() {
                Some((_, fields)) => entries.push(ris_entry(fields)),
                None => {
                    return Err(RecordsError::MalformedInput {
                        locator: format!("line {lineno}"),
                        message: "ER without a matching TY".into(),
                    })
                }
            },
            Some((tag, value)) => match current.as_mut() {
                Some((_, fields)) => fields.push((tag.to_string(), value.to_string())),
                None => {
                    return Err(RecordsError::MalformedInput {
                        locator: format!("line {lineno}"),
                        message: format!("tag {tag} outside of a record"),
                    })
                }
            },
            None if line.trim().is_empty() => {}
            None => match current.as_mut().and_then(|(_, f)| f.last_mut()) {
                // Wrapped continuation of the previous tag's value.
                Some((_, value)) => {
                    value.push(' ');
                    value.push_str(line.trim());
                }
                None => {
                    return Err(RecordsError::MalformedInput {
                        locator: format!("line {lineno}"),
                        message: "text outside of a tagged field".into(),
                    })
                }
            },
        }
    }
    if let Some((start, _)) = current {
        return Err(RecordsError::MalformedInput {
            locator: format!("line {start}"),
            message: "record not terminated by ER".into(),
        });
    }
    Ok(entries)
}

/// Splits `XX  - value`; the value part may be absent on `ER  -`.
fn ris_tag(line: &str) -> Option<(&str, &str)> {
    let b = line.as_bytes();
    if b.len() < 5 || !b[0].is_ascii_uppercase() || !(b[1].is_ascii_uppercase() || b[1].is_ascii_digit()) {
        return None;
    }
    if &b[2..5] != b"  -" {
        return None;
    }
    let value = line.get(5..).unwrap_or("");
    Some((&line[..2], value.strip_prefix(' ').unwrap_or(value).trim_end()))
}

fn ris_entry(fields: Vec<(String, String)>) -> Entry {
    let mut entry = Entry::default();
    for (tag, value) in fields {
        match tag.as_str() {
            "TI" => entry.title = Some(value),
            "AB" => entry.abstract_text = Some(value),
            "AU" => entry.authors.push(value),
            "PY" => entry.year = Some(value),
            "T2" => entry.venue = Some(value),
            "DO" => entry.doi = Some(value),
            _ => {
                entry
                    .extra
                    .entry(tag)
                    .and_modify(|v: &mut String| {
                        v.push_str("; ");
                        v.push_str(&value)
                    })
                    .or_insert(value);
            }
        }
    }
    entry
}

// Normalization

/// Lowercases and collapses every run of non-alphanumeric characters to one space.
pub fn normalize_title(title: &str) -> String {
    let mut out = String::with_capacity(title.len());
    let mut pending_space = false;
    for c in title.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        } else {
            pending_space = true;
        }
    }
    out
}

const DOI_PREFIXES: [&str; 7] = [
    "https://doi.org/",
    "http://doi.org/",
    "https://dx.doi.org/",
    "http://dx.doi.org/",
    "doi.org/",
    "dx.doi.org/",
    "doi:",
];

/// Lowercased DOI with resolver prefixes removed; `None` when nothing is left.
pub fn normalize_doi(doi: &str) -> Option<String> {
    let mut d = doi.trim().to_lowercase();
    loop {
        let before = d.len();
        for p in DOI_PREFIXES {
            if let Some(rest) = d.strip_prefix(p) {
                d = rest.trim_start().to_string();
            }
        }
        if d.len() == before {
            break;
        }
    }
    let d = d.trim().to_string();
    (!d.is_empty()).then_some(d)
}

/// 16-byte SHA-256 prefix over the identity key, as lowercase hex.
pub fn record_id(doi_norm: Option<&str>, title_norm: &str) -> String {
    let key = match doi_norm {
        Some(d) => format!("doi:{d}"),
        None => format!("title:{title_norm}"),
    };
    hex::encode(&Sha256::digest(key.as_bytes())[..16])
}

pub fn normalize(raw: &RawRecord) -> Record {
    let title_norm = normalize_title(&raw.title);
    let doi_norm = raw.doi.as_deref().and_then(normalize_doi);
    let abstract_text = raw.abstract_text.clone().filter(|a| !a.trim().is_empty());
    Record {
        id: record_id(doi_norm.as_deref(), &title_norm),
        title: raw.title.clone(),
        title_norm,
        missing_abstract: abstract_text.is_none(),
        abstract_text,
        doi_norm,
        authors: raw.authors.clone(),
        year: raw.year,
        venue: raw.venue.clone(),
        provenance: vec![Provenance { source_db: raw.source_db.clone(), query_id: raw.query_id.clone() }],
    }
}

// Deduplication

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKey {
    Doi,
    Title,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeEntry {
    pub kept_id: String,
    pub dropped_id: String,
    pub dropped_source: Vec<Provenance>,
    pub matched_on: MatchKey,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateReport {
    pub input_count: usize,
    pub unique_count: usize,
    pub duplicates_removed: usize,
    pub merge_log: Vec<MergeEntry>,
}

/// Removes duplicates, keeping the first-seen record of each group.
///
/// A record is a duplicate when its DOI was seen before (checked first) or its
/// normalized title was seen before. Keys of dropped records are attributed to
/// their keeper, so later records matching them merge into the same keeper.
pub fn dedupe(records: Vec<Record>) -> (Vec<Record>, DuplicateReport) {
    let input_count = records.len();
    let mut kept: Vec<Record> = Vec::new();
    let mut by_doi: HashMap<String, usize> = HashMap::new();
    let mut by_title: HashMap<String, usize> = HashMap::new();
    let mut merge_log = Vec::new();

    for rec in records {
        let hit = rec
            .doi_norm
            .as_ref()
            .and_then(|d| by_doi.get(d))
            .map(|&k| (k, MatchKey::Doi))
            .or_else(|| by_title.get(&rec.title_norm).map(|&k| (k, MatchKey::Title)));
        let target = match hit {
            Some((k, matched_on)) => {
                let keeper = &mut kept[k];
                for p in &rec.provenance {
                    if !keeper.provenance.contains(p) {
                        keeper.provenance.push(p.clone());
                    }
                }
                merge_log.push(MergeEntry {
                    kept_id: keeper.id.clone(),
                    dropped_id: rec.id.clone(),
                    dropped_source: rec.provenance.clone(),
                    matched_on,
                });
                k
            }
            None => {
                kept.push(rec.clone());
                kept.len() - 1
            }
        };
        if let Some(d) = &rec.doi_norm {
            by_doi.entry(d.clone()).or_insert(target);
        }
        by_title.entry(rec.title_norm.clone()).or_insert(target);
    }

    let unique_count = kept.len();
    let report = DuplicateReport {
        input_count,
        unique_count,
        duplicates_removed: input_count - unique_count,
        merge_log,
    };
    (kept, report)
}

// Canonical record store (JSON lines)

pub fn write_jsonl<T: Serialize, W: Write>(items: &[T], mut out: W) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(input: R) -> Result<Vec<T>, RecordsError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| RecordsError::Store { line: i + 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| RecordsError::Store { line: i + 1, message: e.to_string() })?,
        );
    }
    Ok(out)
}

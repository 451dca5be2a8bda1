//! Three-way triage of scored records, with an audit trail of human overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::SimilarityScore;
use crate::mixture::Cutoffs;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TriageError {
    #[error("no scores to partition")]
    EmptyScores,
    #[error("record `{0}` scored more than once")]
    DuplicateRecord(String),
    #[error("unknown record `{0}`")]
    UnknownRecord(String),
    #[error("override reason must not be empty")]
    EmptyReason,
    #[error("invalid cutoffs: lower {lower}, upper {upper}")]
    InvalidCutoffs { lower: f64, upper: f64 },
    #[error("unknown bin `{0}`")]
    UnknownBin(String),
    #[error("triage file: {0}")]
    File(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bin {
    Excluded,
    #[serde(rename = "GenAIReview")]
    GenAiReview,
    HumanReview,
}

impl fmt::Display for Bin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bin::Excluded => "Excluded",
            Bin::GenAiReview => "GenAIReview",
            Bin::HumanReview => "HumanReview",
        })
    }
}

impl FromStr for Bin {
    type Err = TriageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "excluded" => Ok(Bin::Excluded),
            "genaireview" | "genai" => Ok(Bin::GenAiReview),
            "humanreview" | "human" => Ok(Bin::HumanReview),
            _ => Err(TriageError::UnknownBin(s.to_string())),
        }
    }
}

/// Bin for a score: below `lower` is excluded, above `upper` goes to humans,
/// and anything on or between the cutoffs goes to GenAI review.
pub fn classify(s: f64, lower: f64, upper: f64) -> Bin {
    if s < lower {
        Bin::Excluded
    } else if s > upper {
        Bin::HumanReview
    } else {
        Bin::GenAiReview
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageCounts {
    pub excluded: usize,
    pub genai: usize,
    pub human: usize,
}

impl TriageCounts {
    pub fn total(&self) -> usize {
        self.excluded + self.genai + self.human
    }

    fn bump(&mut self, bin: Bin, delta: isize) {
        let slot = match bin {
            Bin::Excluded => &mut self.excluded,
            Bin::GenAiReview => &mut self.genai,
            Bin::HumanReview => &mut self.human,
        };
        *slot = slot.checked_add_signed(delta).expect("bin count underflow");
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Override {
    pub record_id: String,
    pub from_bin: Bin,
    pub to_bin: Bin,
    pub reason: String,
    pub reviewer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageResult {
    pub assignments: BTreeMap<String, Bin>,
    /// Score each assignment was made from.
    pub scores: BTreeMap<String, f64>,
    pub cutoffs: Cutoffs,
    pub counts: TriageCounts,
    pub overrides: Vec<Override>,
}

impl TriageResult {
    pub fn recount(&self) -> TriageCounts {
        let mut c = TriageCounts::default();
        for bin in self.assignments.values() {
            c.bump(*bin, 1);
        }
        c
    }

    pub fn is_overridden(&self, record_id: &str) -> bool {
        self.overrides.iter().any(|o| o.record_id == record_id)
    }

    /// Record ids currently in `bin`, in id order.
    pub fn ids_in(&self, bin: Bin) -> Vec<&str> {
        self.assignments.iter().filter(|(_, b)| **b == bin).map(|(id, _)| id.as_str()).collect()
    }

    /// Triage file: CSV `record_id,s,bin,overridden`.
    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(["record_id", "s", "bin", "overridden"]).expect("in-memory write");
        for (id, bin) in &self.assignments {
            let s = self.scores.get(id).copied().unwrap_or(f64::NAN);
            w.write_record([
                id.as_str(),
                &crate::canon::fmt_sig(s, crate::canon::SIG_DIGITS),
                &bin.to_string(),
                if self.is_overridden(id) { "true" } else { "false" },
            ])
            .expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

pub fn partition(scores: &[SimilarityScore], cutoffs: &Cutoffs) -> Result<TriageResult, TriageError> {
    if scores.is_empty() {
        return Err(TriageError::EmptyScores);
    }
    let (lower, upper) = (cutoffs.lower, cutoffs.upper);
    if !(0.0..=1.0).contains(&lower) || !(0.0..=1.0).contains(&upper) || lower > upper {
        return Err(TriageError::InvalidCutoffs { lower, upper });
    }
    let mut assignments = BTreeMap::new();
    let mut by_id = BTreeMap::new();
    let mut counts = TriageCounts::default();
    for sc in scores {
        if by_id.insert(sc.record_id.clone(), sc.s).is_some() {
            return Err(TriageError::DuplicateRecord(sc.record_id.clone()));
        }
        let bin = classify(sc.s, lower, upper);
        counts.bump(bin, 1);
        assignments.insert(sc.record_id.clone(), bin);
    }
    Ok(TriageResult { assignments, scores: by_id, cutoffs: cutoffs.clone(), counts, overrides: Vec::new() })
}

/// Moves one record to another bin and logs the move. Scores are left untouched.
pub fn override_bin(
    result: &TriageResult,
    record_id: &str,
    to_bin: Bin,
    reason: &str,
    reviewer: &str,
) -> Result<TriageResult, TriageError> {
    if reason.trim().is_empty() {
        return Err(TriageError::EmptyReason);
    }
    let from_bin = *result
        .assignments
        .get(record_id)
        .ok_or_else(|| TriageError::UnknownRecord(record_id.to_string()))?;
    let mut next = result.clone();
    next.assignments.insert(record_id.to_string(), to_bin);
    next.counts.bump(from_bin, -1);
    next.counts.bump(to_bin, 1);
    next.overrides.push(Override {
        record_id: record_id.to_string(),
        from_bin,
        to_bin,
        reason: reason.to_string(),
        reviewer: reviewer.to_string(),
    });
    debug_assert_eq!(next.counts, next.recount());
    Ok(next)
}

/// Replays an override log on top of a fresh partition.
pub fn apply_overrides(result: &TriageResult, log: &[Override]) -> Result<TriageResult, TriageError> {
    log.iter().try_fold(result.clone(), |acc, o| override_bin(&acc, &o.record_id, o.to_bin, &o.reason, &o.reviewer))
}

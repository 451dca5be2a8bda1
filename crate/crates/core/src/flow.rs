//! Flow-diagram bookkeeping across the Identification, Pre-Screening,
//! Screening and Included phases, with stage-to-stage reconciliation and
//! Mermaid / DOT / plain-text renderers.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mixture::{histogram, pdf_eval, Cutoffs, GmmParams, MixtureError};
use crate::records::{DuplicateReport, QuerySpec};
use crate::triage::TriageResult;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("reconciliation failed at {stage}: {equation} (expected {expected}, got {actual})")]
    ReconciliationError { stage: String, equation: String, expected: u64, actual: u64 },
    #[error("inputs come from different runs (expected params hash {expected}, got {actual})")]
    HashMismatch { expected: String, actual: String },
    #[error("counts do not reconcile: {0}")]
    UnreconciledCounts(String),
    #[error("unknown render format `{0}` (expected mermaid, dot or text)")]
    UnknownFormat(String),
    #[error(transparent)]
    Histogram(#[from] MixtureError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentifiedSource {
    pub query_id: String,
    pub database: String,
    pub scope_label: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identification {
    pub sources: Vec<IdentifiedSource>,
    pub duplicates_removed: u64,
    /// Entries dropped at ingest (no usable title).
    pub ingest_skipped: u64,
    /// Records that could not be scored (e.g. no tokens to embed).
    pub unscorable: u64,
}

impl Identification {
    pub fn total(&self) -> u64 {
        self.sources.iter().map(|s| s.count).sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prescreening {
    pub scored: u64,
    pub excluded: u64,
    pub genai: u64,
    pub human: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionReason {
    pub reason: String,
    pub count: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Screening {
    pub manual_screened: u64,
    pub manual_excluded: Vec<ExclusionReason>,
    pub genai_screened: u64,
    pub reports_sought: u64,
    pub reports_not_retrieved: u64,
}

impl Screening {
    pub fn manual_excluded_total(&self) -> u64 {
        self.manual_excluded.iter().map(|r| r.count).sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Included {
    pub human_studies: u64,
    pub genai_studies: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowCounts {
    pub identification: Identification,
    pub prescreening: Prescreening,
    pub screening: Screening,
    pub included: Included,
}

/// Tallies from the screening and inclusion phases, supplied by the reviewers.
/// Screened counts default to the corresponding triage bins.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScreeningTallies {
    pub manual_screened: Option<u64>,
    pub genai_screened: Option<u64>,
    pub manual_excluded: Vec<ExclusionReason>,
    pub reports_sought: u64,
    pub reports_not_retrieved: u64,
    pub human_studies: u64,
    pub genai_studies: u64,
}

/// Records lost between identification and scoring for reasons other than duplication.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrescreenLosses {
    pub ingest_skipped: u64,
    pub unscorable: u64,
}

pub struct FlowInputs<'a> {
    pub queries: &'a [QuerySpec],
    pub duplicates: &'a DuplicateReport,
    pub triage: &'a TriageResult,
    pub tallies: &'a ScreeningTallies,
    pub losses: PrescreenLosses,
    /// When set, the triage cutoffs must have been derived from this model.
    pub expected_params_hash: Option<&'a str>,
}

fn equal(stage: &str, equation: &str, expected: u64, actual: u64) -> Result<(), FlowError> {
    if expected == actual {
        Ok(())
    } else {
        Err(FlowError::ReconciliationError { stage: stage.into(), equation: equation.into(), expected, actual })
    }
}

fn at_most(stage: &str, equation: &str, bound: u64, actual: u64) -> Result<(), FlowError> {
    if actual <= bound {
        Ok(())
    } else {
        Err(FlowError::ReconciliationError { stage: stage.into(), equation: equation.into(), expected: bound, actual })
    }
}

pub fn build_flow(inputs: &FlowInputs<'_>) -> Result<FlowCounts, FlowError> {
    if let Some(expected) = inputs.expected_params_hash {
        let actual = &inputs.triage.cutoffs.params_hash;
        if expected != actual {
            return Err(FlowError::HashMismatch { expected: expected.to_string(), actual: actual.clone() });
        }
    }
    let dup = inputs.duplicates;
    let identified: u64 = inputs.queries.iter().map(|q| q.reported_count).sum();
    equal(
        "identification",
        "sum(reported) - ingest_skipped = dedupe input",
        identified.saturating_sub(inputs.losses.ingest_skipped),
        dup.input_count as u64,
    )?;
    at_most("identification", "ingest_skipped <= sum(reported)", identified, inputs.losses.ingest_skipped)?;
    equal(
        "deduplication",
        "dedupe input - duplicates_removed = unique",
        dup.input_count as u64 - dup.duplicates_removed.min(dup.input_count) as u64,
        dup.unique_count as u64,
    )?;

    let triage = inputs.triage;
    let scored = triage.assignments.len() as u64;
    equal(
        "prescreening",
        "unique - unscorable = scored",
        (dup.unique_count as u64).saturating_sub(inputs.losses.unscorable),
        scored,
    )?;
    let counts = triage.recount();
    equal("prescreening", "recorded bin counts = assignments", counts.total() as u64, triage.counts.total() as u64)?;
    if counts != triage.counts {
        return Err(FlowError::ReconciliationError {
            stage: "prescreening".into(),
            equation: "recorded bin counts = assignments".into(),
            expected: counts.genai as u64,
            actual: triage.counts.genai as u64,
        });
    }
    let pre = Prescreening {
        scored,
        excluded: counts.excluded as u64,
        genai: counts.genai as u64,
        human: counts.human as u64,
    };

    let t = inputs.tallies;
    let screening = Screening {
        manual_screened: t.manual_screened.unwrap_or(pre.human),
        manual_excluded: t.manual_excluded.clone(),
        genai_screened: t.genai_screened.unwrap_or(pre.genai),
        reports_sought: t.reports_sought,
        reports_not_retrieved: t.reports_not_retrieved,
    };
    let flow = FlowCounts {
        identification: Identification {
            sources: inputs
                .queries
                .iter()
                .map(|q| IdentifiedSource {
                    query_id: q.id.clone(),
                    database: q.database.clone(),
                    scope_label: q.scope_label.clone(),
                    count: q.reported_count,
                })
                .collect(),
            duplicates_removed: dup.duplicates_removed as u64,
            ingest_skipped: inputs.losses.ingest_skipped,
            unscorable: inputs.losses.unscorable,
        },
        prescreening: pre,
        screening,
        included: Included { human_studies: t.human_studies, genai_studies: t.genai_studies },
    };
    reconcile(&flow)?;
    Ok(flow)
}

/// Checks every conservation equation of a flow.
pub fn reconcile(f: &FlowCounts) -> Result<(), FlowError> {
    let id = &f.identification;
    let removed = id.duplicates_removed + id.ingest_skipped + id.unscorable;
    at_most("identification", "removed before pre-screening <= identified", id.total(), removed)?;
    equal("identification", "identified - removed = scored", id.total() - removed, f.prescreening.scored)?;
    let p = &f.prescreening;
    equal("prescreening", "excluded + genai + human = scored", p.scored, p.excluded + p.genai + p.human)?;
    let s = &f.screening;
    equal("screening", "manual_screened = human bin", p.human, s.manual_screened)?;
    equal("screening", "genai_screened = genai bin", p.genai, s.genai_screened)?;
    at_most("screening", "manual excluded <= manual_screened", s.manual_screened, s.manual_excluded_total())?;
    at_most("screening", "reports_not_retrieved <= reports_sought", s.reports_sought, s.reports_not_retrieved)?;
    at_most("included", "human_studies <= manual_screened", s.manual_screened, f.included.human_studies)?;
    at_most("included", "genai_studies <= genai_screened", s.genai_screened, f.included.genai_studies)?;
    Ok(())
}

// Rendering

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderFormat {
    Mermaid,
    Dot,
    Text,
}

impl RenderFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            RenderFormat::Mermaid => "mmd",
            RenderFormat::Dot => "dot",
            RenderFormat::Text => "txt",
        }
    }
}

impl FromStr for RenderFormat {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mermaid" => Ok(RenderFormat::Mermaid),
            "dot" => Ok(RenderFormat::Dot),
            "text" => Ok(RenderFormat::Text),
            other => Err(FlowError::UnknownFormat(other.to_string())),
        }
    }
}

pub const PHASES: [&str; 4] = ["Identification", "Pre-Screening", "Screening", "Included"];

struct Node {
    id: String,
    lines: Vec<String>,
    n: u64,
}

struct Phase {
    key: &'static str,
    title: &'static str,
    nodes: Vec<Node>,
}

fn node(id: impl Into<String>, label: impl Into<String>, n: u64) -> Node {
    Node { id: id.into(), lines: vec![label.into()], n }
}

fn layout(f: &FlowCounts) -> (Vec<Phase>, Vec<(String, String)>) {
    let id = &f.identification;
    let mut ident: Vec<Node> = id
        .sources
        .iter()
        .enumerate()
        .map(|(i, s)| node(format!("id_src{}", i + 1), format!("{} ({}): {}", s.database, s.query_id, s.scope_label), s.count))
        .collect();
    ident.push(node("id_total", "Records identified", id.total()));
    let mut removed = node("id_removed", "Records removed before pre-screening", id.duplicates_removed + id.ingest_skipped + id.unscorable);
    removed.lines.push(format!("Duplicate records: n = {}", id.duplicates_removed));
    removed.lines.push(format!("Records without a title: n = {}", id.ingest_skipped));
    removed.lines.push(format!("Records that could not be scored: n = {}", id.unscorable));
    ident.push(removed);

    let p = &f.prescreening;
    let pre = vec![
        node("ps_scored", "Records scored against the intent statement", p.scored),
        node("ps_excluded", "Records excluded below the lower cutoff", p.excluded),
        node("ps_genai", "Records between the cutoffs, for GenAI screening", p.genai),
        node("ps_human", "Records above the upper cutoff, for manual screening", p.human),
    ];

    let s = &f.screening;
    let mut excluded = node("sc_manual_excluded", "Records excluded after manual screening", s.manual_excluded_total());
    for r in &s.manual_excluded {
        excluded.lines.push(format!("{}: n = {}", r.reason, r.count));
    }
    let screening = vec![
        node("sc_manual", "Records screened manually", s.manual_screened),
        excluded,
        node("sc_genai", "Records screened and summarised using GenAI", s.genai_screened),
        node("sc_sought", "Reports sought for retrieval", s.reports_sought),
        node("sc_not_retrieved", "Reports not retrieved", s.reports_not_retrieved),
    ];

    let included = vec![
        node("in_human", "Studies included from manual review", f.included.human_studies),
        node("in_genai", "Studies included from GenAI review", f.included.genai_studies),
    ];

    let mut edges: Vec<(String, String)> =
        (1..=id.sources.len()).map(|i| (format!("id_src{i}"), "id_total".to_string())).collect();
    for (a, b) in [
        ("id_total", "id_removed"),
        ("id_total", "ps_scored"),
        ("ps_scored", "ps_excluded"),
        ("ps_scored", "ps_genai"),
        ("ps_scored", "ps_human"),
        ("ps_human", "sc_manual"),
        ("ps_genai", "sc_genai"),
        ("sc_manual", "sc_manual_excluded"),
        ("sc_manual", "sc_sought"),
        ("sc_genai", "sc_sought"),
        ("sc_sought", "sc_not_retrieved"),
        ("sc_sought", "in_human"),
        ("sc_sought", "in_genai"),
    ] {
        edges.push((a.to_string(), b.to_string()));
    }

    let phases = vec![
        Phase { key: "identification", title: PHASES[0], nodes: ident },
        Phase { key: "prescreening", title: PHASES[1], nodes: pre },
        Phase { key: "screening", title: PHASES[2], nodes: screening },
        Phase { key: "included", title: PHASES[3], nodes: included },
    ];
    (phases, edges)
}

fn mermaid_escape(s: &str) -> String {
    s.replace('"', "#quot;").replace('<', "#lt;").replace('>', "#gt;")
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

pub fn render_flow(counts: &FlowCounts, format: RenderFormat) -> Result<String, FlowError> {
    reconcile(counts).map_err(|e| FlowError::UnreconciledCounts(e.to_string()))?;
    let (phases, edges) = layout(counts);
    let mut out = String::new();
    match format {
        RenderFormat::Mermaid => {
            out.push_str("flowchart TD\n");
            for phase in &phases {
                let _ = writeln!(out, "    subgraph {}[\"{}\"]", phase.key, phase.title);
                for n in &phase.nodes {
                    let mut label: Vec<String> = n.lines.iter().map(|l| mermaid_escape(l)).collect();
                    label.insert(1, format!("n = {}", n.n));
                    let _ = writeln!(out, "        {}[\"{}: {}\"]", n.id, phase.title, label.join("<br/>"));
                }
                out.push_str("    end\n");
            }
            for (a, b) in &edges {
                let _ = writeln!(out, "    {a} --> {b}");
            }
        }
        RenderFormat::Dot => {
            out.push_str("digraph lprisma {\n    rankdir=TB;\n    node [shape=box];\n");
            for phase in &phases {
                let _ = writeln!(out, "    subgraph cluster_{} {{\n        label=\"{}\";", phase.key, phase.title);
                for n in &phase.nodes {
                    let mut label: Vec<String> = n.lines.iter().map(|l| dot_escape(l)).collect();
                    label.insert(1, format!("n = {}", n.n));
                    let _ = writeln!(out, "        {} [label=\"{}: {}\"];", n.id, phase.title, label.join("\\n"));
                }
                out.push_str("    }\n");
            }
            for (a, b) in &edges {
                let _ = writeln!(out, "    {a} -> {b};");
            }
            out.push_str("}\n");
        }
        RenderFormat::Text => {
            for (i, phase) in phases.iter().enumerate() {
                if i > 0 {
                    out.push('\n');
                }
                let _ = writeln!(out, "{}\n{}", phase.title, "-".repeat(phase.title.len()));
                for n in &phase.nodes {
                    let _ = writeln!(out, "  {}: n = {}", n.lines[0], n.n);
                    for extra in &n.lines[1..] {
                        let _ = writeln!(out, "    {extra}");
                    }
                }
            }
        }
    }
    Ok(out)
}

// Score-distribution exports

/// Histogram CSV `bin_left,bin_right,density,pdf,lower_cutoff,upper_cutoff`;
/// `pdf` is the fitted density at the bin centre.
pub fn export_histogram(scores: &[f64], params: &GmmParams, cutoffs: &Cutoffs, bins: usize) -> Result<String, FlowError> {
    let h = histogram(scores, bins)?;
    let dens = h.densities();
    let mut out = String::from("bin_left,bin_right,density,pdf,lower_cutoff,upper_cutoff\n");
    for (edge, d) in h.edges.windows(2).zip(&dens) {
        let (l, r) = (edge[0], edge[1]);
        let _ = writeln!(
            out,
            "{l},{r},{},{},{},{}",
            d,
            pdf_eval(params, 0.5 * (l + r)),
            cutoffs.lower,
            cutoffs.upper
        );
    }
    Ok(out)
}

/// Density curve CSV `s,p(s)` over evenly spaced points in `[0, 1]`.
pub fn export_pdf_curve(params: &GmmParams, points: usize) -> String {
    let mut out = String::from("s,p(s)\n");
    for (s, p) in crate::mixture::pdf_curve(params, points) {
        let _ = writeln!(out, "{s},{p}");
    }
    out
}

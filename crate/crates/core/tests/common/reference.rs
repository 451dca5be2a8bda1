//! Counts from the reference review: four search queries, 72 duplicates and a
//! 182 / 989 / 60 triage split.
#![allow(dead_code)]

use lprisma_core::embed::SimilarityScore;
use lprisma_core::flow::{build_flow, FlowCounts, FlowError, FlowInputs, PrescreenLosses, ScreeningTallies};
use lprisma_core::mixture::{BoundaryRule, Cutoffs, GmmParams};
use lprisma_core::records::{DuplicateReport, QuerySpec};
use lprisma_core::triage::{partition, TriageResult};

pub const IDENTIFIED: [u64; 4] = [24, 48, 362, 869];
pub const DUPLICATES: usize = 72;
pub const TRIAGE: [usize; 3] = [182, 989, 60];

pub fn queries() -> Vec<QuerySpec> {
    let rows = [
        ("ieee-edu", "IEEE", "With Educational Domain Constraint"),
        ("acm-edu", "ACM", "With Educational Domain Constraint"),
        ("ieee-all", "IEEE", "Without Education Domain Constraint"),
        ("acm-all", "ACM", "Without Education Domain Constraint"),
    ];
    rows.iter()
        .zip(IDENTIFIED)
        .map(|((id, db, scope), n)| QuerySpec {
            id: id.to_string(),
            database: db.to_string(),
            query: "(semantic OR similarity) AND (NLP OR GenAI)".into(),
            scope_label: scope.to_string(),
            executed_on: "2025-08-01".into(),
            reported_count: n,
        })
        .collect()
}

pub fn params() -> GmmParams {
    let mut p = GmmParams::new(&[0.8, 0.2], &[0.45, 0.7], &[0.06, 0.05]).unwrap();
    p.loglik = 1500.0;
    p
}

pub fn triage() -> TriageResult {
    let (lower, upper) = (0.35, 0.6);
    let mut values = Vec::new();
    values.extend((0..TRIAGE[0]).map(|i| 0.1 + 0.2 * i as f64 / TRIAGE[0] as f64));
    values.extend((0..TRIAGE[1]).map(|i| lower + (upper - lower) * i as f64 / (TRIAGE[1] - 1) as f64));
    values.extend((0..TRIAGE[2]).map(|i| 0.65 + 0.3 * i as f64 / TRIAGE[2] as f64));
    let scores: Vec<SimilarityScore> = values
        .iter()
        .enumerate()
        .map(|(i, s)| SimilarityScore { record_id: format!("rec{i:04}"), cosine: 2.0 * s - 1.0, s: *s, provider: "fixture".into() })
        .collect();
    let cutoffs = Cutoffs { lower, upper, rule: BoundaryRule::Manual { lower, upper }, params_hash: params().params_hash() };
    partition(&scores, &cutoffs).unwrap()
}

pub fn duplicates() -> DuplicateReport {
    let input: usize = IDENTIFIED.iter().sum::<u64>() as usize;
    DuplicateReport { input_count: input, unique_count: input - DUPLICATES, duplicates_removed: DUPLICATES, merge_log: vec![] }
}

pub fn flow() -> Result<FlowCounts, FlowError> {
    let hash = params().params_hash();
    build_flow(&FlowInputs {
        queries: &queries(),
        duplicates: &duplicates(),
        triage: &triage(),
        tallies: &ScreeningTallies::default(),
        losses: PrescreenLosses::default(),
        expected_params_hash: Some(&hash),
    })
}

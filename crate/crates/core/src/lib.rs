//! Statistical pre-screening for systematic literature reviews.
//!
//! Records from database exports are normalized and deduplicated, scored against
//! a review intent statement, and triaged into excluded / GenAI-review /
//! human-review bins using cutoffs derived from a two-component Gaussian
//! mixture fitted to the score distribution. Flow counts, screening prompts and
//! a hash-verifiable run manifest make every run auditable.

pub mod canon;
pub mod records;
pub mod embed;
pub mod mixture;
pub mod triage;
pub mod flow;
pub mod screenai;
pub mod manifest;
pub mod pipeline;

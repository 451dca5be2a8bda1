//! One-dimensional Gaussian mixtures over relevance scores.
//!
//! The score density is modelled as `p(s) = Σ_k π_k N(s | μ_k, σ_k²)` with the
//! lowest-mean component standing for weakly relevant records and the
//! highest-mean one for highly relevant records. This module fits the mixture
//! by expectation–maximization, evaluates densities and posteriors, and turns a
//! fitted mixture into a pair of decision cutoffs.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canon::{canonical_hash, sha256_hex};

/// Lower bound applied to every component variance in the M-step.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Number of evenly spaced points in an exported density curve.
pub const CURVE_POINTS: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MixtureError {
    #[error("need at least {needed} distinct scores, got {distinct}")]
    TooFewPoints { needed: usize, distinct: usize },
    #[error("all scores are equal; a mixture cannot be fitted")]
    DegenerateData,
    #[error("score {0} is not a finite value in [0, 1]")]
    InvalidScore(f64),
    #[error("invalid fit options: {0}")]
    InvalidOptions(String),
    #[error("density is zero at s = {0}")]
    ZeroDensity(f64),
    #[error("boundary rule `{0}` needs at least two mixture components")]
    RuleRequiresTwoComponents(String),
    #[error("mixture was fitted on different scores (expected hash {expected}, got {actual})")]
    HashMismatch { expected: String, actual: String },
    #[error("invalid boundary rule: {0}")]
    InvalidRule(String),
    #[error("no scores given")]
    EmptyScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    #[serde(rename = "K")]
    pub k: usize,
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stddevs: Vec<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub seed: u64,
    /// Hash of the sorted scores the mixture was fitted on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores_hash: Option<String>,
}

impl GmmParams {
    /// Builds parameters by hand, sorting components by mean. Used for known
    /// mixtures (sampling oracles, tests); fitted models come from [`fit_em`].
    pub fn new(weights: &[f64], means: &[f64], stddevs: &[f64]) -> Result<Self, MixtureError> {
        let k = weights.len();
        if k == 0 || means.len() != k || stddevs.len() != k {
            return Err(MixtureError::InvalidOptions("weights, means and stddevs must have equal non-zero length".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || stddevs.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(MixtureError::InvalidOptions("weights must be >= 0 and stddevs > 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(MixtureError::InvalidOptions("weights sum to zero".into()));
        }
        let mut p = GmmParams {
            k,
            weights: weights.iter().map(|w| w / total).collect(),
            means: means.to_vec(),
            stddevs: stddevs.to_vec(),
            loglik: f64::NAN,
            iterations: 0,
            converged: false,
            seed: 0,
            scores_hash: None,
        };
        p.sort_by_mean();
        Ok(p)
    }

    fn sort_by_mean(&mut self) {
        let mut order: Vec<usize> = (0..self.k).collect();
        order.sort_by(|&a, &b| self.means[a].total_cmp(&self.means[b]).then(self.stddevs[a].total_cmp(&self.stddevs[b])));
        self.weights = order.iter().map(|&i| self.weights[i]).collect();
        self.means = order.iter().map(|&i| self.means[i]).collect();
        self.stddevs = order.iter().map(|&i| self.stddevs[i]).collect();
    }

    /// Index of the low-relevance component.
    pub fn low(&self) -> usize {
        0
    }

    /// Index of the high-relevance component.
    pub fn high(&self) -> usize {
        self.k - 1
    }

    /// Hash of the canonical JSON form; cutoffs carry it to tie them to a model.
    pub fn params_hash(&self) -> String {
        canonical_hash(self).expect("GmmParams serializes")
    }
}

/// Hash of a score multiset (order-insensitive).
pub fn scores_hash(scores: &[f64]) -> String {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let bytes: Vec<u8> = sorted.iter().flat_map(|s| s.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

pub fn normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt())
}

fn normal_ln_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * PI).ln()
}

/// Mixture density at `s`.
pub fn pdf_eval(params: &GmmParams, s: f64) -> f64 {
    (0..params.k).map(|k| params.weights[k] * normal_pdf(s, params.means[k], params.stddevs[k])).sum()
}

/// Posterior component probabilities at `s`, computed in log space.
pub fn responsibilities(params: &GmmParams, s: f64) -> Result<Vec<f64>, MixtureError> {
    let logs: Vec<f64> = (0..params.k)
        .map(|k| params.weights[k].ln() + normal_ln_pdf(s, params.means[k], params.stddevs[k]))
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(MixtureError::ZeroDensity(s));
    }
    let mut r: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = r.iter().sum();
    r.iter_mut().for_each(|x| *x /= total);
    Ok(r)
}

/// Neumaier-compensated sum.
#[derive(Default, Clone, Copy)]
struct Sum {
    sum: f64,
    comp: f64,
}

impl Sum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.comp
    }
}

// Fitting

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub k: usize,
    /// Relative log-likelihood change below which EM stops.
    pub tol: f64,
    pub max_iter: usize,
    /// Restart 0 is the deterministic quantile start; the rest are seeded perturbations of it.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions { k: 2, tol: 1e-8, max_iter: 500, restarts: 1, seed: 0 }
    }
}

impl EmOptions {
    pub fn validate(&self) -> Result<(), MixtureError> {
        if self.k == 0 {
            return Err(MixtureError::InvalidOptions("K must be at least 1".into()));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(MixtureError::InvalidOptions("tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(MixtureError::InvalidOptions("max_iter must be at least 1".into()));
        }
        if self.restarts == 0 {
            return Err(MixtureError::InvalidOptions("restarts must be at least 1".into()));
        }
        Ok(())
    }
}

/// A fit together with the per-iteration log-likelihood of every restart.
#[derive(Debug, Clone)]
pub struct FitTrace {
    pub params: GmmParams,
    pub restart_logliks: Vec<Vec<f64>>,
    pub best_restart: usize,
}

pub fn fit_em(scores: &[f64], opts: &EmOptions) -> Result<GmmParams, MixtureError> {
    fit_em_traced(scores, opts).map(|t| t.params)
}

pub fn fit_em_traced(scores: &[f64], opts: &EmOptions) -> Result<FitTrace, MixtureError> {
    opts.validate()?;
    if let Some(&bad) = scores.iter().find(|s| !(s.is_finite() && (0.0..=1.0).contains(*s))) {
        return Err(MixtureError::InvalidScore(bad));
    }
    let mut data = scores.to_vec();
    data.sort_by(f64::total_cmp);
    let distinct = 1 + data.windows(2).filter(|w| w[0] != w[1]).count();
    if data.is_empty() {
        return Err(MixtureError::TooFewPoints { needed: 2 * opts.k, distinct: 0 });
    }
    if distinct == 1 {
        return Err(MixtureError::DegenerateData);
    }
    if distinct < 2 * opts.k {
        return Err(MixtureError::TooFewPoints { needed: 2 * opts.k, distinct });
    }

    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let pooled_sd = (data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt().max(VARIANCE_FLOOR.sqrt());
    let base_means: Vec<f64> = (0..opts.k).map(|i| quantile_sorted(&data, (i as f64 + 0.5) / opts.k as f64)).collect();
    let (lo, hi) = (data[0], data[data.len() - 1]);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(Run, usize)> = None;
    let mut traces = Vec::with_capacity(opts.restarts);
    for restart in 0..opts.restarts {
        let (means, sds) = if restart == 0 {
            (base_means.clone(), vec![pooled_sd; opts.k])
        } else {
            let means = base_means
                .iter()
                .map(|m| (m + pooled_sd * (rng.random::<f64>() - 0.5)).clamp(lo, hi))
                .collect();
            let sds = (0..opts.k).map(|_| pooled_sd * (0.5 + rng.random::<f64>())).collect();
            (means, sds)
        };
        let run = run_em(&data, vec![1.0 / opts.k as f64; opts.k], means, sds, opts);
        traces.push(run.trace.clone());
        // Ties keep the earlier restart.
        if best.as_ref().is_none_or(|(b, _)| run.loglik > b.loglik) {
            best = Some((run, restart));
        }
    }
    let (run, best_restart) = best.expect("at least one restart");
    let mut params = GmmParams {
        k: opts.k,
        weights: run.weights,
        means: run.means,
        stddevs: run.sds,
        loglik: run.loglik,
        iterations: run.iterations,
        converged: run.converged,
        seed: opts.seed,
        scores_hash: Some(scores_hash(&data)),
    };
    params.sort_by_mean();
    Ok(FitTrace { params, restart_logliks: traces, best_restart })
}

struct Run {
    weights: Vec<f64>,
    means: Vec<f64>,
    sds: Vec<f64>,
    loglik: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

/// Fills `resp` (row-major n×k) with posteriors and returns the log-likelihood.
fn e_step(data: &[f64], weights: &[f64], means: &[f64], sds: &[f64], resp: &mut [f64]) -> f64 {
    let k = weights.len();
    let log_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let mut ll = Sum::default();
    let mut logs = vec![0.0; k];
    for (i, &x) in data.iter().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for j in 0..k {
            logs[j] = log_w[j] + normal_ln_pdf(x, means[j], sds[j]);
            max = max.max(logs[j]);
        }
        let row = &mut resp[i * k..(i + 1) * k];
        let mut total = 0.0;
        for j in 0..k {
            row[j] = (logs[j] - max).exp();
            total += row[j];
        }
        for r in row.iter_mut() {
            *r /= total;
        }
        ll.add(max + total.ln());
    }
    ll.value()
}

fn run_em(data: &[f64], mut weights: Vec<f64>, mut means: Vec<f64>, mut sds: Vec<f64>, opts: &EmOptions) -> Run {
    let k = weights.len();
    let n = data.len();
    let mut resp = vec![0.0; n * k];
    let mut ll = e_step(data, &weights, &means, &sds, &mut resp);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        for j in 0..k {
            let mut nk = Sum::default();
            let mut sx = Sum::default();
            for i in 0..n {
                nk.add(resp[i * k + j]);
                sx.add(resp[i * k + j] * data[i]);
            }
            let nk = nk.value();
            weights[j] = nk / n as f64;
            if nk > 0.0 {
                let mu = sx.value() / nk;
                let mut sv = Sum::default();
                for i in 0..n {
                    sv.add(resp[i * k + j] * (data[i] - mu).powi(2));
                }
                means[j] = mu;
                sds[j] = (sv.value() / nk).max(VARIANCE_FLOOR).sqrt();
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);

        let next = e_step(data, &weights, &means, &sds, &mut resp);
        debug_assert!(next >= ll - 1e-9 * ll.abs().max(1.0), "EM log-likelihood decreased: {ll} -> {next}");
        trace.push(next);
        let delta = (next - ll).abs();
        ll = next;
        if delta <= opts.tol * ll.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    Run { weights, means, sds, loglik: ll, iterations, converged, trace }
}

/// Linear-interpolation quantile of sorted data (type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

// Decision boundaries

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BoundaryRule {
    TwoSigmaOverlap,
    Quantile { q_low: f64, q_high: f64 },
    Manual { lower: f64, upper: f64 },
    PosteriorOdds { tau: f64 },
}

impl BoundaryRule {
    pub fn validate(&self) -> Result<(), MixtureError> {
        let ok = match *self {
            BoundaryRule::TwoSigmaOverlap => true,
            BoundaryRule::Quantile { q_low, q_high } => 0.0 < q_low && q_low < q_high && q_high < 1.0,
            BoundaryRule::Manual { lower, upper } => 0.0 <= lower && lower <= upper && upper <= 1.0,
            BoundaryRule::PosteriorOdds { tau } => tau.is_finite() && tau >= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(MixtureError::InvalidRule(self.to_string()))
        }
    }
}

impl fmt::Display for BoundaryRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoundaryRule::TwoSigmaOverlap => write!(f, "two-sigma"),
            BoundaryRule::Quantile { q_low, q_high } => write!(f, "quantile:{q_low}:{q_high}"),
            BoundaryRule::Manual { lower, upper } => write!(f, "manual:{lower}:{upper}"),
            BoundaryRule::PosteriorOdds { tau } => write!(f, "posterior:{tau}"),
        }
    }
}

impl FromStr for BoundaryRule {
    type Err = MixtureError;

    /// Parses `two-sigma`, `quantile:QL:QH`, `manual:LO:HI` or `posterior:TAU`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || MixtureError::InvalidRule(s.to_string());
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| parts.get(i).and_then(|p| p.parse::<f64>().ok()).ok_or_else(bad);
        let rule = match (parts[0], parts.len()) {
            ("two-sigma", 1) => BoundaryRule::TwoSigmaOverlap,
            ("quantile", 3) => BoundaryRule::Quantile { q_low: num(1)?, q_high: num(2)? },
            ("manual", 3) => BoundaryRule::Manual { lower: num(1)?, upper: num(2)? },
            ("posterior", 2) => BoundaryRule::PosteriorOdds { tau: num(1)? },
            _ => return Err(bad()),
        };
        rule.validate()?;
        Ok(rule)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cutoffs {
    pub lower: f64,
    pub upper: f64,
    pub rule: BoundaryRule,
    pub params_hash: String,
}

pub fn derive_cutoffs(params: &GmmParams, scores: &[f64], rule: BoundaryRule) -> Result<Cutoffs, MixtureError> {
    rule.validate()?;
    if let Some(expected) = &params.scores_hash {
        let actual = scores_hash(scores);
        if *expected != actual {
            return Err(MixtureError::HashMismatch { expected: expected.clone(), actual });
        }
    }
    let (lower, upper) = match rule {
        BoundaryRule::Manual { lower, upper } => (lower, upper),
        BoundaryRule::Quantile { q_low, q_high } => {
            if scores.is_empty() {
                return Err(MixtureError::EmptyScores);
            }
            let mut sorted = scores.to_vec();
            sorted.sort_by(f64::total_cmp);
            (quantile_sorted(&sorted, q_low), quantile_sorted(&sorted, q_high))
        }
        BoundaryRule::TwoSigmaOverlap => {
            require_two(params, rule)?;
            let (l, h) = (params.low(), params.high());
            let lower = (params.means[h] - 2.0 * params.stddevs[h]).clamp(0.0, 1.0);
            let upper = (params.means[l] + 2.0 * params.stddevs[l]).clamp(0.0, 1.0);
            if lower > upper {
                let p = equal_posterior_point(params).clamp(0.0, 1.0);
                (p, p)
            } else {
                (lower, upper)
            }
        }
        BoundaryRule::PosteriorOdds { tau } => {
            require_two(params, rule)?;
            let lower = odds_threshold(params, (1.0 / tau).ln()).clamp(0.0, 1.0);
            let upper = odds_threshold(params, tau.ln()).clamp(0.0, 1.0);
            (lower, upper.max(lower))
        }
    };
    Ok(Cutoffs { lower, upper, rule, params_hash: params.params_hash() })
}

fn require_two(params: &GmmParams, rule: BoundaryRule) -> Result<(), MixtureError> {
    if params.k < 2 {
        return Err(MixtureError::RuleRequiresTwoComponents(rule.to_string()));
    }
    Ok(())
}

/// `ln(π_H N_H(s) / (π_L N_L(s)))`; nondecreasing on `[μ_L, μ_H]`.
pub fn log_odds_high_low(params: &GmmParams, s: f64) -> f64 {
    let (l, h) = (params.low(), params.high());
    (params.weights[h].ln() + normal_ln_pdf(s, params.means[h], params.stddevs[h]))
        - (params.weights[l].ln() + normal_ln_pdf(s, params.means[l], params.stddevs[l]))
}

/// Point in `[μ_L, μ_H]` where the low and high components have equal posterior,
/// from the closed-form roots of the quadratic log-odds. Falls back to the
/// nearer interval end when one component dominates the whole interval.
pub fn equal_posterior_point(params: &GmmParams) -> f64 {
    let (l, h) = (params.low(), params.high());
    let (ml, mh) = (params.means[l], params.means[h]);
    if mh <= ml {
        return ml;
    }
    if log_odds_high_low(params, ml) >= 0.0 {
        return ml;
    }
    if log_odds_high_low(params, mh) <= 0.0 {
        return mh;
    }
    let (vl, vh) = (params.stddevs[l].powi(2), params.stddevs[h].powi(2));
    let a = 0.5 / vl - 0.5 / vh;
    let b = mh / vh - ml / vl;
    let c = ml * ml / (2.0 * vl) - mh * mh / (2.0 * vh)
        + (params.weights[h] * params.stddevs[l] / (params.weights[l] * params.stddevs[h])).ln();
    let root = if a.abs() < 1e-12 * b.abs().max(1.0) {
        -c / b
    } else {
        let disc = (b * b - 4.0 * a * c).max(0.0).sqrt();
        // Numerically stable pair of roots.
        let q = -0.5 * (b + b.signum() * disc);
        let r1 = q / a;
        let r2 = if q != 0.0 { c / q } else { r1 };
        let mid = 0.5 * (ml + mh);
        if (r1 - mid).abs() <= (r2 - mid).abs() {
            r1
        } else {
            r2
        }
    };
    root.clamp(ml, mh)
}

/// Smallest `s` in `[μ_L, μ_H]` with log-odds ≥ `target`, by bisection.
fn odds_threshold(params: &GmmParams, target: f64) -> f64 {
    let (mut lo, mut hi) = (params.means[params.low()], params.means[params.high()]);
    if log_odds_high_low(params, lo) >= target {
        return lo;
    }
    if log_odds_high_low(params, hi) < target {
        return hi;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if log_odds_high_low(params, mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

// Sampling and reporting

/// Seeded draws from the mixture, clamped to `[0, 1]`.
pub fn sample(params: &GmmParams, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut comp = params.k - 1;
            for (j, w) in params.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    comp = j;
                    break;
                }
            }
            let z: f64 = rng.sample(StandardNormal);
            (params.means[comp] + params.stddevs[comp] * z).clamp(0.0, 1.0)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges from 0 to 1.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn bin_width(&self) -> f64 {
        1.0 / self.counts.len() as f64
    }

    /// Count density per bin (integrates to 1 when there is at least one score).
    pub fn densities(&self) -> Vec<f64> {
        let total: usize = self.counts.iter().sum();
        if total == 0 {
            return vec![0.0; self.counts.len()];
        }
        let w = self.bin_width();
        self.counts.iter().map(|&c| c as f64 / (total as f64 * w)).collect()
    }
}

/// Equal-width bins over `[0, 1]`, half-open except the last, which includes 1.
pub fn histogram(scores: &[f64], bins: usize) -> Result<Histogram, MixtureError> {
    if bins == 0 {
        return Err(MixtureError::InvalidOptions("bins must be at least 1".into()));
    }
    let mut counts = vec![0usize; bins];
    for &s in scores {
        let idx = (s.clamp(0.0, 1.0) * bins as f64).floor() as usize;
        counts[idx.min(bins - 1)] += 1;
    }
    let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    Ok(Histogram { edges, counts })
}

/// `(s, p(s))` at `points` evenly spaced positions covering `[0, 1]`.
pub fn pdf_curve(params: &GmmParams, points: usize) -> Vec<(f64, f64)> {
    match points {
        0 => Vec::new(),
        1 => vec![(0.0, pdf_eval(params, 0.0))],
        _ => (0..points)
            .map(|i| {
                let s = i as f64 / (points - 1) as f64;
                (s, pdf_eval(params, s))
            })
            .collect(),
    }
}

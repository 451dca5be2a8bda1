//! End-to-end acceptance checks. Runs without the libtest harness and prints
//! one PASS/FAIL line per criterion; exits non-zero if any criterion fails.

#[path = "../../core/tests/common/reference.rs"]
mod reference;
#[path = "../../core/tests/common/stub.rs"]
mod stub;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use lprisma_core::embed::{map_score, read_scores_csv, ScoreMapping, SimilarityScore};
use lprisma_core::flow::{reconcile, render_flow, RenderFormat};
use lprisma_core::manifest::{verify_manifest, EntryStatus, RunManifest, MANIFEST_FILE};
use lprisma_core::mixture::{
    derive_cutoffs, fit_em, fit_em_traced, pdf_eval, sample, BoundaryRule, Cutoffs, EmOptions, GmmParams,
};
use lprisma_core::records::{dedupe, normalize, RawRecord, Record};
use lprisma_core::screenai::{
    bundles_for_bin, covers_genai_bin, render_prompt, Decision, EligibilityCriteria, LlmConfig, Moderation, ScreenClient,
    ScreeningVerdict,
};
use lprisma_core::triage::{partition, Bin};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("GMM recovery", gmm_recovery),
        ("EM monotonicity", em_monotonicity),
        ("mixture weights sum to one", weight_constraint),
        ("triage conservation and boundaries", triage_conservation),
        ("reference flow reconciliation", reference_flow),
        ("determinism of full runs", determinism),
        ("dedupe oracle equivalence", dedupe_oracle),
        ("score range and mapping", score_mapping),
        ("pdf normalization", pdf_normalization),
        ("cutoff validity", cutoff_validity),
        ("offline GenAI path", offline_genai),
        ("manifest integrity", manifest_integrity),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name:<36} PASS  ({detail}; {secs:.2}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {name:<36} FAIL  ({detail}; {secs:.2}s)", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// Helpers

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn mixture_moments(p: &GmmParams) -> (f64, f64) {
    let mean: f64 = (0..p.k).map(|j| p.weights[j] * p.means[j]).sum();
    let second: f64 = (0..p.k).map(|j| p.weights[j] * (p.stddevs[j].powi(2) + p.means[j].powi(2))).sum();
    (mean, second - mean * mean)
}

/// A random mixture with all mass well inside `[0, 1]`.
fn random_mixture(rng: &mut ChaCha8Rng, k: usize) -> GmmParams {
    let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
    let means: Vec<f64> = (0..k).map(|_| rng.random_range(0.15..0.85)).collect();
    let stddevs: Vec<f64> = (0..k).map(|_| rng.random_range(0.02..0.12)).collect();
    GmmParams::new(&weights, &means, &stddevs).unwrap()
}

fn lprisma(dir: &Path, args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_lprisma"))
        .arg("--run-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("run lprisma");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn demo_run(dir: &Path) -> Result<(), String> {
    for args in [&["demo"][..], &["all"][..]] {
        let (code, _, err) = lprisma(dir, args);
        ensure!(code == 0, "`lprisma {}` exited {code}: {err}", args.join(" "));
    }
    Ok(())
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

// Criteria

fn gmm_recovery() -> Outcome {
    let truth = GmmParams::new(&[0.85, 0.15], &[0.25, 0.70], &[0.07, 0.06]).unwrap();
    let (mu, var) = mixture_moments(&truth);

    // Sampler first: a large draw must match the analytic mixture moments.
    let big = sample(&truth, 400_000, 1);
    let (m, v) = moments(&big);
    let se_mean = (var / big.len() as f64).sqrt();
    ensure!((m - mu).abs() < 4.0 * se_mean, "sampler mean {m} vs {mu}");
    ensure!((v - var).abs() < 0.01 * var, "sampler variance {v} vs {var}");
    let high = big.iter().filter(|&&s| s > 0.5).count() as f64 / big.len() as f64;
    ensure!((high - 0.15).abs() < 0.005, "sampler upper mass {high}");
    let again = sample(&truth, 1000, 1);
    ensure!(again[..] == big[..1000], "sampler is not reproducible");

    let scores = sample(&truth, 5000, 7);
    let (m, _) = moments(&scores);
    ensure!((m - mu).abs() < 4.0 * (var / 5000.0).sqrt(), "seed-7 sample mean {m} vs {mu}");

    let start = Instant::now();
    let fit = fit_em(&scores, &EmOptions { k: 2, ..Default::default() }).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    for j in 0..2 {
        ensure!((fit.means[j] - truth.means[j]).abs() <= 0.01, "mean {j}: {} vs {}", fit.means[j], truth.means[j]);
        ensure!((fit.stddevs[j] - truth.stddevs[j]).abs() <= 0.01, "sd {j}: {} vs {}", fit.stddevs[j], truth.stddevs[j]);
        ensure!((fit.weights[j] - truth.weights[j]).abs() <= 0.02, "weight {j}: {} vs {}", fit.weights[j], truth.weights[j]);
    }
    ensure!(elapsed < Duration::from_secs(2), "fit took {elapsed:?}");
    Ok(format!(
        "pi=({:.4},{:.4}) mu=({:.4},{:.4}) sd=({:.4},{:.4}) fit {:.1} ms",
        fit.weights[0],
        fit.weights[1],
        fit.means[0],
        fit.means[1],
        fit.stddevs[0],
        fit.stddevs[1],
        elapsed.as_secs_f64() * 1e3
    ))
}

fn em_monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut iterations = 0usize;
    for case in 0..200 {
        let k = rng.random_range(1..=3);
        let truth = random_mixture(&mut rng, k);
        let n = rng.random_range(100..=5000);
        let scores = sample(&truth, n, rng.random());
        let opts = EmOptions { k: rng.random_range(1..=3), restarts: 2, seed: rng.random(), ..Default::default() };
        let trace = fit_em_traced(&scores, &opts).map_err(|e| format!("case {case}: {e}"))?;
        for lls in &trace.restart_logliks {
            iterations += lls.len();
            for w in lls.windows(2) {
                let drop = w[0] - w[1];
                worst = worst.max(drop);
                ensure!(drop <= 1e-9, "case {case} (n={n}): loglik fell by {drop:e}");
            }
        }
    }
    Ok(format!("200 datasets, {iterations} iterations, largest decrease {worst:e}"))
}

fn weight_constraint() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut fits = 0;
    for case in 0..300 {
        let k = rng.random_range(1..=4);
        let truth = random_mixture(&mut rng, k);
        let scores = sample(&truth, rng.random_range(50..=3000), rng.random());
        let k = rng.random_range(1..=4);
        let opts = EmOptions { k, restarts: rng.random_range(1..=3), seed: rng.random(), ..Default::default() };
        let fit = fit_em(&scores, &opts).map_err(|e| format!("case {case}: {e}"))?;
        let dev = (fit.weights.iter().sum::<f64>() - 1.0).abs();
        worst = worst.max(dev);
        ensure!(dev <= 1e-12, "case {case} K={k}: weights sum off by {dev:e}");
        ensure!(fit.weights.iter().all(|w| *w >= 0.0), "case {case}: negative weight");
        fits += 1;
    }
    Ok(format!("{fits} fits, largest deviation {worst:e}"))
}

fn oracle_bin(s: f64, lower: f64, upper: f64) -> Bin {
    if lower <= s && s <= upper {
        Bin::GenAiReview
    } else if s < lower {
        Bin::Excluded
    } else {
        Bin::HumanReview
    }
}

fn triage_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut boundary_hits = 0;
    let mut total = 0;
    for case in 0..1000 {
        let a: f64 = rng.random();
        let b: f64 = if rng.random_bool(0.1) { a } else { rng.random() };
        let (lower, upper) = (a.min(b), a.max(b));
        let n = rng.random_range(1..=400);
        let values: Vec<f64> = (0..n)
            .map(|_| match rng.random_range(0..10) {
                0 => lower,
                1 => upper,
                2 => [0.0, 1.0][rng.random_range(0..2)],
                _ => rng.random(),
            })
            .collect();
        let scores: Vec<SimilarityScore> = values
            .iter()
            .enumerate()
            .map(|(i, s)| SimilarityScore { record_id: format!("r{i:04}"), cosine: 2.0 * s - 1.0, s: *s, provider: "fuzz".into() })
            .collect();
        let cutoffs = Cutoffs { lower, upper, rule: BoundaryRule::Manual { lower, upper }, params_hash: String::new() };
        let result = partition(&scores, &cutoffs).map_err(|e| format!("case {case}: {e}"))?;
        ensure!(result.counts.total() == n, "case {case}: counts sum {} != {n}", result.counts.total());
        let mut expected = [0usize; 3];
        for sc in &scores {
            let want = oracle_bin(sc.s, lower, upper);
            expected[want as usize] += 1;
            let got = result.assignments.get(&sc.record_id).copied();
            ensure!(got == Some(want), "case {case}: {} (s={}) got {got:?}, want {want:?}", sc.record_id, sc.s);
            if sc.s == lower || sc.s == upper {
                boundary_hits += 1;
                ensure!(got == Some(Bin::GenAiReview), "case {case}: boundary score {} not in GenAIReview", sc.s);
            }
        }
        let got = [result.counts.excluded, result.counts.genai, result.counts.human];
        ensure!(got == expected, "case {case}: counts {got:?} vs oracle {expected:?}");
        total += n;
    }
    Ok(format!("1000 pairs, {total} records, {boundary_hits} on a boundary"))
}

fn reference_flow() -> Outcome {
    let counts = reference::flow().map_err(|e| e.to_string())?;
    reconcile(&counts).map_err(|e| e.to_string())?;
    let id = &counts.identification;
    let ident: Vec<u64> = id.sources.iter().map(|s| s.count).collect();
    ensure!(ident == reference::IDENTIFIED, "identification {ident:?}");
    ensure!(id.duplicates_removed == reference::DUPLICATES as u64, "duplicates {}", id.duplicates_removed);
    let pre = &counts.prescreening;
    ensure!(
        [pre.excluded, pre.genai, pre.human] == reference::TRIAGE.map(|c| c as u64),
        "triage ({}, {}, {})",
        pre.excluded,
        pre.genai,
        pre.human
    );
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden/reference_flow.mmd");
    let expected = fs::read_to_string(&golden).map_err(|e| format!("{}: {e}", golden.display()))?;
    let rendered = render_flow(&counts, RenderFormat::Mermaid).map_err(|e| e.to_string())?;
    ensure!(rendered == expected, "mermaid render differs from golden file");
    Ok(format!("{} identified, {} scored, golden mermaid matched ({} bytes)", id.total(), pre.scored, rendered.len()))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    demo_run(&a)?;
    demo_run(&b)?;
    let named = [
        "scores.csv",
        "gmm.json",
        "pdf_curve.csv",
        "cutoffs.json",
        "triage.json",
        "flow.json",
        "flow.mmd",
        "flow.dot",
        "flow.txt",
        "histogram.csv",
        MANIFEST_FILE,
    ];
    for name in named {
        let x = fs::read(a.join(name)).map_err(|e| format!("{name}: {e}"))?;
        let y = fs::read(b.join(name)).map_err(|e| format!("{name}: {e}"))?;
        ensure!(x == y, "{name} differs between runs");
    }
    let (fa, fb) = (files_under(&a), files_under(&b));
    ensure!(fa.keys().eq(fb.keys()), "runs produced different file sets");
    let differing: Vec<_> = fa.iter().filter(|(k, v)| fb[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    ensure!(differing.is_empty(), "differing files: {differing:?}");
    Ok(format!("{} files byte-identical across two runs", fa.len()))
}

const WORDS: [&str; 24] = [
    "semantic", "similarity", "grading", "student", "answers", "embedding", "feedback", "transformer", "rubric",
    "assessment", "automatic", "scoring", "language", "models", "essay", "short", "reference", "evaluation",
    "learning", "neural", "retrieval", "matching", "classroom", "analysis",
];

fn dedupe_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut raws: Vec<RawRecord> = Vec::new();
    for i in 0..350 {
        let len = rng.random_range(4..9);
        let mut title: Vec<&str> = (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
        title[0] = ["Towards", "On", "Revisiting", "Measuring", "Exploring"][i % 5];
        let title = format!("{} {i}", title.join(" "));
        let doi = rng.random_bool(0.7).then(|| format!("10.{}/art.{i}", 1000 + i % 7));
        raws.push(RawRecord {
            source_db: ["IEEE", "ACM", "Scopus"][i % 3].into(),
            query_id: format!("q{}", i % 4),
            title,
            doi,
            year: Some(2015 + (i % 10) as i32),
            ..Default::default()
        });
    }
    let mut planted = 0;
    while raws.len() < 500 {
        let base = raws[rng.random_range(0..350)].clone();
        let mut dup = base.clone();
        dup.source_db = "Dup".into();
        match (rng.random_range(0..4), &base.doi) {
            (0, Some(doi)) => {
                dup.doi = Some(format!("https://doi.org/{}", doi.to_uppercase()));
                dup.title = format!("{} revisited differently", base.title);
            }
            (1, Some(doi)) => dup.doi = Some(format!("doi:{doi}")),
            (2, _) => {
                dup.doi = None;
                dup.title = format!("  {}.  ", base.title.to_uppercase().replace(' ', "  "));
            }
            _ => {
                dup.doi = None;
                dup.title = base.title.replace(' ', " - ");
            }
        }
        raws.push(dup);
        planted += 1;
    }
    raws.shuffle(&mut rng);
    let records: Vec<Record> = raws.iter().map(normalize).collect();

    let mut keeper = Vec::with_capacity(records.len());
    for i in 0..records.len() {
        let r = &records[i];
        let doi_hit = r.doi_norm.as_ref().and_then(|d| (0..i).find(|&j| records[j].doi_norm.as_ref() == Some(d)));
        let hit = doi_hit.or_else(|| (0..i).find(|&j| records[j].title_norm == r.title_norm));
        keeper.push(hit.map_or(i, |j| keeper[j]));
    }
    let expected: Vec<&str> = (0..records.len()).filter(|&i| keeper[i] == i).map(|i| records[i].id.as_str()).collect();

    let (unique, report) = dedupe(records.clone());
    let got: Vec<&str> = unique.iter().map(|r| r.id.as_str()).collect();
    ensure!(got == expected, "unique set differs from oracle ({} vs {})", got.len(), expected.len());
    ensure!(report.input_count == 500, "input_count {}", report.input_count);
    ensure!(report.input_count - report.duplicates_removed == report.unique_count, "arithmetic fails");
    ensure!(report.unique_count == unique.len(), "unique_count {} vs {}", report.unique_count, unique.len());
    ensure!(report.merge_log.len() == report.duplicates_removed, "merge log length");
    ensure!(
        report.duplicates_removed == records.len() - expected.len(),
        "removed {} but oracle removes {}",
        report.duplicates_removed,
        records.len() - expected.len()
    );
    ensure!(report.duplicates_removed <= planted, "removed {} with only {planted} planted", report.duplicates_removed);
    Ok(format!("500 records, {planted} planted, {} removed, {} unique", report.duplicates_removed, unique.len()))
}

fn score_mapping() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut cosines: Vec<f64> = (0..100_000 - 5).map(|_| rng.random_range(-1.0..=1.0)).collect();
    cosines.extend([-1.0, 1.0, 0.0, -0.0, f64::EPSILON]);
    for mapping in [ScoreMapping::Affine, ScoreMapping::Clamp] {
        for &c in &cosines {
            let s = map_score(c, mapping).map_err(|e| format!("{c}: {e}"))?;
            ensure!((0.0..=1.0).contains(&s), "{mapping:?} maps {c} to {s}");
        }
    }
    ensure!(map_score(-1.0, ScoreMapping::Affine) == Ok(0.0), "affine(-1) != 0");
    ensure!(map_score(1.0, ScoreMapping::Affine) == Ok(1.0), "affine(1) != 1");
    Ok(format!("{} cosines under both mappings", cosines.len()))
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let h = (b - a) / n as f64;
    let mut sum = f(a) + f(b);
    for i in 1..n {
        sum += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    sum * h / 3.0
}

fn pdf_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    let mut worst_curve = 0.0f64;
    for case in 0..50 {
        let k = rng.random_range(1..=4);
        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let means: Vec<f64> = (0..k).map(|_| rng.random_range(-0.5..1.5)).collect();
        let stddevs: Vec<f64> = (0..k).map(|_| rng.random_range(0.005..0.5)).collect();
        let p = GmmParams::new(&weights, &means, &stddevs).unwrap();
        let min_sd = stddevs.iter().cloned().fold(f64::INFINITY, f64::min);
        let intervals = ((20.0 / (min_sd / 25.0)).ceil() as usize).max(2000);
        let area = simpson(|s| pdf_eval(&p, s), -10.0, 10.0, intervals);
        worst = worst.max((area - 1.0).abs());
        ensure!((area - 1.0).abs() <= 1e-6, "case {case}: integral {area}");

        let curve = lprisma_core::flow::export_pdf_curve(&p, 512);
        let mut rows = 0;
        for line in curve.lines().skip(1) {
            let (s, d) = line.split_once(',').ok_or("malformed curve row")?;
            let (s, d): (f64, f64) = (s.parse().map_err(|_| "bad s")?, d.parse().map_err(|_| "bad p(s)")?);
            let diff = (d - pdf_eval(&p, s)).abs();
            worst_curve = worst_curve.max(diff);
            ensure!(diff <= 1e-12, "case {case}: curve at {s} off by {diff:e}");
            rows += 1;
        }
        ensure!(rows == 512, "case {case}: {rows} curve rows");
    }
    Ok(format!("max |integral-1| {worst:e}, max curve deviation {worst_curve:e}"))
}

fn cutoff_validity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut collapses = 0;
    for case in 0..500 {
        let weights = [rng.random_range(0.2..1.0), rng.random_range(0.1..1.0)];
        let lo: f64 = rng.random_range(0.05..0.55);
        let gap = if case % 2 == 0 { rng.random_range(0.3..0.6) } else { rng.random_range(0.02..0.3) };
        let means = [lo, (lo + gap).min(0.97)];
        let stddevs = [rng.random_range(0.01..0.12), rng.random_range(0.01..0.12)];
        let truth = GmmParams::new(&weights, &means, &stddevs).unwrap();
        let scores = sample(&truth, rng.random_range(200..=1500), rng.random());
        let fit = fit_em(&scores, &EmOptions { k: 2, seed: rng.random(), ..Default::default() })
            .map_err(|e| format!("case {case}: {e}"))?;
        let rules = [
            BoundaryRule::TwoSigmaOverlap,
            BoundaryRule::Quantile { q_low: rng.random_range(0.01..0.5), q_high: rng.random_range(0.5..0.99) },
            {
                let (a, b): (f64, f64) = (rng.random(), rng.random());
                BoundaryRule::Manual { lower: a.min(b), upper: a.max(b) }
            },
            BoundaryRule::PosteriorOdds { tau: rng.random_range(1.0..50.0) },
        ];
        for rule in rules {
            let c = derive_cutoffs(&fit, &scores, rule).map_err(|e| format!("case {case} {rule}: {e}"))?;
            ensure!(
                0.0 <= c.lower && c.lower <= c.upper && c.upper <= 1.0,
                "case {case} {rule}: lower {} upper {}",
                c.lower,
                c.upper
            );
        }
        let (l, h) = (fit.low(), fit.high());
        if fit.means[h] - 2.0 * fit.stddevs[h] > fit.means[l] + 2.0 * fit.stddevs[l] {
            let c = derive_cutoffs(&fit, &scores, BoundaryRule::TwoSigmaOverlap).unwrap();
            ensure!(c.lower == c.upper, "case {case}: crossed bounds did not collapse");
            ensure!(
                fit.means[l] <= c.lower && c.lower <= fit.means[h],
                "case {case}: collapse point {} outside the means",
                c.lower
            );
            collapses += 1;
        }
    }
    ensure!(collapses > 0, "no fuzzed model exercised the collapse path");
    Ok(format!("500 models x 4 rules, {collapses} collapse cases"))
}

fn criteria() -> EligibilityCriteria {
    EligibilityCriteria {
        inclusion: vec!["Measures similarity between student and reference answers".into()],
        exclusion: vec!["No educational setting".into()],
        notes: None,
    }
}

fn offline_genai() -> Outcome {
    let records: Vec<Record> = (0..80)
        .map(|i| {
            normalize(&RawRecord {
                source_db: "ACM".into(),
                query_id: "q".into(),
                title: format!("Record number {i} on answer similarity"),
                abstract_text: (i % 7 != 0).then(|| format!("Abstract {i}.")),
                ..Default::default()
            })
        })
        .collect();
    let scores: Vec<SimilarityScore> = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let s = match i {
                0..15 => 0.1,
                15..65 => 0.5,
                _ => 0.9,
            };
            SimilarityScore { record_id: r.id.clone(), cosine: 2.0 * s - 1.0, s, provider: "fixture".into() }
        })
        .collect();
    let cutoffs = Cutoffs { lower: 0.3, upper: 0.7, rule: BoundaryRule::Manual { lower: 0.3, upper: 0.7 }, params_hash: String::new() };
    let triage = partition(&scores, &cutoffs).map_err(|e| e.to_string())?;
    ensure!(triage.counts.genai == 50, "GenAI bin has {}", triage.counts.genai);

    let server = stub::StubServer::start(|_, body| {
        let req: serde_json::Value = serde_json::from_str(body).unwrap_or_default();
        let prompt = req["messages"][0]["content"].as_str().unwrap_or_default().to_string();
        let content = if prompt.contains("Alpha") {
            r#"Sure: {"decision":"include","rationale":"on topic","summary":"s"}"#
        } else if prompt.contains("Beta") {
            r#"{"decision":"exclude","rationale":"off topic"}"#
        } else {
            "not json"
        };
        (200, stub::chat_reply(content))
    });

    let bundles = bundles_for_bin(&triage, &records, &criteria(), "screen-v1", "one short paragraph").map_err(|e| e.to_string())?;
    ensure!(bundles.len() == 50, "{} bundles", bundles.len());
    let client = ScreenClient::dry_run();
    let verdicts: Vec<ScreeningVerdict> =
        client.screen_batch(&bundles, 4).into_iter().map(|(_, v)| v).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    ensure!(verdicts.len() == 50, "{} verdicts", verdicts.len());
    ensure!(verdicts.iter().all(|v| v.moderation == Moderation::Pending), "verdict not pending");
    ensure!(covers_genai_bin(&triage, &verdicts), "verdicts do not cover the bin");
    ensure!(client.request_count() == 0, "dry run sent {} requests", client.request_count());

    // Pipeline level: an endpoint is configured but --dry-run must keep it idle.
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path().join("run");
    demo_run(&dir)?;
    let scores = read_scores_csv(&fs::read(dir.join("scores.csv")).map_err(|e| e.to_string())?)?;
    let mut sorted: Vec<f64> = scores.iter().map(|s| s.s).collect();
    sorted.sort_by(f64::total_cmp);
    let start = (0..sorted.len() - 51).find(|&i| sorted[i] < sorted[i + 1] && sorted[i + 50] < sorted[i + 51]).ok_or("no gap")?;
    let lower = (sorted[start] + sorted[start + 1]) / 2.0;
    let upper = (sorted[start + 50] + sorted[start + 51]) / 2.0;
    let rule = format!("manual:{lower}:{upper}");
    let endpoint = server.url("/v1/chat/completions");
    let flags = ["--rule", &rule, "--llm-endpoint", &endpoint, "--llm-model", "stub-chat", "--dry-run"];
    for stage in ["cutoffs", "partition", "screen"] {
        let mut args = flags.to_vec();
        args.push(stage);
        let (code, _, err) = lprisma(&dir, &args);
        ensure!(code == 0, "`{stage}` exited {code}: {err}");
    }
    let prompts = fs::read_to_string(dir.join("prompts.jsonl")).map_err(|e| e.to_string())?;
    let run_verdicts: Vec<ScreeningVerdict> = fs::read_to_string(dir.join("verdicts.jsonl"))
        .map_err(|e| e.to_string())?
        .lines()
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    ensure!(prompts.lines().count() == 50, "run wrote {} prompt bundles", prompts.lines().count());
    ensure!(run_verdicts.len() == 50, "run wrote {} verdicts", run_verdicts.len());
    ensure!(run_verdicts.iter().all(|v| v.moderation == Moderation::Pending), "run verdict not pending");
    ensure!(server.connections() == 0, "dry run opened {} connections", server.connections());

    let live = ScreenClient::new(LlmConfig::new(endpoint, "stub-chat"), None).map_err(|e| e.to_string())?;
    let record = |t: &str| normalize(&RawRecord { title: t.into(), source_db: "ACM".into(), query_id: "q".into(), ..Default::default() });
    let mut seen = Vec::new();
    for (title, want) in [("Alpha", Decision::Include), ("Beta", Decision::Exclude), ("Gamma", Decision::Uncertain)] {
        let bundle = render_prompt(&record(title), &criteria(), "screen-v1").map_err(|e| e.to_string())?;
        let v = live.screen_record(&bundle).map_err(|e| e.to_string())?;
        ensure!(v.decision == want, "{title}: {:?} vs {want:?}", v.decision);
        ensure!(v.moderation == Moderation::Pending, "{title}: not pending");
        seen.push(v.decision);
    }
    ensure!(server.connections() == 3, "stub saw {} connections", server.connections());
    Ok(format!("50 bundles, 0 network calls in dry run, stub round-trip {seen:?}"))
}

fn manifest_integrity() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path().join("run");
    demo_run(&dir)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let report = verify_manifest(&manifest_path, &dir);
    ensure!(report.passed(), "untouched run fails: {}", report.to_text());
    let (code, _, err) = lprisma(&dir, &["verify"]);
    ensure!(code == 0, "`verify` exited {code}: {err}");

    let manifest: RunManifest =
        serde_json::from_slice(&fs::read(&manifest_path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure!(!manifest.input_hashes.is_empty(), "manifest lists no files");
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for name in manifest.input_hashes.keys() {
        let path = dir.join(name);
        let original = fs::read(&path).map_err(|e| format!("{name}: {e}"))?;
        ensure!(!original.is_empty(), "{name} is empty");
        let mut mutated = original.clone();
        let at = rng.random_range(0..mutated.len());
        mutated[at] ^= 1 << rng.random_range(0..8);
        fs::write(&path, &mutated).map_err(|e| e.to_string())?;
        let report = verify_manifest(&manifest_path, &dir);
        fs::write(&path, &original).map_err(|e| e.to_string())?;
        let failures: Vec<&str> = report.failures().iter().map(|e| e.name.as_str()).collect();
        ensure!(failures == [name.as_str()], "flip in {name} reported {failures:?}");
        let entry = report.entries.iter().find(|e| &e.name == name).unwrap();
        ensure!(entry.status == EntryStatus::Fail, "{name} status {:?}", entry.status);
    }

    let first = manifest.input_hashes.keys().next().unwrap();
    let path = dir.join(first);
    let original = fs::read(&path).unwrap();
    let mut mutated = original.clone();
    mutated[0] ^= 0x20;
    fs::write(&path, &mutated).unwrap();
    let (code, out, _) = lprisma(&dir, &["verify"]);
    fs::write(&path, &original).unwrap();
    ensure!(code == 2, "`verify` after mutation exited {code}");
    ensure!(out.contains(first.as_str()) || code == 2, "verify output does not name {first}");
    ensure!(verify_manifest(&manifest_path, &dir).passed(), "restored run does not verify");
    Ok(format!("{} files each pinpointed after a single-byte flip", manifest.input_hashes.len()))
}

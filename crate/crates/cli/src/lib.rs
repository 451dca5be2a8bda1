//! `lprisma` command line: pipeline stages as subcommands over a run directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use lprisma_core::embed::{ProviderKind, ScoreMapping};
use lprisma_core::flow::{render_flow, RenderFormat};
use lprisma_core::mixture::BoundaryRule;
use lprisma_core::pipeline::{files, Pipeline, PipelineError, RunConfig, StageReport};
use lprisma_core::screenai::LlmConfig;
use lprisma_core::triage::Bin;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_STAGE: i32 = 2;
pub const EXIT_RECONCILE: i32 = 3;

/// Bundled synthetic review used by `lprisma demo`.
pub const DEMO_FILES: [(&str, &str); 6] = [
    ("queries.json", include_str!("../fixtures/demo/queries.json")),
    ("intent.json", include_str!("../fixtures/demo/intent.json")),
    ("criteria.json", include_str!("../fixtures/demo/criteria.json")),
    ("exports/ieee.csv", include_str!("../fixtures/demo/exports/ieee.csv")),
    ("exports/acm.bib", include_str!("../fixtures/demo/exports/acm.bib")),
    ("exports/scopus.ris", include_str!("../fixtures/demo/exports/scopus.ris")),
];

#[derive(Debug, Parser)]
#[command(name = "lprisma", version, about = "Statistical pre-screening for systematic literature reviews")]
pub struct Cli {
    #[command(flatten)]
    pub opts: Options,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProviderArg {
    Builtin,
    Http,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Mermaid,
    Dot,
    Text,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MappingArg {
    Affine,
    Clamp,
}

#[derive(Debug, Args)]
pub struct Options {
    /// Run directory holding inputs and stage outputs.
    #[arg(long, global = true, default_value = ".")]
    pub run_dir: PathBuf,
    /// JSON file mirroring the run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Embedding provider.
    #[arg(long, global = true)]
    pub provider: Option<ProviderArg>,
    /// Embedding model id.
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Embeddings endpoint for the http provider.
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    /// Embedding dimension.
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    /// Cosine-to-score mapping.
    #[arg(long, global = true)]
    pub mapping: Option<MappingArg>,
    /// Master seed for EM restarts and the builtin embedder.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of mixture components.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Relative log-likelihood tolerance for EM.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Maximum EM iterations per restart.
    #[arg(long, global = true)]
    pub max_iter: Option<usize>,
    /// Number of EM restarts.
    #[arg(long, global = true)]
    pub restarts: Option<usize>,
    /// two-sigma | quantile:QL:QH | manual:LO:HI | posterior:TAU
    #[arg(long, global = true)]
    pub rule: Option<String>,
    /// Histogram bin count.
    #[arg(long, global = true)]
    pub bins: Option<usize>,
    /// Render prompts without calling the LLM endpoint.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Flow diagram format printed by `flow`.
    #[arg(long, global = true, default_value = "text")]
    pub format: FormatArg,
    /// Chat-completion endpoint for screening.
    #[arg(long, global = true)]
    pub llm_endpoint: Option<String>,
    /// Chat model id.
    #[arg(long, global = true)]
    pub llm_model: Option<String>,
    /// Sampling temperature for screening requests.
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// Response token limit for screening requests.
    #[arg(long, global = true)]
    pub max_tokens: Option<u32>,
    /// Eligibility criteria JSON (defaults to criteria.json in the run directory).
    #[arg(long, global = true)]
    pub criteria: Option<PathBuf>,
    /// Prompt template: screen-v1 or summarise-v1.
    #[arg(long, global = true)]
    pub template: Option<String>,
    /// Maximum concurrent LLM requests.
    #[arg(long, global = true)]
    pub concurrency: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse export files listed in queries.json.
    Ingest,
    /// Remove duplicate records by DOI, then normalized title.
    Dedupe,
    /// Score records against the intent statement.
    Score,
    /// Fit the Gaussian mixture to the scores.
    Fit,
    /// Derive lower and upper cutoffs from the fitted mixture.
    Cutoffs,
    /// Assign every record to a triage bin.
    Partition,
    /// Reconcile flow counts and render the flow diagram.
    Flow,
    /// Screen the GenAIReview bin with the LLM (or dry run).
    Screen,
    /// Write the reproducibility manifest.
    Manifest,
    /// Check every hash in the manifest.
    Verify,
    /// Run every stage in order.
    All,
    /// Move one record to another bin, with a logged reason.
    Override {
        #[arg(long)]
        record: String,
        #[arg(long)]
        to: String,
        #[arg(long)]
        reason: String,
        #[arg(long)]
        reviewer: String,
    },
    /// Approve or reject one GenAI verdict.
    Moderate {
        #[arg(long)]
        record: String,
        #[arg(long, conflicts_with = "reject", required_unless_present = "reject")]
        approve: bool,
        #[arg(long)]
        reject: bool,
        #[arg(long)]
        moderator: String,
    },
    /// Write the bundled synthetic review into the run directory.
    Demo,
}

impl Command {
    fn stage(&self) -> Option<&'static str> {
        Some(match self {
            Command::Ingest => "ingest",
            Command::Dedupe => "dedupe",
            Command::Score => "score",
            Command::Fit => "fit",
            Command::Cutoffs => "cutoffs",
            Command::Partition => "partition",
            Command::Flow => "flow",
            Command::Screen => "screen",
            Command::Manifest => "manifest",
            Command::Verify => "verify",
            Command::All => "all",
            _ => return None,
        })
    }
}

/// Builds the run configuration from the optional config file plus flags.
pub fn build_config(o: &Options) -> Result<RunConfig, PipelineError> {
    let bad = |m: String| PipelineError::ConfigInvalid(m);
    let mut cfg = match &o.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| bad(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if o.config.is_none() || o.run_dir != Path::new(".") {
        cfg.run_dir = o.run_dir.clone();
    }
    if let Some(p) = o.provider {
        cfg.provider.kind = match p {
            ProviderArg::Builtin => ProviderKind::Builtin,
            ProviderArg::Http => ProviderKind::Http,
        };
    }
    if let Some(m) = &o.model {
        cfg.provider.model_id = m.clone();
    }
    if let Some(e) = &o.endpoint {
        cfg.provider.endpoint = Some(e.clone());
    }
    if let Some(d) = o.dim {
        cfg.provider.dim = d;
    }
    if let Some(m) = o.mapping {
        cfg.provider.score_mapping = match m {
            MappingArg::Affine => ScoreMapping::Affine,
            MappingArg::Clamp => ScoreMapping::Clamp,
        };
    }
    if let Some(s) = o.seed {
        cfg.master_seed = s;
        cfg.provider.seed = s;
    }
    if let Some(k) = o.k {
        cfg.k = k;
    }
    if let Some(t) = o.tol {
        cfg.tol = t;
    }
    if let Some(m) = o.max_iter {
        cfg.max_iter = m;
    }
    if let Some(r) = o.restarts {
        cfg.restarts = r;
    }
    if let Some(r) = &o.rule {
        cfg.rule = r.parse::<BoundaryRule>().map_err(|e| bad(e.to_string()))?;
    }
    if let Some(b) = o.bins {
        cfg.bins = b;
    }
    if o.dry_run {
        cfg.dry_run = true;
    }
    if o.llm_endpoint.is_some() || o.llm_model.is_some() {
        let mut llm = cfg.llm.take().unwrap_or_else(|| LlmConfig::new("", ""));
        if let Some(e) = &o.llm_endpoint {
            llm.endpoint = e.clone();
        }
        if let Some(m) = &o.llm_model {
            llm.model_id = m.clone();
        }
        cfg.llm = Some(llm);
    }
    if let Some(llm) = cfg.llm.as_mut() {
        if let Some(t) = o.temperature {
            llm.temperature = t;
        }
        if let Some(m) = o.max_tokens {
            llm.max_tokens = m;
        }
    }
    if let Some(c) = &o.criteria {
        cfg.criteria_file = Some(c.clone());
    }
    if let Some(t) = &o.template {
        cfg.template_id = t.clone();
    }
    if let Some(c) = o.concurrency {
        cfg.concurrency = c;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes the bundled demo review into `dir`, refusing to overwrite an existing one.
pub fn write_demo(dir: &Path) -> Result<(), PipelineError> {
    let err = |e: std::io::Error| PipelineError::Stage { stage: "demo", message: e.to_string() };
    if dir.join(files::QUERIES).exists() {
        return Err(PipelineError::Stage {
            stage: "demo",
            message: format!("{} already contains {}", dir.display(), files::QUERIES),
        });
    }
    for (name, body) in DEMO_FILES {
        let path = dir.join(name);
        fs::create_dir_all(path.parent().expect("fixture paths have a parent")).map_err(err)?;
        fs::write(&path, body).map_err(err)?;
    }
    Ok(())
}

fn print_reports(out: &mut dyn Write, reports: &[StageReport]) {
    for r in reports {
        for line in &r.lines {
            let _ = writeln!(out, "[{}] {line}", r.stage);
        }
    }
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), PipelineError> {
    if let Command::Demo = cli.command {
        fs::create_dir_all(&cli.opts.run_dir)
            .map_err(|e| PipelineError::Stage { stage: "demo", message: e.to_string() })?;
        write_demo(&cli.opts.run_dir)?;
        let _ = writeln!(out, "[demo] wrote synthetic review to {}", cli.opts.run_dir.display());
        return Ok(());
    }
    let cfg = build_config(&cli.opts)?;
    let pipeline = Pipeline::open(cfg)?;
    let reports = match &cli.command {
        Command::Override { record, to, reason, reviewer } => {
            let bin: Bin = to.parse().map_err(|e: lprisma_core::triage::TriageError| PipelineError::ConfigInvalid(e.to_string()))?;
            vec![pipeline.override_record(record, bin, reason, reviewer)?]
        }
        Command::Moderate { record, approve, moderator, .. } => vec![pipeline.moderate(record, *approve, moderator)?],
        cmd => pipeline.run(cmd.stage().expect("stage command"))?,
    };
    print_reports(out, &reports);
    if let Command::Flow = cli.command {
        let counts = pipeline.flow_counts()?;
        let fmt = match cli.opts.format {
            FormatArg::Mermaid => RenderFormat::Mermaid,
            FormatArg::Dot => RenderFormat::Dot,
            FormatArg::Text => RenderFormat::Text,
        };
        let text = render_flow(&counts, fmt).map_err(|e| PipelineError::Reconciliation { stage: "flow", source: e })?;
        let _ = write!(out, "\n{text}");
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            if let PipelineError::Verification { report, .. } = &e {
                let _ = write!(err, "{}", report.to_text());
            }
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

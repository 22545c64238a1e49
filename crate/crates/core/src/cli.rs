//! Command-line front end.
//!
//! Settings resolve as flags, then the `--config` file, then built-in
//! defaults. Credentials are read from the environment only.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::annotate::{AnnotatorConfig, DEFAULT_OVERLAP_THRESHOLD};
use crate::backend::HttpConfig;
use crate::conformal::{CalibrationResult, GroupPolicy, Mode};
use crate::corpus::{self, AnswerRecord};
use crate::error::Error;
use crate::pipeline::{
    evaluate, reports_csv_string, DecomposeBackend, EvaluationReport, InferenceOutput, MergeBackend, Pipeline,
    PipelineConfig, RetrievalConfig,
};
use crate::similarity::{EmbeddingProviderConfig, DEFAULT_HASHED_DIM};
use crate::synth::{self, HarnessOptions, SynthConfig};

const DEFAULT_ALPHA: f64 = 0.1;
const DEFAULT_SEED: u64 = 42;
const DEFAULT_CALIBRATION_FRACTION: f64 = 0.5;
const DEFAULT_SYNTH_ALPHA: f64 = 0.2;
const DEFAULT_TOLERANCE: f64 = 0.02;

#[derive(Debug, Parser)]
#[command(name = "conformal-claims", version, about = "Conformal factuality filtering for retrieval-augmented answers")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Calibrate a relevance threshold on a labeled dataset.
    Calibrate(CalibrateArgs),
    /// Filter and merge the claims of a dataset with a calibrated threshold.
    Infer(InferArgs),
    /// Score an `infer` output against labeled test records.
    Evaluate(EvaluateArgs),
    /// Calibrate, filter and evaluate over a grid of alpha values.
    Sweep(SweepArgs),
    /// Monte Carlo check of the coverage guarantee on synthetic data.
    SynthCoverage(SynthArgs),
    /// Precompute an embedding store for a dataset and/or document corpus.
    EmbedCorpus(EmbedArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProviderKind {
    HashedTf,
    ExternalHttp,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AnnotatorKind {
    Oracle,
    Overlap,
    ExternalLlm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DecomposeKind {
    SentenceSplit,
    ExternalLlm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MergeKind {
    Concatenate,
    ExternalLlm,
}

/// Settings shared by every dataset command.
#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Embedding provider.
    #[arg(long, value_enum)]
    provider: Option<ProviderKind>,
    /// Embedding dimension (hashed_tf bucket count, or the expected external size).
    #[arg(long)]
    embedding_dim: Option<usize>,
    /// Model name for the external embedding provider.
    #[arg(long)]
    embedding_model: Option<String>,
    /// Claim annotator.
    #[arg(long, value_enum)]
    annotator: Option<AnnotatorKind>,
    /// Token overlap ratio at which the overlap annotator calls a claim factual.
    #[arg(long)]
    overlap_threshold: Option<f64>,
    /// Chat model for external annotation, decomposition and merging.
    #[arg(long)]
    llm_model: Option<String>,
    /// Claim decomposition backend for records that only carry a raw answer.
    #[arg(long, value_enum)]
    decompose: Option<DecomposeKind>,
    /// Backend that rewrites retained claims into an answer.
    #[arg(long, value_enum)]
    merge: Option<MergeKind>,
    /// Handling of test groups without a calibrated threshold.
    #[arg(long, value_enum)]
    policy: Option<GroupPolicy>,
    /// Worker threads (0 = machine parallelism, 1 = sequential).
    #[arg(long)]
    concurrency: Option<usize>,
    /// JSONL embedding store used for items without inline embeddings.
    #[arg(long, value_name = "FILE")]
    embedding_store: Option<PathBuf>,
    /// JSONL document corpus; when set, documents are retrieved per query.
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    /// Documents retrieved per query when --corpus is set.
    #[arg(long)]
    top_k: Option<usize>,
    /// Seed for every randomized step.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Labeled calibration dataset (JSONL).
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Target error rate in (0, 1).
    #[arg(long, value_parser = parse_alpha)]
    alpha: Option<f64>,
    /// Marginal threshold or one threshold per query group.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Where to write the calibration JSON.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct InferArgs {
    /// Dataset to filter (JSONL; labels not required).
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Calibration JSON written by `calibrate`.
    #[arg(long, value_name = "FILE")]
    calibration: PathBuf,
    /// Output JSON path (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Labeled test dataset (JSONL) matching the inference output.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Output JSON written by `infer`.
    #[arg(long, value_name = "FILE")]
    inference: PathBuf,
    /// Report CSV path (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Also write the full report, with per-record detail, as JSON.
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Labeled dataset split into calibration and test parts by --seed.
    #[arg(long, value_name = "FILE", required_unless_present = "calibration_data", conflicts_with_all = ["calibration_data", "test_data"])]
    data: Option<PathBuf>,
    /// Labeled calibration dataset (use with --test-data instead of --data).
    #[arg(long, value_name = "FILE", requires = "test_data")]
    calibration_data: Option<PathBuf>,
    /// Labeled test dataset.
    #[arg(long, value_name = "FILE", requires = "calibration_data")]
    test_data: Option<PathBuf>,
    /// Fraction of --data used for calibration.
    #[arg(long)]
    calibration_fraction: Option<f64>,
    /// Alpha grid: `start:end:step` (inclusive) or a comma-separated list.
    #[arg(long, value_parser = parse_alphas)]
    alphas: Option<AlphaList>,
    /// Marginal threshold or one threshold per query group.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Report CSV path (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Also write the full reports, with per-record detail, as JSON.
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Synthetic population config (JSON); the two-group default when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Target error rate in (0, 1).
    #[arg(long, value_parser = parse_alpha, default_value_t = DEFAULT_SYNTH_ALPHA)]
    alpha: f64,
    /// Marginal threshold or one threshold per group.
    #[arg(long, value_enum, default_value_t = Mode::Marginal)]
    mode: Mode,
    /// Number of trials (overrides the config).
    #[arg(long)]
    trials: Option<usize>,
    /// Seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Allowed deviation of mean factuality from the target band.
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Worker threads (0 = machine parallelism).
    #[arg(long, default_value_t = 0)]
    concurrency: usize,
    /// Summary JSON path (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Shifts the calibrated quantile rank; for exercising the bound check.
    #[arg(long, hide = true, default_value_t = 0, allow_hyphen_values = true)]
    quantile_rank_offset: i64,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("inputs").required(true).multiple(true).args(["data", "corpus_documents"]))]
struct EmbedArgs {
    /// Dataset whose queries, documents and claims are embedded.
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    /// Document corpus (JSONL) to embed as well.
    #[arg(long = "documents", value_name = "FILE")]
    corpus_documents: Option<PathBuf>,
    /// Output embedding store (JSONL).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

/// Contents of a `--config` file. Everything is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct AlphaList(Vec<f64>);

/// Failure with its exit code: 1 for runtime failures, 2 for usage or
/// configuration errors.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::InvalidAlpha(_) => 2,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn check_alpha(alpha: f64) -> Result<f64, String> {
    if alpha.is_finite() && alpha > 0.0 && alpha < 1.0 {
        Ok(alpha)
    } else {
        Err(format!("alpha must lie strictly between 0 and 1, got {alpha}"))
    }
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("`{s}` is not a number"))?;
    check_alpha(v)
}

/// Parses `start:end:step` (end inclusive) or `a,b,c`.
fn parse_alphas(s: &str) -> Result<AlphaList, String> {
    let s = s.trim();
    if s.is_empty() {
        return Err("alpha list is empty".into());
    }
    let num = |t: &str| -> Result<f64, String> { t.trim().parse().map_err(|_| format!("`{t}` is not a number")) };
    let values = if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        let [start, end, step] = parts[..] else {
            return Err(format!("range `{s}` must have the form start:end:step"));
        };
        let (start, end, step) = (num(start)?, num(end)?, num(step)?);
        if !(step > 0.0) || !step.is_finite() {
            return Err(format!("range step must be positive, got {step}"));
        }
        if start > end {
            return Err(format!("range `{s}` is empty"));
        }
        let count = ((end - start) / step + 1e-9).floor() as usize + 1;
        (0..count)
            .map(|i| ((start + i as f64 * step) * 1e10).round() / 1e10)
            .collect()
    } else {
        s.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    };
    for &a in &values {
        check_alpha(a)?;
    }
    Ok(AlphaList(values))
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::SynthCoverage(a) => cmd_synth_coverage(a),
        Command::EmbedCorpus(a) => cmd_embed_corpus(a),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("invalid {what} {}: {e}", path.display())))
}

fn write_output(path: Option<&Path>, content: &str) -> CliResult {
    match path {
        Some(p) => std::fs::write(p, content)
            .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", p.display()))),
        None => std::io::stdout()
            .write_all(content.as_bytes())
            .map_err(|e| Failure::runtime(format!("cannot write to stdout: {e}"))),
    }
}

fn to_json_string<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable output");
    s.push('\n');
    s
}

/// Path of the provenance file written next to a CSV output.
fn config_sidecar(csv: &Path) -> PathBuf {
    let mut name = csv.as_os_str().to_owned();
    name.push(".config.json");
    PathBuf::from(name)
}

fn http_model(model: Option<&str>, flag: &str) -> CliResult<HttpConfig> {
    model
        .map(HttpConfig::new)
        .ok_or_else(|| Failure::usage(format!("{flag} is required for external backends")))
}

impl RunArgs {
    /// Merges flags over the config file over defaults.
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg: RunConfig = match &self.config {
            Some(p) => read_json(p, "config file")?,
            None => RunConfig::default(),
        };
        let p = &mut cfg.pipeline;
        match self.provider {
            Some(ProviderKind::HashedTf) => {
                p.provider = EmbeddingProviderConfig::HashedTf {
                    dim: self.embedding_dim.unwrap_or(DEFAULT_HASHED_DIM),
                }
            }
            Some(ProviderKind::ExternalHttp) => {
                let http = match (&self.embedding_model, &p.provider) {
                    (Some(m), _) => HttpConfig::new(m.clone()),
                    (None, EmbeddingProviderConfig::ExternalHttp { http, .. }) => http.clone(),
                    (None, _) => http_model(None, "--embedding-model")?,
                };
                p.provider = EmbeddingProviderConfig::ExternalHttp {
                    http,
                    dim: self.embedding_dim,
                };
            }
            None => match (&mut p.provider, self.embedding_dim) {
                (EmbeddingProviderConfig::HashedTf { dim }, Some(d)) => *dim = d,
                (EmbeddingProviderConfig::ExternalHttp { dim, .. }, Some(d)) => *dim = Some(d),
                _ => {}
            },
        }
        if let (Some(m), EmbeddingProviderConfig::ExternalHttp { http, .. }) = (&self.embedding_model, &mut p.provider) {
            http.model = m.clone();
        }
        match self.annotator {
            Some(AnnotatorKind::Oracle) => p.annotator = AnnotatorConfig::Oracle,
            Some(AnnotatorKind::Overlap) => {
                p.annotator = AnnotatorConfig::Overlap {
                    overlap_threshold: self.overlap_threshold.unwrap_or(DEFAULT_OVERLAP_THRESHOLD),
                }
            }
            Some(AnnotatorKind::ExternalLlm) => {
                p.annotator = AnnotatorConfig::ExternalLlm {
                    http: http_model(self.llm_model.as_deref(), "--llm-model")?,
                    prompt_template: None,
                }
            }
            None => {
                if let (AnnotatorConfig::Overlap { overlap_threshold }, Some(t)) =
                    (&mut p.annotator, self.overlap_threshold)
                {
                    *overlap_threshold = t;
                }
            }
        }
        match self.decompose {
            Some(DecomposeKind::SentenceSplit) => p.decompose = DecomposeBackend::SentenceSplit,
            Some(DecomposeKind::ExternalLlm) => {
                p.decompose = DecomposeBackend::ExternalLlm {
                    http: http_model(self.llm_model.as_deref(), "--llm-model")?,
                }
            }
            None => {}
        }
        match self.merge {
            Some(MergeKind::Concatenate) => p.merge = MergeBackend::Concatenate,
            Some(MergeKind::ExternalLlm) => {
                p.merge = MergeBackend::ExternalLlm {
                    http: http_model(self.llm_model.as_deref(), "--llm-model")?,
                }
            }
            None => {}
        }
        if let Some(policy) = self.policy {
            p.policy = policy;
        }
        if let Some(c) = self.concurrency {
            p.concurrency = c;
        }
        if let Some(s) = &self.embedding_store {
            p.embedding_store = Some(s.clone());
        }
        match (&self.corpus, &mut p.retrieval) {
            (Some(c), Some(r)) => r.corpus = c.clone(),
            (Some(c), None) => {
                p.retrieval = Some(RetrievalConfig {
                    corpus: c.clone(),
                    top_k: self.top_k.unwrap_or(5),
                })
            }
            _ => {}
        }
        if let (Some(k), Some(r)) = (self.top_k, &mut p.retrieval) {
            r.top_k = k;
        }
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if let Some(a) = cfg.alpha {
            check_alpha(a).map_err(Failure::usage)?;
        }
        if let Some(list) = &cfg.alphas {
            if list.is_empty() {
                return Err(Failure::usage("alpha list is empty"));
            }
            for &a in list {
                check_alpha(a).map_err(Failure::usage)?;
            }
        }
        cfg.seed.get_or_insert(DEFAULT_SEED);
        Ok(cfg)
    }
}

fn config_value(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("serializable config")
}

fn cmd_calibrate(args: CalibrateArgs) -> CliResult {
    let mut cfg = args.run.resolve()?;
    let alpha = args.alpha.or(cfg.alpha).unwrap_or(DEFAULT_ALPHA);
    let mode = args.mode.or(cfg.mode).unwrap_or(Mode::Marginal);
    cfg.alpha = Some(alpha);
    cfg.mode = Some(mode);
    let pipeline = Pipeline::new(cfg.pipeline.clone())?;
    let mut calib = pipeline.run_calibration(&args.data, alpha, mode)?;
    calib.config = Some(config_value(&cfg));
    calib.save(&args.out)?;
    let mut summary = format!("alpha={} mode={mode} n={} marginal_q={}\n", alpha, calib.n, calib.marginal_q);
    for (g, t) in &calib.per_group {
        summary.push_str(&format!("group={g} n={} q={}\n", t.n, t.q));
    }
    write_output(None, &summary)
}

fn cmd_infer(args: InferArgs) -> CliResult {
    let cfg = args.run.resolve()?;
    let calib = CalibrationResult::load(&args.calibration).map_err(|e| match e {
        Error::Io(_) | Error::Json(_) => Failure::usage(format!("calibration {}: {e}", args.calibration.display())),
        other => other.into(),
    })?;
    let pipeline = Pipeline::new(cfg.pipeline.clone())?;
    let records = pipeline.run_inference(&args.data, &calib)?;
    let out = InferenceOutput {
        alpha: calib.alpha,
        mode: calib.mode(),
        policy: cfg.pipeline.policy,
        records,
        config: Some(config_value(&cfg)),
    };
    write_output(args.out.as_deref(), &to_json_string(&out))
}

/// Loads a labeled dataset and runs it through decomposition, scoring and
/// annotation so claim ids and labels line up with the inference side.
fn load_labeled(pipeline: &Pipeline, path: &Path) -> CliResult<Vec<AnswerRecord>> {
    let records = pipeline.load(path, true)?;
    Ok(pipeline.prepare(&records, true)?)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    reports: &'a [EvaluationReport],
    config: serde_json::Value,
}

fn write_reports(reports: &[EvaluationReport], cfg: &RunConfig, out: Option<&Path>, json: Option<&Path>) -> CliResult {
    let csv = reports_csv_string(reports)?;
    write_output(out, &csv)?;
    if let Some(p) = out {
        write_output(Some(&config_sidecar(p)), &to_json_string(cfg))?;
    }
    if let Some(p) = json {
        let file = ReportFile {
            reports,
            config: config_value(cfg),
        };
        write_output(Some(p), &to_json_string(&file))?;
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> CliResult {
    let mut cfg = args.run.resolve()?;
    let inference: InferenceOutput = read_json(&args.inference, "inference output")?;
    cfg.alpha = Some(inference.alpha);
    cfg.mode = Some(inference.mode);
    let pipeline = Pipeline::new(cfg.pipeline.clone())?;
    let labeled = load_labeled(&pipeline, &args.data)?;
    let outcomes: Vec<_> = inference.records.into_iter().map(|r| r.outcome).collect();
    let report = evaluate(&outcomes, &labeled, inference.alpha, inference.mode)?;
    write_reports(&[report], &cfg, args.out.as_deref(), args.json.as_deref())
}

fn cmd_sweep(args: SweepArgs) -> CliResult {
    let mut cfg = args.run.resolve()?;
    let alphas = match (args.alphas, &cfg.alphas) {
        (Some(AlphaList(a)), _) => a,
        (None, Some(a)) => a.clone(),
        (None, None) => return Err(Failure::usage("--alphas is required")),
    };
    let mode = args.mode.or(cfg.mode).unwrap_or(Mode::Marginal);
    let seed = cfg.seed.unwrap_or(DEFAULT_SEED);
    cfg.alphas = Some(alphas.clone());
    cfg.mode = Some(mode);
    let pipeline = Pipeline::new(cfg.pipeline.clone())?;
    let (cal, test) = match (&args.data, &args.calibration_data, &args.test_data) {
        (Some(data), _, _) => {
            let fraction = args
                .calibration_fraction
                .or(cfg.calibration_fraction)
                .unwrap_or(DEFAULT_CALIBRATION_FRACTION);
            cfg.calibration_fraction = Some(fraction);
            let records = load_labeled(&pipeline, data)?;
            corpus::split_calibration_test(&records, fraction, seed)?
        }
        (None, Some(c), Some(t)) => (load_labeled(&pipeline, c)?, load_labeled(&pipeline, t)?),
        _ => return Err(Failure::usage("either --data or both --calibration-data and --test-data are required")),
    };
    let reports = pipeline.sweep_prepared(&cal, &test, &alphas, mode)?;
    write_reports(&reports, &cfg, args.out.as_deref(), args.json.as_deref())
}

#[derive(Serialize)]
struct SynthReport<'a> {
    #[serde(flatten)]
    summary: &'a synth::CoverageSummary,
    tolerance: f64,
    passed: bool,
    violations: &'a [synth::BoundViolation],
    config: &'a SynthConfig,
}

fn cmd_synth_coverage(args: SynthArgs) -> CliResult {
    let mut cfg: SynthConfig = match &args.config {
        Some(p) => read_json(p, "synth config")?,
        None => SynthConfig::default(),
    };
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    if !(args.tolerance >= 0.0 && args.tolerance.is_finite()) {
        return Err(Failure::usage(format!("tolerance must be non-negative, got {}", args.tolerance)));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.concurrency)
        .build()
        .map_err(|e| Failure::usage(format!("worker pool: {e}")))?;
    let opts = HarnessOptions {
        rank_offset: args.quantile_rank_offset,
        ..HarnessOptions::default()
    };
    let summary = pool.install(|| synth::run_coverage(&cfg, args.alpha, args.mode, opts))?;
    let violations = synth::check_bounds(&summary, args.tolerance);
    let report = SynthReport {
        summary: &summary,
        tolerance: args.tolerance,
        passed: violations.is_empty(),
        violations: &violations,
        config: &cfg,
    };
    write_output(args.out.as_deref(), &to_json_string(&report))?;
    if violations.is_empty() {
        Ok(())
    } else {
        let detail: Vec<String> = violations
            .iter()
            .map(|v| format!("{} {}: observed {:.4}, bound {:.4}", v.scope, v.kind, v.observed, v.bound))
            .collect();
        Err(Failure::runtime(format!("coverage bounds violated: {}", detail.join("; "))))
    }
}

fn cmd_embed_corpus(args: EmbedArgs) -> CliResult {
    let cfg = args.run.resolve()?;
    let mut pipeline_cfg = cfg.pipeline.clone();
    // Items are embedded from scratch; neither an existing store nor retrieval applies.
    pipeline_cfg.embedding_store = None;
    pipeline_cfg.retrieval = None;
    let pipeline = Pipeline::new(pipeline_cfg)?;
    let records = match &args.data {
        Some(p) => corpus::load_dataset(p, corpus::Split::Test)?,
        None => Vec::new(),
    };
    let documents = match &args.corpus_documents {
        Some(p) => corpus::load_documents(p)?,
        None => Vec::new(),
    };
    let store = pipeline.build_store(&records, &documents)?;
    store.save(&args.out)?;
    write_output(None, &format!("embedded {} items into {}\n", store.len(), args.out.display()))
}

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use cirrus_client::ReviewClient;
use cirrus_core::config::{ConfigError, RunConfig};
use cirrus_core::curriculum::CurriculumConfig;
use cirrus_core::dataset::{load_manifest, partition, DatasetError, DatasetManifest, Split, Subset};
use cirrus_core::jsonl;
use cirrus_core::metrics::{evaluate_clean, CleanMetrics, ConfusionMatrix, MetricsError, MetricsReport};
use cirrus_core::noisy_eval::{
    aggregate_error_rate, compare_methods, prescreen, ErrorCategory, Judgment, MethodEntry, NoisyEvalError,
    NoisyEvalSummary, Source, Verdict,
};
use cirrus_core::raster::{Mask, RasterError};
use cirrus_core::run::{train_run, write_predictions, RunDir, RunError};
use cirrus_core::synthgen::{generate_dataset, SynthError, MANIFEST_FILE};
use cirrus_core::trainer::TrainError;
use cirrus_review::{ReviewConfig, ReviewError};

#[derive(Debug, Parser)]
#[command(name = "cirrus", version, about = "Cloud/snow segmentation under noisy labels")]
struct Cli {
    /// Run config document (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output location; meaning depends on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value = "info")]
    log_level: tracing::Level,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct DataArg {
    /// Dataset directory holding manifest.json [default: paths.data_dir].
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArg {
    /// Run directory [default: paths.run_dir].
    #[arg(long)]
    run: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic benchmark into --out [default: paths.data_dir].
    Generate,
    /// Train and select the best checkpoint into --out [default: paths.run_dir].
    Train {
        #[command(flatten)]
        data: DataArg,
        /// All noisy samples from epoch 0 (m = n = 0).
        #[arg(long)]
        baseline: bool,
    },
    /// Clean test-set metrics of the selected checkpoint.
    EvalClean {
        #[command(flatten)]
        run: RunArg,
        #[command(flatten)]
        data: DataArg,
    },
    /// Predict the noisy test set and write PRESCREEN judgments.
    Prescreen {
        #[command(flatten)]
        run: RunArg,
        #[command(flatten)]
        data: DataArg,
    },
    /// Serve the review API.
    ReviewServe {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        predictions_dir: Option<PathBuf>,
        #[arg(long)]
        judgments_file: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Reject judgments without a reviewer name.
        #[arg(long)]
        reviewer_required: bool,
        #[command(flatten)]
        run: RunArg,
    },
    /// error% of the noisy test set from a judgments file.
    ErrorRate {
        #[arg(long)]
        judgments: Option<PathBuf>,
        #[command(flatten)]
        run: RunArg,
        #[command(flatten)]
        data: DataArg,
    },
    /// Comparison table across methods.
    Report {
        /// NAME=RUN_DIR; reads clean_metrics.json and error_rate.json.
        #[arg(long = "method", value_name = "NAME=RUN_DIR")]
        methods: Vec<String>,
        /// JSON list of method entries.
        #[arg(long)]
        entries: Option<PathBuf>,
    },
    /// Print the live summary of a running review service.
    ReviewSummary {
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        url: String,
    },
    /// Post one judgment to a running review service.
    ReviewJudge {
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        url: String,
        image_id: String,
        #[arg(value_parser = parse_verdict)]
        verdict: Verdict,
        #[arg(long = "category", value_parser = parse_category)]
        categories: Vec<ErrorCategory>,
        #[arg(long)]
        reviewer: Option<String>,
    },
}

fn parse_verdict(s: &str) -> Result<Verdict, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_uppercase())).map_err(|_| format!("expected OK or ERROR, got {s:?}"))
}

fn parse_category(s: &str) -> Result<ErrorCategory, String> {
    let norm = s.to_ascii_uppercase().replace('-', "_");
    serde_json::from_value(serde_json::Value::String(norm)).map_err(|_| {
        let all: Vec<&str> = ErrorCategory::ALL.iter().map(|c| c.as_str()).collect();
        format!("expected one of {}", all.join(", "))
    })
}

/// Failure classes with distinct exit codes.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
    Diverged(anyhow::Error),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Diverged(_) => 4,
            Failure::Other(_) => 1,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Data(e) | Failure::Diverged(e) | Failure::Other(e) => e,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Data(e.into()),
            _ => Failure::Config(e.into()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Curriculum(_) => Failure::Config(e.into()),
            TrainError::Diverged { .. } => Failure::Diverged(e.into()),
            TrainError::DataError(_) | TrainError::Raster(_) => Failure::Data(e.into()),
            _ => Failure::Other(e.into()),
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Train(t) => t.into(),
            RunError::Model(_) => Failure::Other(e.into()),
            _ => Failure::Data(e.into()),
        }
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        Failure::Data(e.into())
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(_) => Failure::Config(e.into()),
            _ => Failure::Data(e.into()),
        }
    }
}

impl From<RasterError> for Failure {
    fn from(e: RasterError) -> Self {
        Failure::Data(e.into())
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        Failure::Data(e.into())
    }
}

impl From<NoisyEvalError> for Failure {
    fn from(e: NoisyEvalError) -> Self {
        match e {
            NoisyEvalError::BadThreshold { .. } => Failure::Config(e.into()),
            _ => Failure::Data(e.into()),
        }
    }
}

impl From<ReviewError> for Failure {
    fn from(e: ReviewError) -> Self {
        match e {
            ReviewError::Io(_) => Failure::Other(e.into()),
            _ => Failure::Data(e.into()),
        }
    }
}

impl From<jsonl::JsonlError> for Failure {
    fn from(e: jsonl::JsonlError) -> Self {
        Failure::Data(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

type Outcome<T = ()> = Result<T, Failure>;

/// Written by eval-clean and read back by report.
#[derive(Debug, Serialize, Deserialize)]
struct CleanEval {
    subset: Subset,
    split: Split,
    images: usize,
    checkpoint_epoch: usize,
    metrics: CleanMetrics,
    percent: MetricsReport,
    confusion: ConfusionMatrix,
}

fn load_config(cli: &Cli) -> Outcome<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    Ok(config)
}

fn data_dir(config: &RunConfig, arg: &DataArg) -> PathBuf {
    arg.data.clone().unwrap_or_else(|| config.paths.data_dir.clone())
}

fn run_dir(config: &RunConfig, arg: &RunArg) -> RunDir {
    RunDir::new(arg.run.clone().unwrap_or_else(|| config.paths.run_dir.clone()))
}

fn manifest_at(dir: &Path) -> Outcome<DatasetManifest> {
    Ok(load_manifest(&dir.join(MANIFEST_FILE))?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(value).context("serializing output")? + "\n";
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display())).map_err(Failure::Data)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display())).map_err(Failure::Data)
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Outcome {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::Other(e.into())),
        _ => Ok(()),
    }
}

fn print_json(value: &impl Serialize) -> Outcome {
    emit(&(serde_json::to_string_pretty(value).context("serializing output")? + "\n"))
}

/// The error chain, skipping causes already quoted by their parent.
fn describe(error: &anyhow::Error) -> String {
    let mut text = error.to_string();
    let mut last = text.clone();
    for cause in error.chain().skip(1) {
        let msg = cause.to_string();
        if !last.contains(&msg) {
            text.push_str(": ");
            text.push_str(&msg);
        }
        last = msg;
    }
    text
}

fn cmd_generate(cli: &Cli, config: &RunConfig) -> Outcome {
    let out = cli.out.clone().unwrap_or_else(|| config.paths.data_dir.clone());
    let manifest = generate_dataset(&config.synth, &out)?;
    let c = &manifest.counts;
    tracing::info!(
        clean_trainval = c.clean_trainval,
        clean_test = c.clean_test,
        noisy_trainval = c.noisy_trainval,
        noisy_test = c.noisy_test,
        "dataset written"
    );
    emit(&format!("{}\n", out.join(MANIFEST_FILE).display()))
}

fn cmd_train(cli: &Cli, mut config: RunConfig, data: &DataArg, baseline: bool) -> Outcome {
    if baseline {
        config.curriculum = CurriculumConfig::baseline(config.curriculum.seed);
    }
    config.validate()?;
    let data = data_dir(&config, data);
    config.paths.data_dir = data.clone();
    let run = RunDir::new(cli.out.clone().unwrap_or_else(|| config.paths.run_dir.clone()));
    config.paths.run_dir = run.root.clone();
    let manifest = manifest_at(&data)?;
    let best = train_run(&config, &manifest, &run)?;
    tracing::info!(epoch = best.epoch, train_miou = best.train_miou, "selected checkpoint");
    emit(&format!("{}\n", run.best().display()))
}

fn cmd_eval_clean(cli: &Cli, config: &RunConfig, run: &RunArg, data: &DataArg) -> Outcome {
    let run = run_dir(config, run);
    let manifest = manifest_at(&data_dir(config, data))?;
    let best = run.read_best()?;
    let model = run.load_best()?;
    let eval = evaluate_clean(&model, &manifest, Split::Test, Subset::Clean)?;
    let out = CleanEval {
        subset: Subset::Clean,
        split: Split::Test,
        images: eval.images,
        checkpoint_epoch: best.epoch,
        metrics: eval.metrics,
        percent: eval.metrics.report(),
        confusion: eval.confusion,
    };
    write_json(&cli.out.clone().unwrap_or_else(|| run.clean_metrics()), &out)?;
    print_json(&out)
}

fn cmd_prescreen(cli: &Cli, config: &RunConfig, run: &RunArg, data: &DataArg) -> Outcome {
    config.thresholds.validate()?;
    let run = run_dir(config, run);
    let manifest = manifest_at(&data_dir(config, data))?;
    let model = run.load_best()?;
    let written = write_predictions(&model, &manifest, Subset::Noisy, Split::Test, &run.predictions())?;
    if written == 0 {
        tracing::warn!("the noisy test partition is empty");
    }
    let now = chrono::Utc::now();
    let mut judgments = Vec::new();
    for rec in partition(&manifest, Subset::Noisy, Split::Test) {
        let label = manifest.load_label(&rec)?;
        let pred = Mask::load_png(&run.predictions().join(format!("{}.png", rec.id)))?;
        let result = prescreen(&pred, &label, &config.thresholds)?;
        judgments.push(Judgment {
            image_id: rec.id,
            verdict: result.verdict,
            categories: result.categories,
            reviewer: "prescreen".into(),
            source: Source::Prescreen,
            timestamp: now,
        });
    }
    // Human judgments already in the file are kept; earlier prescreen output is replaced.
    let path = cli.out.clone().unwrap_or_else(|| run.judgments());
    let mut all: Vec<Judgment> = if path.exists() {
        jsonl::read::<Judgment>(&path)?
            .into_iter()
            .filter(|j| j.source == Source::Human)
            .collect()
    } else {
        Vec::new()
    };
    let flagged = judgments.iter().filter(|j| j.verdict == Verdict::Error).count();
    all.extend(judgments);
    jsonl::write(&path, &all)?;
    tracing::info!(images = written, flagged, "prescreen written");
    emit(&format!("{}\n", path.display()))
}

fn cmd_error_rate(cli: &Cli, config: &RunConfig, judgments: &Option<PathBuf>, run: &RunArg, data: &DataArg) -> Outcome {
    let run = run_dir(config, run);
    let path = judgments
        .clone()
        .or_else(|| config.paths.judgments.clone())
        .unwrap_or_else(|| run.judgments());
    let manifest = manifest_at(&data_dir(config, data))?;
    let list: Vec<Judgment> = jsonl::read(&path)?;
    let agg = aggregate_error_rate(&list, &manifest, Subset::Noisy, Split::Test)?;
    if !agg.missing_coverage.is_empty() {
        tracing::warn!(
            unjudged = agg.missing_coverage.len(),
            images = ?agg.missing_coverage,
            "no judgment and no prescreen for these images; counted as OK"
        );
    }
    for d in &agg.disagreements {
        tracing::warn!(image = %d.image_id, winner = %d.winner, "reviewers disagree; latest judgment wins");
    }
    let out = cli.out.clone().unwrap_or_else(|| run.root.join("error_rate.json"));
    write_json(&out, &agg)?;
    print_json(&agg)
}

#[derive(Deserialize)]
struct ErrorRateFile {
    summary: NoisyEvalSummary,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Outcome<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Data)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(Failure::Data)
}

fn cmd_report(cli: &Cli, methods: &[String], entries: &Option<PathBuf>) -> Outcome {
    let mut rows: Vec<MethodEntry> = match entries {
        Some(path) => read_json(path)?,
        None => Vec::new(),
    };
    for spec in methods {
        let (name, dir) = spec
            .split_once('=')
            .ok_or_else(|| Failure::Config(anyhow::anyhow!("--method expects NAME=RUN_DIR, got {spec:?}")))?;
        let run = RunDir::new(dir);
        let clean = run.clean_metrics();
        let noisy = run.root.join("error_rate.json");
        if !clean.exists() && !noisy.exists() {
            return Err(Failure::Data(anyhow::anyhow!("{dir} has neither clean_metrics.json nor error_rate.json")));
        }
        rows.push(MethodEntry {
            name: name.to_string(),
            clean: clean.exists().then(|| read_json::<CleanEval>(&clean)).transpose()?.map(|c| c.metrics),
            noisy: noisy.exists().then(|| read_json::<ErrorRateFile>(&noisy)).transpose()?.map(|e| e.summary),
        });
    }
    if rows.is_empty() {
        return Err(Failure::Config(anyhow::anyhow!("report needs at least one --method or --entries")));
    }
    let report = compare_methods(&rows);
    emit(&report.to_text())?;
    if let Some(out) = &cli.out {
        write_json(out, &report)?;
    }
    Ok(())
}

async fn cmd_review_serve(config: &RunConfig, args: &Command) -> Outcome {
    let Command::ReviewServe {
        manifest,
        predictions_dir,
        judgments_file,
        port,
        host,
        reviewer_required,
        run,
    } = args
    else {
        unreachable!()
    };
    let run = run_dir(config, run);
    let mut review = ReviewConfig::new(
        manifest.clone().unwrap_or_else(|| config.paths.data_dir.join(MANIFEST_FILE)),
        predictions_dir.clone().unwrap_or_else(|| run.predictions()),
        judgments_file
            .clone()
            .or_else(|| config.paths.judgments.clone())
            .unwrap_or_else(|| run.judgments()),
    );
    review.reviewer_required = *reviewer_required;
    review.thresholds = config.thresholds;
    cirrus_review::serve(review, SocketAddr::new(*host, *port)).await?;
    Ok(())
}

async fn run(cli: Cli) -> Outcome {
    let config = load_config(&cli)?;
    match &cli.command {
        Command::Generate => {
            config
                .synth
                .validate()
                .map_err(|e| Failure::Config(anyhow::anyhow!("synth: {e}")))?;
            cmd_generate(&cli, &config)
        }
        Command::Train { data, baseline } => cmd_train(&cli, config.clone(), data, *baseline),
        Command::EvalClean { run, data } => cmd_eval_clean(&cli, &config, run, data),
        Command::Prescreen { run, data } => cmd_prescreen(&cli, &config, run, data),
        Command::ErrorRate { judgments, run, data } => cmd_error_rate(&cli, &config, judgments, run, data),
        Command::Report { methods, entries } => cmd_report(&cli, methods, entries),
        cmd @ Command::ReviewServe { .. } => cmd_review_serve(&config, cmd).await,
        Command::ReviewSummary { url } => {
            let summary = ReviewClient::new(url.clone()).summary().await.context("fetching summary")?;
            print_json(&summary)
        }
        Command::ReviewJudge {
            url,
            image_id,
            verdict,
            categories,
            reviewer,
        } => {
            let r = ReviewClient::new(url.clone())
                .judge(image_id, *verdict, categories.iter().copied(), reviewer.as_deref())
                .await
                .context("posting judgment")?;
            print_json(&r)
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_max_level(cli.log_level)
        .with_writer(std::io::stderr)
        .init();
    match run(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", describe(failure.error()));
            ExitCode::from(failure.code())
        }
    }
}

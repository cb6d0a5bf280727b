//! `tpp` command line: runs experiment configs stage by stage and renders
//! comparison reports. Exit codes: 0 success, 1 config error, 2 failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::layer::SubscriberExt;
use tracing_subscriber::util::SubscriberInitExt;
use tracing_subscriber::{fmt, EnvFilter, Layer};

use tpp_core::experiment::{
    emit_report, run_experiment, validate_config, ExperimentConfig, RunManifest, RunOptions, Stage,
    MANIFEST_FILE,
};
use tpp_core::Error;

#[derive(Parser)]
#[command(
    name = "tpp",
    version,
    about = "Translation pair prediction experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage of the config.
    Run(RunArgs),
    /// Run up to and including base MLM pretraining.
    PretrainMlm(RunArgs),
    /// Run up to and including TPP pretraining.
    PretrainTpp(RunArgs),
    /// Run up to and including task fine-tuning.
    Finetune(RunArgs),
    /// Run up to and including evaluation on every target language.
    Evaluate(RunArgs),
    /// Run up to and including the embedding alignment analysis.
    Analyze(RunArgs),
    /// Render a comparison table from finished runs.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed and every phase seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue an interrupted run; fails if there is nothing to resume.
    #[arg(long)]
    resume: bool,
    /// Override `output_dir` from the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Baseline run directory or manifest.
    #[arg(long)]
    baseline: PathBuf,
    /// Variant run directories or manifests, one row each, in order.
    #[arg(long = "variant", required = true)]
    variants: Vec<PathBuf>,
    /// Write `<out>.tex` and `<out>.json`; print the table otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a, None),
        Command::PretrainMlm(a) => run(a, Some(Stage::Mlm)),
        Command::PretrainTpp(a) => run(a, Some(Stage::Tpp)),
        Command::Finetune(a) => run(a, Some(Stage::Finetune)),
        Command::Evaluate(a) => run(a, Some(Stage::Evaluate)),
        Command::Analyze(a) => run(a, Some(Stage::Analyze)),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!(error = %e, "failed");
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Config(_)) { 1 } else { 2 })
        }
    }
}

fn init_logging(log_file: Option<&Path>) -> Result<(), Error> {
    let filter = || EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info"));
    let stderr = fmt::layer()
        .json()
        .with_writer(std::io::stderr)
        .with_filter(filter());
    let file = match log_file {
        Some(p) => {
            let f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
            Some(
                fmt::layer()
                    .json()
                    .with_ansi(false)
                    .with_writer(Mutex::new(f))
                    .with_filter(filter()),
            )
        }
        None => None,
    };
    let _ = tracing_subscriber::registry()
        .with(stderr)
        .with(file)
        .try_init();
    Ok(())
}

fn load(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf), Error> {
    let mut cfg = validate_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.apply_seed(seed);
    }
    let dir = args
        .output_dir
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(|d| cfg.resolve(d)))
        .ok_or_else(|| {
            Error::Config("no output directory: set output_dir or pass --output-dir".into())
        })?;
    Ok((cfg, dir))
}

fn run(args: RunArgs, stop_after: Option<Stage>) -> Result<(), Error> {
    let (cfg, dir) = load(&args)?;
    let needs = match stop_after {
        Some(Stage::Mlm) if cfg.base_pretrain.is_none() => Some("base_pretrain"),
        Some(Stage::Tpp) if cfg.schedule.is_none() => Some("schedule"),
        Some(Stage::Analyze) if cfg.analysis.is_none() => Some("analysis"),
        _ => None,
    };
    if let Some(section) = needs {
        return Err(Error::Config(format!(
            "this subcommand needs a [{section}] section in the config"
        )));
    }
    let logs = dir.join("logs");
    fs::create_dir_all(&logs).map_err(|e| Error::Io {
        path: logs.clone(),
        source: e,
    })?;
    init_logging(Some(&logs.join("run.jsonl")))?;
    tracing::info!(config = %args.config.display(), seed = cfg.seed, output_dir = %dir.display(), "starting");
    let opts = RunOptions {
        resume: args.resume,
        stop_after,
        output_dir: Some(dir.clone()),
    };
    let manifest = run_experiment(&cfg, &opts)?;
    for (lang, m) in &manifest.metrics {
        println!("{lang}\t{}\t{}", m.metric, m.display);
    }
    tracing::info!(
        complete = manifest.complete,
        stages = manifest.stages.len(),
        "finished"
    );
    Ok(())
}

fn read_manifest(p: &Path) -> Result<RunManifest, Error> {
    let path = if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    };
    let m = RunManifest::load(&path)?;
    if m.metrics.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} has no evaluation results",
            path.display()
        )));
    }
    Ok(m)
}

fn report(args: ReportArgs) -> Result<(), Error> {
    init_logging(None)?;
    let baseline = read_manifest(&args.baseline)?;
    let variants = args
        .variants
        .iter()
        .map(|p| read_manifest(p))
        .collect::<Result<Vec<_>, _>>()?;
    let r = emit_report(&baseline, &variants)?;
    match args.out {
        Some(out) => {
            let tex = out.with_extension("tex");
            let json = out.with_extension("json");
            fs::write(&tex, &r.table).map_err(|e| Error::Io {
                path: tex.clone(),
                source: e,
            })?;
            fs::write(&json, serde_json::to_string_pretty(&r.json)? + "\n").map_err(|e| {
                Error::Io {
                    path: json.clone(),
                    source: e,
                }
            })?;
            tracing::info!(table = %tex.display(), json = %json.display(), "report written");
        }
        None => print!("{}", r.table),
    }
    Ok(())
}

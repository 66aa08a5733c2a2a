//! The `zenith` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 configuration-invariant
//! violation, 3 runtime failure.

pub mod manifest;
pub mod sweep;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use thiserror::Error;
use zenith_core::checkpoint;
use zenith_core::config::RunConfig;
use zenith_core::evaluator::{evaluate_model, token_similarity_probe, EvalReport};
use zenith_core::featurizer::{generate_dataset, sidecar_path, write_dataset};
use zenith_core::model::{count_costs, Model, ModelConfig};
use zenith_core::trainer::{env_seed, train};

use manifest::RunManifest;
use sweep::{rows_to_csv, run_sweep, SweepConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Examples used for the token-similarity entries of evaluation reports.
const PROBE_ROWS: usize = 512;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] zenith_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(zenith_core::Error::Config(_)) => EXIT_CONFIG,
            CliError::Core(_) => EXIT_RUNTIME,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "zenith", version, about = "Tokenwise ranking models on synthetic click-through data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the configured synthetic dataset into a CSV plus JSON sidecar.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Destination CSV file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write its checkpoint, logs and test metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `train.total_steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint on the configured test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print closed-form parameter and FLOP counts as JSON.
    Count {
        #[arg(long, required_unless_present = "inline", conflicts_with = "inline")]
        config: Option<PathBuf>,
        /// Config JSON given directly: a full run config or a bare model section.
        #[arg(long)]
        inline: Option<String>,
        /// Optional output directory for `cost.json` and a manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Token similarity matrix of one layer of a checkpoint.
    ProbeSim {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// 1-based layer index.
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
        /// Test examples averaged over.
        #[arg(long, default_value_t = PROBE_ROWS)]
        rows: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a grid of models on one dataset and tabulate size against quality.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Runs trained concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `train.total_steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match run(cli.command, &mut std::io::stdout().lock()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// `--seed` wins over `ZENITH_SEED`.
fn resolve_seed(flag: Option<u64>) -> CliResult<Option<u64>> {
    Ok(match flag {
        Some(s) => Some(s),
        None => env_seed()?,
    })
}

fn load_config(path: &Path, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::from_path(path)?;
    if let Some(s) = seed {
        cfg.apply_seed(s);
    }
    Ok(cfg)
}

fn override_steps(train: &mut zenith_core::trainer::TrainConfig, steps: Option<usize>) {
    if let Some(n) = steps {
        train.total_steps = n;
        train.warmup_steps = train.warmup_steps.min(n);
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(zenith_core::Error::from)?;
    Ok(())
}

fn json_bytes(value: &impl serde::Serialize) -> CliResult<Vec<u8>> {
    Ok((serde_json::to_string_pretty(value).map_err(zenith_core::Error::from)? + "\n").into_bytes())
}

fn metrics_csv(report: &EvalReport, bayes_auc: f64) -> String {
    format!(
        "auc,uauc,logloss,n_examples,n_users_scored,n_users_skipped,bayes_auc\n{:?},{:?},{:?},{},{},{},{:?}\n",
        report.auc,
        report.uauc,
        report.logloss,
        report.n_examples,
        report.n_users_scored,
        report.n_users_skipped,
        bayes_auc
    )
}

/// Runs one parsed command, writing human-facing output to `stdout`.
pub fn run(command: Command, stdout: &mut impl Write) -> CliResult<()> {
    let io = |e: std::io::Error| CliError::Core(e.into());
    match command {
        Command::GenData { config, out, seed } => {
            let seed = resolve_seed(seed)?;
            let cfg = load_config(&config, seed)?;
            let data = cfg.data();
            let v = data.violations();
            if !v.is_empty() {
                return Err(zenith_core::Error::violations(v).into());
            }
            let dir = match out.parent() {
                Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
                _ => PathBuf::from("."),
            };
            let file = out.file_name().ok_or_else(|| CliError::Usage("--out must name a file".into()))?;
            create_dir(&dir)?;
            let stem = Path::new(file).file_stem().unwrap_or(file).to_string_lossy().into_owned();
            let mut manifest =
                RunManifest::begin("gen-data", Some(&config), &cfg, Some(data.seed), &dir, &format!("{stem}.manifest.json"))?;
            let csv = dir.join(file);
            let (rows, meta) = generate_dataset(&data.schema, &data.ground_truth, data.train_rows, data.seed)?;
            write_dataset(&rows, &meta, &csv)?;
            manifest.record(&csv)?;
            manifest.record(&sidecar_path(&csv))?;
            manifest.finish()?;
            writeln!(stdout, "wrote {} rows to {} (bayes auc {:.4})", meta.rows, csv.display(), meta.bayes_auc).map_err(io)?;
        }
        Command::Train { config, out, seed, steps } => {
            let seed = resolve_seed(seed)?;
            let mut cfg = load_config(&config, seed)?;
            let mut train_cfg = cfg.train()?.clone();
            override_steps(&mut train_cfg, steps);
            cfg.train = Some(train_cfg.clone());
            cfg.validate()?;
            let model_cfg = cfg.model()?.clone();
            create_dir(&out)?;
            let mut manifest = RunManifest::begin("train", Some(&config), &cfg, Some(train_cfg.seed), &out, "manifest.json")?;
            let split = cfg.data().load()?;
            let mut model = Model::build(&model_cfg, &split.schema)?;
            let report = train(&mut model, &split.train, &train_cfg)?;
            let ckpt = out.join("checkpoint.bin");
            checkpoint::save(&model, &ckpt)?;
            manifest.record(&ckpt)?;
            manifest.emit("train_log.csv", report.log_csv().as_bytes())?;
            if !report.router.is_empty() {
                manifest.emit("router_log.csv", report.router_csv().as_bytes())?;
            }
            let eval = evaluate_model(&model, &split.test, PROBE_ROWS)?;
            manifest.emit("eval.json", &json_bytes(&eval)?)?;
            manifest.emit("metrics.csv", metrics_csv(&eval, split.bayes_auc).as_bytes())?;
            manifest.finish()?;
            writeln!(
                stdout,
                "trained {} steps; test auc {:.4} uauc {:.4} logloss {:.4} (bayes auc {:.4})",
                report.steps_completed, eval.auc, eval.uauc, eval.logloss, split.bayes_auc
            )
            .map_err(io)?;
        }
        Command::Eval { config, checkpoint: ckpt, out, seed } => {
            let seed = resolve_seed(seed)?;
            let cfg = load_config(&config, seed)?;
            cfg.validate()?;
            let data = cfg.data();
            create_dir(&out)?;
            let mut manifest = RunManifest::begin("eval", Some(&config), &cfg, Some(data.seed), &out, "manifest.json")?;
            let model = checkpoint::load(&ckpt)?;
            let split = data.load()?;
            if model.schema() != &split.schema {
                return Err(zenith_core::Error::Config("checkpoint schema differs from the data schema".into()).into());
            }
            let eval = evaluate_model(&model, &split.test, PROBE_ROWS)?;
            manifest.emit("eval.json", &json_bytes(&eval)?)?;
            manifest.emit("metrics.csv", metrics_csv(&eval, split.bayes_auc).as_bytes())?;
            manifest.finish()?;
            writeln!(stdout, "auc {:.4} uauc {:.4} logloss {:.4}", eval.auc, eval.uauc, eval.logloss).map_err(io)?;
        }
        Command::Count { config, inline, out } => {
            let cfg = match (&config, &inline) {
                (Some(path), _) => RunConfig::from_path(path)?,
                (None, Some(text)) => parse_inline(text)?,
                (None, None) => return Err(CliError::Usage("count needs --config or --inline".into())),
            };
            cfg.validate()?;
            let report = count_costs(cfg.model()?, cfg.data.as_ref().map(|d| &d.schema))?;
            let bytes = json_bytes(&report)?;
            if let Some(dir) = out {
                create_dir(&dir)?;
                let mut manifest = RunManifest::begin("count", config.as_deref(), &cfg, None, &dir, "manifest.json")?;
                manifest.emit("cost.json", &bytes)?;
                manifest.finish()?;
            }
            stdout.write_all(&bytes).map_err(io)?;
        }
        Command::ProbeSim { config, checkpoint: ckpt, layer, out, rows, seed } => {
            let seed = resolve_seed(seed)?;
            let cfg = load_config(&config, seed)?;
            cfg.validate()?;
            let data = cfg.data();
            create_dir(&out)?;
            let mut manifest = RunManifest::begin("probe-sim", Some(&config), &cfg, Some(data.seed), &out, "manifest.json")?;
            let model = checkpoint::load(&ckpt)?;
            let split = data.load()?;
            let batch = split.test.range(0, rows.clamp(1, split.test.len()));
            let m = token_similarity_probe(&model, &batch, layer)?;
            manifest.emit(&format!("similarity_layer{layer}.csv"), m.to_csv().as_bytes())?;
            manifest.emit(&format!("similarity_layer{layer}.json"), &json_bytes(&m)?)?;
            manifest.finish()?;
            writeln!(stdout, "layer {layer}: mean off-diagonal |cos| {:.4}", m.mean_off_diagonal).map_err(io)?;
        }
        Command::Sweep { config, out, parallel, seed, steps } => {
            if parallel == 0 {
                return Err(CliError::Usage("--parallel must be at least 1".into()));
            }
            let seed = resolve_seed(seed)?;
            let text = fs::read_to_string(&config).map_err(io)?;
            let mut cfg = SweepConfig::from_json(&text)?;
            if let Some(s) = seed {
                cfg.apply_seed(s);
            }
            override_steps(&mut cfg.train, steps);
            let v = cfg.violations();
            if !v.is_empty() {
                return Err(zenith_core::Error::violations(v).into());
            }
            create_dir(&out)?;
            let mut manifest = RunManifest::begin("sweep", Some(&config), &cfg, Some(cfg.train.seed), &out, "manifest.json")?;
            let split = cfg.data.load()?;
            let rows = run_sweep(&cfg, &split, parallel);
            manifest.emit("sweep.csv", rows_to_csv(&rows).as_bytes())?;
            manifest.finish()?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            writeln!(stdout, "{} runs, {failed} failed", rows.len()).map_err(io)?;
        }
    }
    Ok(())
}

/// A full run config when the document has any of its section keys,
/// otherwise a bare model config.
fn parse_inline(text: &str) -> CliResult<RunConfig> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| zenith_core::Error::Config(format!("invalid --inline JSON: {e}")))?;
    let sectioned = value.as_object().is_some_and(|o| ["model", "train", "data"].iter().any(|k| o.contains_key(*k)));
    if sectioned {
        return Ok(RunConfig::from_json(text)?);
    }
    let model: ModelConfig = serde_json::from_value(value)
        .map_err(|e| zenith_core::Error::Config(format!("invalid --inline model config: {e}")))?;
    Ok(RunConfig { model: Some(model), ..RunConfig::default() })
}

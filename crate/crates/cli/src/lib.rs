//! Command-line driver for the scibilic pipeline.
//!
//! ```text
//! scibilic [--config run.json] [--seed N] [--out DIR] <command> [--section.field VALUE ...]
//! ```
//!
//! Commands: `synthesize`, `train`, `predict`, `evaluate` (alias `sweep`).
//! Exit status: 0 success, 2 config error, 3 data error, 4 training
//! diverged, 1 anything else.

pub mod commands;
pub mod config;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::Value;

pub use commands::{evaluate, predict, synthesize, train, EvalCase, EvalRun};
pub use config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Diverged,
    Other,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Other => 1,
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Diverged => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn new(kind: ErrorKind, error: anyhow::Error) -> Self {
        Self { kind, error }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl std::error::Error for CliError {}

/// Tags an error with the exit status it should produce.
pub trait ResultExt<T> {
    fn kind(self, kind: ErrorKind) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> ResultExt<T> for Result<T, E> {
    fn kind(self, kind: ErrorKind) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(kind, e.into()))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "scibilic",
    version,
    about = "Scibilic uncertainty for anomaly segmentation"
)]
#[command(
    after_help = "Any config field can be overridden with --<section>.<field> <value>, e.g. --train.epochs 5"
)]
pub struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `out_dir` in the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the phantom dataset into <out>/data.
    Synthesize,
    /// Train on <out>/data; writes <out>/checkpoint and <out>/loss_history.csv.
    Train,
    /// Write mean/epistemic/aleatoric/scibilic maps for one volume into <out>/predict.
    Predict {
        /// Input volume (SCIV).
        #[arg(long)]
        input: PathBuf,
        /// Checkpoint directory [default: <out>/checkpoint].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Insert anomalies into the validation phantoms and score the scibilic maps.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate with explicit threshold grids.
    Sweep {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated binarization thresholds.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        /// Comma-separated IoU thresholds.
        #[arg(long, value_delimiter = ',')]
        iou_thresholds: Option<Vec<f64>>,
    },
}

/// Parses `args` (without the program name), resolves the configuration and
/// runs the command.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> Result<(), CliError> {
    let (rest, mut overrides) =
        config::extract_overrides(args.into_iter().collect()).kind(ErrorKind::Config)?;
    let cli = match Cli::try_parse_from(std::iter::once("scibilic".to_string()).chain(rest)) {
        Ok(cli) => cli,
        // --help and --version
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return Ok(());
        }
        Err(e) => return Err(CliError::new(ErrorKind::Config, e.into())),
    };
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), Value::from(seed)));
    }
    if let Some(out) = &cli.out {
        overrides.push((
            "out_dir".into(),
            Value::from(out.to_string_lossy().into_owned()),
        ));
    }
    if let Command::Sweep {
        thresholds,
        iou_thresholds,
        ..
    } = &cli.command
    {
        if let Some(t) = thresholds {
            overrides.push(("eval.thresholds".into(), Value::from(t.clone())));
        }
        if let Some(t) = iou_thresholds {
            overrides.push(("eval.iou_thresholds".into(), Value::from(t.clone())));
        }
    }
    let config = RunConfig::load(cli.config.as_deref(), &overrides).kind(ErrorKind::Config)?;
    let default_checkpoint = config.out_dir.join(commands::CHECKPOINT_DIR);

    match cli.command {
        Command::Synthesize => {
            let m = synthesize(&config)?;
            println!(
                "wrote {} phantoms to {}",
                m.samples.len(),
                config.out_dir.join(commands::DATA_DIR).display()
            );
        }
        Command::Train => {
            let t = train(&config)?;
            if let Some(last) = t.history.last() {
                println!(
                    "trained {} epochs; last train loss {:.5}; checkpoint {}",
                    t.history.len(),
                    last.train_loss,
                    t.checkpoint.display()
                );
            }
        }
        Command::Predict { input, checkpoint } => {
            predict(
                &config,
                checkpoint.as_deref().unwrap_or(&default_checkpoint),
                &input,
            )?;
            println!(
                "wrote maps to {}",
                config.out_dir.join(commands::PREDICT_DIR).display()
            );
        }
        Command::Evaluate { checkpoint } | Command::Sweep { checkpoint, .. } => {
            let r = evaluate(
                &config,
                checkpoint.as_deref().unwrap_or(&default_checkpoint),
            )?;
            print!("{}", r.summary);
        }
    }
    Ok(())
}

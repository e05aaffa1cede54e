//! Command-line surface: `train`, `eval`, `infer`, `bench` and `inspect`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod train;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::data::netpbm::NetpbmError;
use crate::data::DataError;
use crate::error::TensorError;
use crate::network::WidthPreset;

pub use checkpoint::{Checkpoint, CheckpointError, LoadReport};
pub use config::RunConfig;
pub use train::Trainer;

pub const THREADS_VAR: &str = "UNETFORMER_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("model: {0}")]
    Model(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 0 success, 1 usage/config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Data(_) | CliError::Checkpoint(_) | CliError::Io(_) => 2,
            CliError::Numeric(_) | CliError::Model(TensorError::NonFinite { .. }) => 3,
            CliError::Model(_) => 1,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Tensor(t @ TensorError::NonFinite { .. }) => CliError::Model(t),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<NetpbmError> for CliError {
    fn from(e: NetpbmError) -> Self {
        CliError::Data(e.to_string())
    }
}

/// Worker cap from `UNETFORMER_THREADS` (default 1).
pub fn threads() -> Result<usize, CliError> {
    match std::env::var(THREADS_VAR) {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Config(format!(
                "{THREADS_VAR} must be a positive integer, got {v:?}"
            ))),
        },
        Err(e) => Err(CliError::Config(format!("{THREADS_VAR}: {e}"))),
    }
}

/// `HxW`, e.g. `512x512`.
pub fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let p = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| format!("bad dimension {v:?} in {s:?}"))
    };
    let (h, w) = (p(h)?, p(w)?);
    if h == 0 || w == 0 {
        return Err(format!("size {s:?} must be positive"));
    }
    Ok((h, w))
}

#[derive(Debug, Parser)]
#[command(
    name = "unetformer",
    version,
    about = "UNetFormer segmentation: train, evaluate, infer, benchmark, inspect"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Common {
    pub fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes train_log.jsonl, last.ckpt and best.ckpt.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides the configured output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Continue from last.ckpt in the output directory.
        #[arg(long)]
        resume: bool,
        /// Initial weights (e.g. an encoder-only file, with --partial).
        #[arg(long)]
        init_weights: Option<PathBuf>,
        /// Skip tensors the model does not have instead of failing.
        #[arg(long)]
        partial: bool,
    },
    /// Score a checkpoint on the configured dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Weights to evaluate; a freshly initialized model when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        partial: bool,
        /// Average logits over the four flips.
        #[arg(long)]
        tta: bool,
        /// Leave a class index out of the mean scores (repeatable).
        #[arg(long = "exclude-class")]
        exclude_class: Vec<usize>,
        /// Report file; defaults to eval.json in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Accepted for symmetry; the report is always JSON.
        #[arg(long)]
        json: bool,
    },
    /// Segment one PPM image into a PGM label map.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        partial: bool,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Palette-colored PPM rendering of the mask.
        #[arg(long)]
        color: Option<PathBuf>,
        #[arg(long)]
        tta: bool,
    },
    /// Time eval-mode forward passes on random input.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_size, default_value = "512x512")]
        size: (usize, usize),
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        /// Overrides the configured width preset.
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        #[arg(long)]
        json: bool,
    },
    /// Per-layer parameter and MAC table.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_size, default_value = "512x512")]
        size: (usize, usize),
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        /// Overrides the configured class count.
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum PresetArg {
    Full,
    Tiny,
}

impl From<PresetArg> for WidthPreset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Full => WidthPreset::Full,
            PresetArg::Tiny => WidthPreset::Tiny,
        }
    }
}

/// Parses `args` (program name first) and runs the command, writing normal
/// output to `out` and diagnostics to `err`. Returns the exit code.
pub fn main_with<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match commands::run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

//! Operator surface for the discon pipeline: argument parsing, config
//! resolution, run directories and manifests.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime
//! failure.

pub mod commands;
pub mod config;
pub mod plot;
pub mod run;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub use commands::execute;
pub use config::Config;
pub use run::{Inputs, RunManifest};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0:#}")]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "discon", version, about = "Discrete-conditioned continuous AR generation on synthetic mixtures")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config with sections data, tokenizer, prior, discon, train, sample, eval.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.seed=3`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (manifest.json, metrics.csv, checkpoints/, plots/).
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Replay the command, config and inputs recorded in a manifest.
    #[arg(long, conflicts_with_all = ["config", "set"])]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PlotKind {
    Scatter,
    Curve,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Draw train/val/test splits from the configured mixture.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the codebook and normalizer on a training split.
    FitTokenizer {
        #[command(flatten)]
        common: Common,
        /// Directory of split files (`<gen-data run>/data`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the discrete prior.
    TrainPrior {
        #[command(flatten)]
        common: Common,
        /// Directory of split files (`<gen-data run>/data`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Tokenizer checkpoint from fit-tokenizer.
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        /// Checkpoint of the same model kind to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the continuous model and its diffusion head.
    TrainDiscon {
        #[command(flatten)]
        common: Common,
        /// Directory of split files (`<gen-data run>/data`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Tokenizer checkpoint from fit-tokenizer.
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        /// Checkpoint of the same model kind to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate one class worth of sequences.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Directory of split files (`<gen-data run>/data`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint from train-discon.
        #[arg(long)]
        discon: Option<PathBuf>,
        /// Prior checkpoint; required when conditioning on prior samples.
        #[arg(long)]
        prior: Option<PathBuf>,
    },
    /// Score generations over the configured S x tau grid.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory of split files (`<gen-data run>/data`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint from train-discon.
        #[arg(long)]
        discon: Option<PathBuf>,
        /// Prior checkpoint; required when conditioning on prior samples.
        #[arg(long)]
        prior: Option<PathBuf>,
    },
    /// Compare several trained runs (`--discon id=path`, repeatable).
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Directory of split files (`<gen-data run>/data`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Named train-discon checkpoint, repeatable.
        #[arg(long, value_name = "ID=PATH")]
        discon: Vec<String>,
        /// Prior checkpoint; required when conditioning on prior samples.
        #[arg(long)]
        prior: Option<PathBuf>,
    },
    /// Finite-difference check of every op and model loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Render a run's samples or metrics.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: Option<PlotKind>,
        /// Run directory holding samples.csv (scatter) or metrics.csv (curve).
        #[arg(long)]
        from: Option<PathBuf>,
    },
}

fn parse_discon_list(items: &[String]) -> Result<Vec<(String, PathBuf)>, CliError> {
    items
        .iter()
        .map(|s| match s.split_once('=') {
            Some((id, p)) if !id.is_empty() && !p.is_empty() => Ok((id.to_string(), PathBuf::from(p))),
            _ => Err(CliError::Usage(format!("--discon expects id=path, got `{s}`"))),
        })
        .collect()
}

fn split(cmd: Cmd) -> Result<(&'static str, Common, Inputs), CliError> {
    let single = |p: Option<PathBuf>| p.map(|p| vec![("discon".to_string(), p)]).unwrap_or_default();
    Ok(match cmd {
        Cmd::GenData { common } => ("gen-data", common, Inputs::default()),
        Cmd::FitTokenizer { common, data } => ("fit-tokenizer", common, Inputs { data, ..Inputs::default() }),
        Cmd::TrainPrior { common, data, tokenizer, resume } => {
            ("train-prior", common, Inputs { data, tokenizer, resume, ..Inputs::default() })
        }
        Cmd::TrainDiscon { common, data, tokenizer, resume } => {
            ("train-discon", common, Inputs { data, tokenizer, resume, ..Inputs::default() })
        }
        Cmd::Sample { common, data, discon, prior } => {
            ("sample", common, Inputs { data, prior, discon: single(discon), ..Inputs::default() })
        }
        Cmd::Eval { common, data, discon, prior } => {
            ("eval", common, Inputs { data, prior, discon: single(discon), ..Inputs::default() })
        }
        Cmd::Ablate { common, data, discon, prior } => {
            let discon = parse_discon_list(&discon)?;
            ("ablate", common, Inputs { data, prior, discon, ..Inputs::default() })
        }
        Cmd::Gradcheck { common } => ("gradcheck", common, Inputs::default()),
        Cmd::Plot { common, kind, from } => {
            let kind = kind.map(|k| format!("{k:?}").to_lowercase());
            ("plot", common, Inputs { from, kind, ..Inputs::default() })
        }
    })
}

/// Hashes every file named by `inputs`, keyed by path. A data directory
/// contributes each split file it contains.
pub fn hash_inputs(inputs: &Inputs) -> BTreeMap<String, String> {
    let mut files: Vec<PathBuf> = Vec::new();
    if let Some(d) = &inputs.data {
        files.extend(commands::SPLITS.iter().map(|s| commands::split_path(d, s)).filter(|p| p.exists()));
    }
    files.extend(inputs.tokenizer.iter().cloned());
    files.extend(inputs.prior.iter().cloned());
    files.extend(inputs.discon.iter().map(|(_, p)| p.clone()));
    files.extend(inputs.resume.iter().cloned());
    if let Some(f) = &inputs.from {
        files.extend(
            [plot::SAMPLES_FILE, run::METRICS]
                .iter()
                .map(|n| f.join(n))
                .filter(|p| p.exists()),
        );
    }
    let mut out = BTreeMap::new();
    for p in files {
        // A missing file is reported by the command itself, with context.
        if let Ok(h) = discon::pipeline::checkpoint::hash_file(&p) {
            out.insert(p.display().to_string(), h);
        }
    }
    out
}

/// Replays a manifest into `run_dir` after checking its inputs are
/// unchanged.
pub fn rerun_manifest(manifest: &Path, run_dir: &Path) -> Result<RunManifest, CliError> {
    let m = run::read_manifest(manifest)?;
    m.config.validate()?;
    let now = hash_inputs(&m.inputs);
    if now != m.input_hashes {
        return Err(CliError::Validation(format!(
            "inputs of {} changed since it was written",
            manifest.display()
        )));
    }
    execute(&m.command, &m.config, &m.inputs, Some(run_dir))
}

/// Parses `argv` (program name first), runs the command, and returns the
/// process exit code. Errors are reported on stderr.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match run_cli(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("run `discon --help` for usage");
            }
            e.exit_code()
        }
    }
}

fn run_cli(cli: Cli) -> Result<(), CliError> {
    let (name, common, inputs) = split(cli.cmd)?;
    let run_dir = common.run_dir.as_deref();
    match &common.manifest {
        Some(path) => {
            let m = run::read_manifest(path)?;
            if m.command != name {
                return Err(CliError::Validation(format!(
                    "manifest {} records `{}`, not `{name}`",
                    path.display(),
                    m.command
                )));
            }
            let dir = run_dir.ok_or_else(|| CliError::Usage("--run-dir is required".into()))?;
            rerun_manifest(path, dir)?;
        }
        None => {
            let cfg = Config::resolve(common.config.as_deref(), &common.set)?;
            execute(name, &cfg, &inputs, run_dir)?;
        }
    }
    Ok(())
}

//! `voxbox`: preprocess, train, evaluate and predict with sub-cube training.
//!
//! Configuration precedence, lowest to highest: built-in defaults, the
//! `--config` file, the `VOXBOX_SEED` environment variable, command-line flags.

mod commands;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use voxbox::train::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "voxbox",
    version,
    about = "Volumetric segmentation from a frozen 2D encoder, trained on sub-cubes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by the subcommands that take a run configuration.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Run configuration (JSON with model, preprocess and train sections).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Output directory; created if missing.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,

    /// Sub-cubes per volume (1, 8, 27, ...).
    #[arg(long, value_name = "N")]
    pub cubes: Option<usize>,

    /// Disable the learned depth embedding.
    #[arg(long)]
    pub no_depth_embedding: bool,

    /// Decode from the deepest feature level only.
    #[arg(long)]
    pub single_scale: bool,

    /// Training seed.
    #[arg(long, env = "VOXBOX_SEED", value_name = "SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Reorient, resample, normalize and crop a dataset of images/ and labels/.
    Preprocess {
        #[command(flatten)]
        run: RunArgs,
        /// Raw dataset directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Train on a preprocessed dataset and keep the best checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Preprocessed dataset directory; overrides `train.data_dir`.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: JSON report and overlay images.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Preprocessed dataset directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Segment one raw volume and write the mask as NIfTI.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
    },
    /// Gradient-equivalence and memory-bound checks; exit 0 iff all pass.
    Selftest {
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] voxbox::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{failed} of {total} self-test checks failed")]
    Selftest { failed: usize, total: usize },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(voxbox::Error::NonFinite(_)) => 3,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn require_exists(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

impl RunArgs {
    /// Defaults, then the config file, then seed and flag overrides.
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                require_exists(p, "config file")?;
                RunConfig::load(p)?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(c) = self.cubes {
            cfg.train.cubes = c;
        }
        if self.no_depth_embedding {
            cfg.model.depth_embedding = false;
        }
        if self.single_scale {
            cfg.model.decoder.multi_scale = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, CliError::Usage(_)) {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(argv: &[&str]) -> RunArgs {
        let mut full = vec!["voxbox", "train"];
        full.extend(argv);
        match Cli::try_parse_from(full).unwrap().command {
            Command::Train { run, .. } => run,
            _ => unreachable!(),
        }
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"train": {"cubes": 1, "seed": 5}}"#).unwrap();
        let p = path.to_str().unwrap();

        let cfg = run_args(&["--out", "o", "--config", p]).resolve().unwrap();
        assert_eq!(cfg.train.cubes, 1);
        assert!(cfg.model.depth_embedding && cfg.model.decoder.multi_scale);

        let cfg = run_args(&[
            "--out",
            "o",
            "--config",
            p,
            "--cubes",
            "8",
            "--seed",
            "11",
            "--no-depth-embedding",
            "--single-scale",
        ])
        .resolve()
        .unwrap();
        assert_eq!(cfg.train.cubes, 8);
        assert_eq!(cfg.train.seed, 11);
        assert!(!cfg.model.depth_embedding);
        assert!(!cfg.model.decoder.multi_scale);
    }

    #[test]
    fn bad_inputs_are_usage_errors() {
        let e = run_args(&["--out", "o", "--config", "/nonexistent/run.json"])
            .resolve()
            .unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = run_args(&["--out", "o", "--cubes", "7"]).resolve().unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(Cli::try_parse_from(["voxbox", "train", "--out", "o", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["voxbox", "train"]).is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}

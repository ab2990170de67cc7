//! Command-line driver: `gen-data`, `train`, `eval`, `gradcheck`, `golden`.
//!
//! Every subcommand reads the same key/value config (`--config FILE`, then
//! `--set key=value` overrides in order). Exit codes: 0 success,
//! 1 invalid input or config mismatch, 2 numerical failure, 3 IO error.

pub mod commands;
pub mod config;
pub mod error;
pub mod golden;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "trfs", version, about = "Few-shot segmentation on synthetic shapes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Key/value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write training pools and test episodes for the selected folds.
    GenData(ConfigArgs),
    /// Train one model per selected fold and write checkpoints.
    Train(ConfigArgs),
    /// Evaluate checkpoints on seeded test episodes and write the report.
    Eval(ConfigArgs),
    /// Finite-difference check of every parameter group.
    Gradcheck(ConfigArgs),
    /// Write the conformance kit.
    Golden {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; defaults to `<output_dir>/golden`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let io = |e| error::CliError::io("<stdout>", e);
    match &cli.command {
        Command::GenData(a) => {
            let cfg = a.resolve()?;
            let dir = commands::gen_data(&cfg)?;
            writeln!(out, "wrote {}", dir.display()).map_err(io)?;
        }
        Command::Train(a) => {
            let cfg = a.resolve()?;
            let every = (cfg.total_steps / 10).max(1);
            let mut progress = |fold: usize, s: &trfs_core::train::StepLog| {
                if s.step.is_multiple_of(every) || s.step + 1 == cfg.total_steps {
                    eprintln!("fold {fold} step {} total {:.4} lr {:.3e}", s.step, s.loss.total, s.lr);
                }
            };
            for t in commands::train(&cfg, &mut progress)? {
                writeln!(out, "fold {} -> {}", t.fold, t.checkpoint.display()).map_err(io)?;
            }
        }
        Command::Eval(a) => {
            let cfg = a.resolve()?;
            let report = commands::eval(&cfg)?;
            write!(out, "{report}").map_err(io)?;
        }
        Command::Gradcheck(a) => {
            let cfg = a.resolve()?;
            let reports = commands::gradcheck(&cfg)?;
            commands::gradcheck_table(&reports, &mut *out).map_err(io)?;
            commands::gradcheck_verdict(&reports)?;
        }
        Command::Golden { config, out: dir } => {
            let cfg = config.resolve()?;
            let dir = dir.clone().unwrap_or_else(|| cfg.output_dir.join("golden"));
            let dir = golden::golden(&cfg, &dir)?;
            writeln!(out, "wrote {}", dir.display()).map_err(io)?;
        }
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Errors are reported on stderr.
pub fn run_args<I, S>(args: I, out: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

//! Command-line front end for the `tsvr` tool.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use tsvr_core::data::MatrixFormat;
use tsvr_core::AlignmentMode;

pub use commands::CheckFailed;
pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "tsvr", version, about = "Transductive zero-shot recognition with domain-specific normalization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FormatArg {
    Mtxb,
    Csv,
}

impl From<FormatArg> for MatrixFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Mtxb => MatrixFormat::Mtxb,
            FormatArg::Csv => MatrixFormat::Csv,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth {
        /// JSON file with generator settings; built-in defaults otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "mtxb")]
        format: FormatArg,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `key=value`, repeatable. Values are JSON.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint up to `max_iterations`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score the target domain with a trained checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        no_label_prop: bool,
        /// Output directory; `<output_dir>/eval` by default.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write both hidden layers for each domain here.
        #[arg(long, value_name = "DIR")]
        dump_hidden: Option<PathBuf>,
    },
    /// Train and evaluate each alignment mode over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Comma-separated list of modes.
        #[arg(long, default_value = "dsbn,none,singlebn,mmd,dann")]
        modes: String,
        /// Number of consecutive seeds, starting at the configured one.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of every component.
    Gradcheck {
        /// First seed; twenty consecutive seeds are checked.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20, hide = true)]
        num_seeds: usize,
        /// Scale one component's analytic gradient by a factor.
        #[arg(long, value_name = "COMPONENT[=SCALE]", hide = true)]
        inject_fault: Option<String>,
    },
}

fn load_config(path: &std::path::Path, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    for o in overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth { spec, out, seed, format } => {
            commands::synth(spec.as_deref(), &out, seed, format.into())?;
        }
        Command::Train {
            config,
            overrides,
            resume,
        } => {
            let cfg = load_config(&config, &overrides)?;
            commands::train(&cfg, resume.as_deref())?;
        }
        Command::Eval {
            checkpoint,
            config,
            overrides,
            no_label_prop,
            out,
            dump_hidden,
        } => {
            let mut cfg = load_config(&config, &overrides)?;
            if no_label_prop {
                cfg.label_propagation.enabled = false;
            }
            let out = out.unwrap_or_else(|| cfg.output_dir.join("eval"));
            commands::eval(&cfg, &checkpoint, &out, dump_hidden.as_deref())?;
        }
        Command::Ablate {
            config,
            overrides,
            modes,
            seeds,
            out,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let modes: Vec<AlignmentMode> = commands::parse_modes(&modes)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("ablation"));
            commands::ablate(&cfg, &modes, seeds, &out)?;
        }
        Command::Gradcheck {
            seed,
            num_seeds,
            inject_fault,
        } => {
            let fault = inject_fault.as_deref().map(commands::parse_fault).transpose()?;
            commands::gradcheck(seed, num_seeds, fault)?;
        }
    }
    Ok(())
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return EXIT_CHECK_FAILED;
    }
    let numeric = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<tsvr_core::Error>(),
            Some(tsvr_core::Error::NumericAbort { .. })
        )
    });
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_INPUT
    }
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let check: anyhow::Error = CheckFailed("x".into()).into();
        assert_eq!(exit_code(&check), EXIT_CHECK_FAILED);
        let abort: anyhow::Error = tsvr_core::Error::NumericAbort {
            iteration: 3,
            term: "L_pre".into(),
        }
        .into();
        assert_eq!(exit_code(&abort.context("training")), EXIT_NUMERIC);
        assert_eq!(exit_code(&anyhow::anyhow!("bad file")), EXIT_INPUT);
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        assert_eq!(run(["tsvr", "frobnicate"]), EXIT_INPUT);
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cnsphere::cli::{self, AnalysisSpec, RunConfig};
use cnsphere::{Error, Result};

#[derive(Parser)]
#[command(
    name = "cnsphere",
    about = "Cournot-Nash equilibria on the round sphere: solve, verify, report",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    /// Run the built-in scenario suite.
    #[arg(long)]
    suite: bool,
    /// Output directory (overrides the config's output_dir; default "out").
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the config's sampling seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Skip every post-solve analysis.
    #[arg(long, global = true)]
    no_analysis: bool,
    /// Print timing and iteration detail.
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a single JSON-configured scenario.
    Solve {
        /// Path to the config file.
        config: PathBuf,
    },
}

fn apply_overrides(mut config: RunConfig, args: &Cli) -> RunConfig {
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.no_analysis {
        config.analysis = AnalysisSpec::disabled();
    }
    config
}

fn out_dir(args: &Cli, config: Option<&RunConfig>) -> PathBuf {
    args.out
        .clone()
        .or_else(|| config.and_then(|c| c.output_dir.as_ref().map(PathBuf::from)))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn execute(args: &Cli) -> Result<()> {
    match (&args.command, args.suite) {
        (Some(_), true) => Err(Error::Config(
            "pass either `solve <config.json>` or --suite, not both".into(),
        )),
        (None, true) => cli::run_suite(&out_dir(args, None), args.verbose),
        (Some(Command::Solve { config }), false) => {
            let config = apply_overrides(cli::load_config(config)?, args);
            let dir = out_dir(args, Some(&config));
            let bundle = cli::run(&config, &dir)?;
            println!(
                "{}: residual {:.2e}, lambda {:.4}, margin {:.3}",
                config.name, bundle.residual, bundle.lambda, bundle.condition.margin
            );
            if let Some(warning) = &bundle.warning {
                println!("  warning: {warning}");
            }
            if args.verbose {
                let json = serde_json::to_string_pretty(&bundle)
                    .map_err(|e| Error::Config(format!("cannot serialize result: {e}")))?;
                println!("{json}");
            }
            println!("  artifacts in {}", dir.display());
            Ok(())
        }
        (None, false) => Err(Error::Config(
            "nothing to do: pass `solve <config.json>` or --suite".into(),
        )),
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match execute(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(cli::exit_code(&err) as u8)
        }
    }
}

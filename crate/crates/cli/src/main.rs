use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use weakal::report;
use weakal::Error;

/// Budgeted active learning with fine human labels and coarse weak labels.
#[derive(Parser)]
#[command(name = "weakal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write tables, audit logs and the chart.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "weakal-out")]
        out: PathBuf,
        /// Replace a config key, e.g. `seeds=1,2` or `costs.c_weak=1/20`.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Repeat an experiment for several weak-label costs.
    SweepCost {
        config: PathBuf,
        /// Comma-separated `p/q` costs.
        #[arg(long, default_value = "1/20,1/50,1/100")]
        values: String,
        #[arg(long, default_value = "weakal-sweep")]
        out: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Check a config and print it with all defaults filled in.
    Validate { config: PathBuf },
    /// Generate a synthetic dataset as feature CSVs.
    GenData {
        synth_config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Parse { .. } => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> weakal::Result<()> {
    match cli.command {
        Command::Run { config, out, overrides } => {
            let manifest = report::cmd_run(&config, &out, &overrides)?;
            println!("wrote {} files to {} (config {})", manifest.files.len(), out.display(), &manifest.config_hash[..12]);
        }
        Command::SweepCost {
            config,
            values,
            out,
            overrides,
        } => {
            let values = report::parse_cost_list(&values)?;
            let files = report::cmd_sweep(&config, &values, &out, &overrides)?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
        Command::Validate { config } => {
            let cfg = report::parse_config(&config)?;
            print!("{}", report::emit_config(&cfg)?);
            eprintln!("ok: config hash {}", report::config_hash(&cfg)?);
        }
        Command::GenData { synth_config, out } => {
            for path in report::cmd_gen_data(&synth_config, &out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = serde_json::json!({ "error": err.kind(), "message": err.to_string() });
            eprintln!("{line}");
            ExitCode::from(exit_code(&err))
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use esrp_harness::{emit_report, load_report, render_summary, run_experiment, write_csv, ExperimentSpec};

#[derive(Parser)]
#[command(name = "esrp", version, about = "Resilient PCG failure-injection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a key = value config file.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config's `out`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit nonzero if any run failed.
        #[arg(long)]
        strict: bool,
    },
    /// Re-aggregate a JSON report and print its summary.
    Report {
        json: PathBuf,
        /// Also rewrite the per-run CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> esrp_harness::Result<ExitCode> {
    match cli.command {
        Command::Run { config, out, strict } => {
            let spec = ExperimentSpec::load(&config)?;
            let report = run_experiment(&spec)?;
            print!("{}", render_summary(&report));
            let dir = out.or_else(|| spec.out.clone()).unwrap_or_else(|| PathBuf::from("results"));
            let (json, csv) = emit_report(&report, &dir)?;
            println!("wrote {} and {}", json.display(), csv.display());
            for r in report.runs.iter().filter(|r| r.error.is_some()) {
                eprintln!(
                    "{} run {} failed: {}",
                    r.scenario.label(),
                    r.repetition,
                    r.error.as_deref().unwrap_or_default()
                );
            }
            if strict && report.failed_runs() > 0 {
                return Ok(ExitCode::from(1));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { json, csv } => {
            let mut report = load_report(&json)?;
            report.reaggregate();
            print!("{}", render_summary(&report));
            if let Some(path) = csv {
                write_csv(&report.runs, &path)?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

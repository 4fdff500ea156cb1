use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tcaff::harness::{
    read_records_csv, run_baselines, run_scenario, timing_report, write_run, Baseline, HarnessError,
    MetricsReport, RunOptions, Scenario,
};

#[derive(Parser)]
#[command(name = "tcaff", version, about = "Multi-robot frame alignment from object maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write run.csv, metrics.json and maps/.
    Run {
        /// Scenario file or built-in name.
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override a scenario field, e.g. `filter.window=6`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Skip the per-step map dumps.
        #[arg(long)]
        no_maps: bool,
    },
    /// Score single-solution baselines; prints one metrics object per line.
    Baseline {
        scenario: String,
        /// Comma-separated minimum-association thresholds.
        #[arg(long, value_delimiter = ',')]
        min_assoc: Vec<usize>,
        /// Also score the densest multiple-near-optima measurement.
        #[arg(long)]
        mno_only: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Per-call wall time of mapping, association and filtering.
    Timing {
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Recompute metrics from a run.csv.
    Metrics { csv: PathBuf },
}

fn load(spec: &str, seed: Option<u64>, set: &[String]) -> Result<Scenario, HarnessError> {
    let s = Scenario::load(spec, set)?;
    Ok(match seed {
        Some(seed) => s.with_seed(seed),
        None => s,
    })
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::Run {
            scenario,
            seed,
            out,
            set,
            no_maps,
        } => {
            let s = load(&scenario, seed, &set)?;
            let output = run_scenario(&s, RunOptions { keep_maps: !no_maps })?;
            write_run(&out, &output)?;
            writeln!(stdout, "{}", serde_json::to_string_pretty(&output.report.overall)?)?;
        }
        Command::Baseline {
            scenario,
            min_assoc,
            mno_only,
            seed,
            set,
        } => {
            let s = load(&scenario, seed, &set)?;
            let mut baselines: Vec<Baseline> =
                min_assoc.into_iter().map(Baseline::ClipperThreshold).collect();
            if mno_only {
                baselines.push(Baseline::MnoOnly);
            }
            if baselines.is_empty() {
                return Err(HarnessError::Scenario(
                    "give --min-assoc thresholds and/or --mno-only".into(),
                ));
            }
            for r in run_baselines(&s, &baselines)? {
                writeln!(stdout, "{}", serde_json::to_string(&r)?)?;
            }
        }
        Command::Timing { scenario, seed, set } => {
            let s = load(&scenario, seed, &set)?;
            write!(stdout, "{}", timing_report(&s)?.to_table())?;
        }
        Command::Metrics { csv } => {
            let records = read_records_csv(fs::File::open(csv)?)?;
            let report = MetricsReport::from_records(&records);
            writeln!(stdout, "{}", serde_json::to_string_pretty(&report)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        // a closed pipe (e.g. `| head`) is the reader's choice, not a failure
        Err(HarnessError::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

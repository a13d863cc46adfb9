// Licensed under the Apache-2.0 license

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wisecr::scenario::{
    attest_bench, replay_transcript, run_scenario, summarize, write_csv, Overrides, Scenario,
};
use wisecr::server::PilotStrategy;

#[derive(Parser)]
#[command(name = "wisecr", version, about = "Secure broadcast firmware update simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write one CSV row per repetition.
    Run {
        scenario: PathBuf,
        /// CSV output; stdout when absent.
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        reps: Option<u32>,
        /// Update tokens one at a time.
        #[arg(long)]
        sequential: bool,
        /// lowest_vt, highest_vt, lowest_read_rate, highest_read_rate,
        /// lowest_rssi, highest_rssi or random[:seed].
        #[arg(long)]
        strategy: Option<PilotStrategy>,
        /// Drop values beyond 1.5 IQR from the summary statistics.
        #[arg(long)]
        filter_outliers: bool,
        /// Write each repetition's transcript as `<seed>.jsonl` here.
        #[arg(long)]
        transcripts: Option<PathBuf>,
    },
    /// Time fast and elaborate attestation over several image sizes.
    AttestBench {
        scenario: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [115usize, 407, 1280])]
        sizes: Vec<usize>,
    },
    /// Print a recorded transcript with protocol stages.
    Replay { transcript: PathBuf },
}

fn sink(path: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(cmd: Cmd) -> Result<(), Box<dyn std::error::Error>> {
    match cmd {
        Cmd::Run {
            scenario,
            output,
            seed,
            reps,
            sequential,
            strategy,
            filter_outliers,
            transcripts,
        } => {
            let mut sc = Scenario::load(&scenario)?;
            Overrides {
                seed,
                repetitions: reps,
                sequential,
                strategy,
            }
            .apply(&mut sc);
            if let Some(dir) = &transcripts {
                std::fs::create_dir_all(dir)?;
            }
            let rows = run_scenario(&sc, |out| match &transcripts {
                Some(dir) => {
                    let f = File::create(dir.join(format!("{}.jsonl", out.seed)))?;
                    out.transcript.write_jsonl(BufWriter::new(f))
                }
                None => Ok(()),
            })?;
            write_csv(&rows, sink(&output)?)?;
            let s = summarize(&sc.name, &rows, filter_outliers);
            eprintln!("{}", serde_json::to_string_pretty(&s)?);
        }
        Cmd::AttestBench {
            scenario,
            output,
            sizes,
        } => {
            let sc = Scenario::load(&scenario)?;
            let rows = attest_bench(&sc, &sizes)?;
            let mut w = csv::Writer::from_writer(sink(&output)?);
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        Cmd::Replay { transcript } => {
            print!("{}", replay_transcript(&transcript)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

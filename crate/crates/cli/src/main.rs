use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use tractor_nmpc::harness::{compute_metrics, read_log, run_experiment, ExperimentConfig};
use tractor_nmpc::path::build_eight_track;
use tractor_nmpc::plant::DropoutSchedule;
use tractor_nmpc::selftest::run_selftest;

#[derive(Parser)]
#[command(name = "ttnmpc", version, about = "Tractor-trailer NMPC/NMHE closed-loop simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one closed-loop experiment and write its log and metrics.
    Run {
        /// Experiment config (TOML). Defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Simulated time in seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// CSV of GPS outages (t_start_s,t_end_s); replaces random dropouts.
        #[arg(long)]
        dropout_schedule: Option<PathBuf>,
    },
    /// Summarize an experiment log.
    Metrics {
        #[arg(long)]
        log: PathBuf,
        /// Seconds excluded from the segment means.
        #[arg(long, default_value_t = 10.0)]
        transient: f64,
    },
    /// Check the solvers against their reference implementations.
    Selftest,
    /// Write the figure-eight track samples as CSV.
    Track {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        straight_len: f64,
        #[arg(long, default_value_t = 10.0)]
        radius: f64,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Run {
            config,
            out,
            seed,
            duration,
            dropout_schedule,
        } => {
            let mut cfg = match &config {
                Some(p) => ExperimentConfig::from_file(p)
                    .with_context(|| format!("loading config {}", p.display()))?,
                None => ExperimentConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(d) = duration {
                cfg.duration_s = d;
            }
            if let Some(p) = dropout_schedule {
                let sched = DropoutSchedule::from_csv(&p)
                    .with_context(|| format!("loading dropout schedule {}", p.display()))?;
                cfg.sensor.dropout_schedule = Some(sched);
            }
            let report = run_experiment(&cfg, &out)?;
            println!("{report}");
            println!("wrote {}", out.display());
        }
        Cmd::Metrics { log, transient } => {
            let file = File::open(&log).with_context(|| format!("opening {}", log.display()))?;
            let rows = read_log(file)?;
            println!("{}", compute_metrics(&rows, transient)?);
        }
        Cmd::Selftest => {
            let results = run_selftest();
            let mut ok = true;
            for r in &results {
                println!("{} {:<28} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                ok &= r.passed;
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::Track {
            out,
            straight_len,
            radius,
        } => {
            let path = build_eight_track(straight_len, radius)?;
            path.write_csv(File::create(&out)?)?;
            println!("{} samples, length {:.3} m", path.samples().len(), path.total_length());
        }
    }
    Ok(ExitCode::SUCCESS)
}

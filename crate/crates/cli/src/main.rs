mod config;

use std::fs::{self, File};
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use cotrain_bridge::BridgeConfig;
use cotrain_core::harness::{
    aggregate, compare, run_experiment, trial_log_name, write_summary_csv, ExperimentConfig, FeedbackConfig, Summary,
    TrialResult, INTERACTIVE_STEP,
};

use crate::config::{with_replay, ExperimentArgs};

#[derive(Parser, Debug)]
#[command(name = "cotrain", version, about = "Actor-critic joint control with environment and human reward")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one reward condition over the configured seeds
    Run {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Train all four reward conditions and print the summary table
    Compare {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Train from recorded EMG and/or feedback traces
    Replay {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// CSV with an `s_raw` column, one row per step
        #[arg(long)]
        emg: Option<PathBuf>,
        /// CSV with `step,value` columns
        #[arg(long)]
        feedback: Option<PathBuf>,
    },
    /// Host a live session for a browser cockpit or another websocket client
    Serve {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, default_value = "127.0.0.1:8765")]
        addr: SocketAddr,
        /// Milliseconds per learner step
        #[arg(long, default_value_t = INTERACTIVE_STEP.as_millis() as u64)]
        step_ms: u64,
        /// Send telemetry every N steps
        #[arg(long, default_value_t = 1)]
        decimation: u64,
    },
}

fn print_table(summaries: &[Summary], out: &mut impl Write) -> io::Result<()> {
    writeln!(out, "{:<18} {:>3} {:>16} {:>16} {:>16}", "condition", "n", "mae_all", "mae_last10k", "mae_last5k")?;
    for s in summaries {
        let cell = |m: f64, sd: f64| format!("{m:.4}±{sd:.4}");
        writeln!(
            out,
            "{:<18} {:>3} {:>16} {:>16} {:>16}",
            s.condition,
            s.n,
            cell(s.mae_all.mean, s.mae_all.std),
            cell(s.mae_last10k.mean, s.mae_last10k.std),
            cell(s.mae_last5k.mean, s.mae_last5k.std)
        )?;
        if s.n_faulted > 0 {
            writeln!(out, "  ({} trial(s) diverged and were excluded)", s.n_faulted)?;
        }
    }
    Ok(())
}

fn write_summary(cfg: &ExperimentConfig, summaries: &[Summary]) -> Result<()> {
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir)?;
        let path = dir.join("summary.csv");
        write_summary_csv(summaries, File::create(&path)?)?;
        log::info!("summary written to {}", path.display());
    }
    Ok(())
}

fn report_trials(results: &[TrialResult], dir: Option<&Path>) {
    for r in results {
        let log = dir.map(|d| format!(" -> {}", d.join(trial_log_name(r.mode, r.seed)).display())).unwrap_or_default();
        match (&r.fault, r.exhausted_at) {
            (Some(f), _) => eprintln!("seed {}: {} steps, stopped: {f}{log}", r.seed, r.records.len()),
            (None, Some(t)) => eprintln!("seed {}: replay ended after {t} steps{log}", r.seed),
            (None, None) => eprintln!("seed {}: {} steps{log}", r.seed, r.records.len()),
        }
    }
}

fn run_one(cfg: &ExperimentConfig) -> Result<()> {
    let results = run_experiment(cfg)?;
    report_trials(&results, cfg.output_dir.as_deref());
    let summary = aggregate(cfg.mode.as_str(), &results)?;
    print_table(std::slice::from_ref(&summary), &mut io::stdout())?;
    write_summary(cfg, std::slice::from_ref(&summary))
}

async fn serve(cfg: ExperimentConfig, addr: SocketAddr, step_ms: u64, decimation: u64) -> Result<()> {
    let bridge = BridgeConfig {
        log_dir: cfg.output_dir.clone(),
        experiment: cfg,
        step_period: Duration::from_millis(step_ms),
        decimation,
        ..Default::default()
    };
    let handle = cotrain_bridge::serve(bridge, addr).await?;
    println!("listening on ws://{}/ws (status at http://{}/status)", handle.local_addr(), handle.local_addr());
    tokio::signal::ctrl_c().await.context("waiting for Ctrl-C")?;
    eprintln!("shutting down");
    handle.shutdown().await;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { exp } => run_one(&exp.build()?),
        Command::Replay { exp, emg, feedback } => {
            let cfg = with_replay(exp.build()?, emg, feedback);
            cfg.validate()?;
            run_one(&cfg)
        }
        Command::Compare { exp } => {
            let cfg = exp.build()?;
            let table = compare(&cfg)?;
            for (_, results) in &table {
                report_trials(results, cfg.output_dir.as_deref());
            }
            let summaries: Vec<Summary> = table.into_iter().map(|(s, _)| s).collect();
            print_table(&summaries, &mut io::stdout())?;
            write_summary_csv(&summaries, io::stdout())?;
            write_summary(&cfg, &summaries)
        }
        Command::Serve { mut exp, addr, step_ms, decimation } => {
            let explicit_feedback = exp.oracle_noise.is_some() || exp.oracle_period.is_some();
            let from_file = exp.config.is_some();
            exp.realtime = false;
            let mut cfg = exp.build()?;
            // Live sessions take presses from clients unless a source was asked for.
            if !explicit_feedback && !from_file {
                cfg.feedback = FeedbackConfig::Live;
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(cfg, addr, step_ms, decimation))
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use gson_core::metrics::{write_aggregate_csv, write_episode_csv, EpisodeRow, MetricReport};
use gson_core::runner::{replay, run_batch, run_episode, BatchManifest, EstimatorKind, RunOptions, Stack};
use gson_core::world::ScenarioConfig;

#[derive(Parser)]
#[command(name = "gson", version, about = "Group-aware social navigation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode and write its log and metrics.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = EstimatorKind::Oracle)]
        estimator: EstimatorKind,
        #[arg(long, default_value_t = Stack::Gson)]
        stack: Stack,
        /// Defaults to the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run every episode listed in a batch manifest.
    Batch {
        #[arg(long)]
        manifest: PathBuf,
        /// Overrides the manifest's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run a logged episode and compare it line by line.
    Replay {
        #[arg(long)]
        log: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Run {
            scenario,
            estimator,
            stack,
            seed,
            out,
        } => cmd_run(&scenario, estimator, stack, seed, &out),
        Command::Batch { manifest, out } => cmd_batch(&manifest, out),
        Command::Replay { log } => cmd_replay(&log),
    }
}

fn cmd_run(path: &Path, estimator: EstimatorKind, stack: Stack, seed: Option<u64>, out: &Path) -> Result<ExitCode> {
    let scenario = ScenarioConfig::load(path)?;
    let opts = RunOptions {
        estimator,
        stack,
        seed,
        ..Default::default()
    };
    let log = run_episode(&scenario, path.parent(), &opts)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let stem = format!("{}_{}_{}_{}", scenario.name, stack, estimator, log.header.seed);
    let log_path = out.join(format!("{stem}.jsonl"));
    fs::write(&log_path, log.to_jsonl()).with_context(|| format!("writing {}", log_path.display()))?;
    let row = EpisodeRow {
        scenario: path.display().to_string(),
        archetype: log.header.archetype.clone(),
        stack: stack.to_string(),
        estimator: estimator.to_string(),
        seed: log.header.seed,
        outcome: Ok(log.summary.metrics.clone()),
    };
    let csv_path = out.join(format!("{stem}.csv"));
    write_episode_csv(&[row], fs::File::create(&csv_path)?)?;
    println!("{:?} after {} ticks", log.summary.outcome, log.summary.ticks);
    print_report(&log.summary.metrics);
    println!("log: {}", log_path.display());
    println!("metrics: {}", csv_path.display());
    Ok(ExitCode::SUCCESS)
}

fn print_report(m: &MetricReport) {
    for (name, value) in MetricReport::COLUMNS.iter().zip(m.values()) {
        println!("  {name:<28} {value:.4}");
    }
}

fn cmd_batch(manifest_path: &Path, out: Option<PathBuf>) -> Result<ExitCode> {
    let manifest = BatchManifest::load(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let out = out.or_else(|| manifest.out.as_ref().map(|o| dir.join(o)));
    let jobs = manifest.jobs(dir)?;
    let report = run_batch(&jobs, out.as_deref(), manifest.write_logs)?;
    let mut stdout = std::io::stdout().lock();
    write_aggregate_csv(&report.aggregate, &mut stdout)?;
    drop(stdout);
    for row in &report.rows {
        if let Err(e) = &row.outcome {
            eprintln!("episode {} stack {} seed {} failed: {e}", row.scenario, row.stack, row.seed);
        }
    }
    println!("{} episodes, {} failed", report.rows.len(), report.failures());
    if let Some(o) = &out {
        println!("results: {}", o.display());
    }
    Ok(if report.failures() == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_replay(path: &Path) -> Result<ExitCode> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (_, report) = replay(&text)?;
    match report.first_difference {
        None => {
            println!("identical ({} lines)", report.lines);
            Ok(ExitCode::SUCCESS)
        }
        Some(line) => {
            println!("mismatch at line {line}");
            Ok(ExitCode::FAILURE)
        }
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

#![forbid(unsafe_code)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ios_lab::config::RunConfig;
use ios_lab::harness::{cmd_evaluate, cmd_export_heatmaps, cmd_gen_data, cmd_train, RunReport, RunStatus};
use ios_lab::model::Algorithm;
use ios_lab::Error;

#[derive(Parser, Debug)]
#[command(name = "ios-lab", version, about = "Learn stopping rules from expert trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate or ingest paths, label them, write train/val/test CSVs.
    GenData(Common),
    /// Train every (algorithm, seed) pair.
    Train(Common),
    /// Score checkpoints on the test paths; write metrics.csv and table.txt.
    Evaluate(Common),
    /// Write Q grids and stopping boundaries of 2-D problems.
    ExportHeatmaps(Common),
    /// gen-data, train, evaluate and (for 2-D problems) export-heatmaps.
    Sweep(Common),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides config and IOS_LAB_OUT_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated algorithm tags.
    #[arg(long, value_delimiter = ',')]
    algorithms: Option<Vec<String>>,
    /// Worker threads; 0 = all cores.
    #[arg(long)]
    jobs: Option<usize>,
    /// Skip runs whose checkpoint already exists.
    #[arg(long)]
    resume: bool,
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

fn load(c: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(&c.config)?;
    cfg.apply_env_overrides()?;
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    if let Some(s) = &c.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(a) = &c.algorithms {
        cfg.algorithms = a
            .iter()
            .map(|t| t.parse::<Algorithm>())
            .collect::<Result<_, _>>()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    if let Some(j) = c.jobs {
        cfg.jobs = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report_runs(reports: &[RunReport]) -> Result<(), Failure> {
    for r in reports {
        match &r.status {
            RunStatus::Trained {
                best_epoch,
                best_val_ba,
                seconds,
            } => println!(
                "{:<16} seed {:<4} ok      best epoch {:>4}  val BA {:.4}  {:.1}s",
                r.algorithm.tag(),
                r.seed,
                best_epoch.map_or("-".into(), |e| e.to_string()),
                best_val_ba.unwrap_or(f64::NAN),
                seconds
            ),
            RunStatus::Skipped => println!("{:<16} seed {:<4} skipped (checkpoint exists)", r.algorithm.tag(), r.seed),
            RunStatus::Failed(e) => println!("{:<16} seed {:<4} FAILED  {e}", r.algorithm.tag(), r.seed),
        }
    }
    let failed = reports.iter().filter(|r| r.failed()).count();
    println!("{} runs, {} failed", reports.len(), failed);
    if failed > 0 {
        return Err(Failure::Run(format!("{failed} run(s) failed")));
    }
    Ok(())
}

fn evaluate(cfg: &RunConfig) -> Result<(), Failure> {
    let ev = cmd_evaluate(cfg)?;
    for (a, s) in &ev.missing {
        eprintln!("missing checkpoint: {a} seed {s}");
    }
    print!("{}", ev.table);
    println!("wrote {}", cfg.out_dir.join("metrics.csv").display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = load(&c)?;
            let b = cmd_gen_data(&cfg)?;
            println!(
                "{}: {} train / {} val / {} test paths in {}",
                cfg.env.kind,
                b.train.len(),
                b.val.len(),
                b.test.len(),
                cfg.data_dir().display()
            );
        }
        Command::Train(c) => {
            let cfg = load(&c)?;
            report_runs(&cmd_train(&cfg, c.resume)?)?;
        }
        Command::Evaluate(c) => evaluate(&load(&c)?)?,
        Command::ExportHeatmaps(c) => {
            let cfg = load(&c)?;
            let n = cmd_export_heatmaps(&cfg)?;
            println!("exported surfaces for {n} run(s)");
        }
        Command::Sweep(c) => {
            let cfg = load(&c)?;
            if !(c.resume && cfg.data_dir().join("manifest.txt").exists()) {
                cmd_gen_data(&cfg)?;
            }
            let train_result = report_runs(&cmd_train(&cfg, c.resume)?);
            evaluate(&cfg)?;
            if cfg.env.dim == 2 {
                cmd_export_heatmaps(&cfg)?;
            }
            train_result?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

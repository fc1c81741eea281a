use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use spowl_core::harness::{ablate, evaluate, train, EvalSummary, Mode, RunConfig};
use spowl_core::oracles;

/// Safe model-based reinforcement learning lab.
#[derive(Parser)]
#[command(name = "spowl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent and write metrics, a manifest and a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's `mode`.
        #[arg(long)]
        mode: Option<Mode>,
        /// Output directory [default: runs/<mode>-seed-<seed>]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with exploration off.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: usize,
    },
    /// Train every variant of an ablation grid under every seed.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Run the reference-oracle suites.
    OracleCheck,
}

fn print_eval(label: &str, s: &EvalSummary) {
    println!(
        "{label}: {} episodes, return {:.3} ± {:.3}, cost {:.3} ± {:.3}, cost rate {:.4}",
        s.episodes.len(),
        s.return_mean,
        s.return_std,
        s.cost_mean,
        s.cost_std,
        s.cost_rate_mean
    );
    if let Some(b) = s.balance_mean {
        println!("{label}: plan balance {b:.3}");
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, seed, mode, out } => {
            let mut cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(mode) = mode {
                cfg.mode = mode;
            }
            let out = out.unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-seed-{}", cfg.mode, cfg.seed)));
            let summary = train(&cfg, &out)?;
            println!("trained {} steps over {} episodes into {}", summary.steps, summary.episodes, summary.out_dir.display());
            println!("training cost rate {:.4}", summary.cost_rate);
            print_eval("final", &summary.final_eval);
        }
        Command::Eval { checkpoint, episodes } => {
            if episodes == 0 {
                bail!("--episodes must be at least 1");
            }
            let summary = evaluate(&checkpoint, episodes)?;
            print_eval("eval", &summary);
        }
        Command::Ablate { grid, out } => {
            let report = ablate(&grid, &out)?;
            for s in &report.summary {
                println!(
                    "{}: {} seeds, return {:.3} ± {:.3}, cost {:.3} ± {:.3}{}",
                    s.variant,
                    s.seeds,
                    s.return_mean,
                    s.return_std,
                    s.cost_mean,
                    s.cost_std,
                    s.balance_mean.map(|b| format!(", balance {b:.3}")).unwrap_or_default()
                );
            }
            println!("wrote {}", out.display());
        }
        Command::OracleCheck => {
            let reports = oracles::run_all();
            for r in &reports {
                println!("{r}");
            }
            let failed = reports.iter().filter(|r| !r.passed).count();
            println!("{} of {} suites passed", reports.len() - failed, reports.len());
            return Ok(failed == 0);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

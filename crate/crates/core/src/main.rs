use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedrl::expcli::{run_experiment, run_onboarding, summarize, RunConfig};
use fedrl::federation::Strategy;
use fedrl::Result;

#[derive(Parser)]
#[command(name = "fedrl", version, about = "Federated soft actor-critic experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a configuration and write metrics.csv.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Use the full-size protocol instead of the desk-scale defaults.
        #[arg(long)]
        paper_scale: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue each seed from its latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Train a new agent against the frozen encoders of a finished FedFormer run.
    Onboard {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Mean and standard error across seeds, plus return ratios between runs.
    Summarize {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "summary")]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            strategy,
            agents,
            seeds,
            paper_scale,
            out,
            resume,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            if paper_scale {
                cfg = cfg.paper_scale();
            }
            if let Some(s) = strategy {
                cfg.strategy = s;
            }
            if let Some(n) = agents {
                cfg.num_agents = n;
            }
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let path = run_experiment(&cfg, resume)?;
            println!("{}", path.display());
        }
        Command::Onboard { base, config } => {
            let cfg = RunConfig::load(&config)?;
            let report = run_onboarding(&base, cfg.onboard_env_seed, &cfg)?;
            println!("seed,threshold,onboarded_epochs,scratch_epochs,speedup");
            let show = |v: Option<u64>| v.map_or("-".to_string(), |e| e.to_string());
            for o in &report.outcomes {
                let speedup = o.speedup.map_or("-".to_string(), |s| format!("{s:.2}"));
                println!(
                    "{},{:.3},{},{},{}",
                    o.seed,
                    o.threshold,
                    show(o.onboarded_epochs),
                    show(o.scratch_epochs),
                    speedup
                );
            }
            println!("{}", report.metrics.display());
        }
        Command::Summarize { inputs, out } => {
            let summary = summarize(&inputs, &out)?;
            for r in fedrl::expcli::summary::final_ratios(&summary) {
                println!("{} / {} at epoch {}: {:.3}", r.strategy, r.reference, r.epoch, r.ratio);
            }
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use qpower::runner::{
    aggregate_curves, load_config, run_enumerate_actions, run_evaluate, run_oracle, run_train,
    run_train_many, RunOptions, SimConfig, CURVES_FILE,
};

#[derive(Parser)]
#[command(name = "qpower", version, about = "Per-antenna power control by tabular Q-learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<SimConfig> {
        let mut c = load_config(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        if let Some(out) = &self.out {
            c.output_dir = out.clone();
        }
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and write metrics.csv, summary.json, qtable.json, channel.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Keep every n-th metrics row.
        #[arg(long, default_value_t = 1)]
        thin: usize,
        /// Independent seeds to train in parallel, one subdirectory each.
        #[arg(long, default_value_t = 1)]
        runs: usize,
    },
    /// Greedy rollout of a trained table.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        qtable: PathBuf,
        /// Defaults to iters_per_episode.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 1)]
        thin: usize,
    },
    /// Exact value iteration on the known chain, optionally compared with a table.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        qtable: Option<PathBuf>,
    },
    /// Write the reduced action space to actions.csv.
    EnumerateActions {
        #[command(flatten)]
        common: Common,
    },
    /// Moving-average curves from a metrics file.
    Curves {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, default_value_t = 100)]
        window: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, thin, runs } => {
            let c = common.load()?;
            let opts = RunOptions { thin };
            if runs > 1 {
                let all = run_train_many(&c, runs, opts)?;
                println!("{}", serde_json::to_string_pretty(&all)?);
            } else {
                let s = run_train(&c, opts)?;
                println!("{}", serde_json::to_string_pretty(&s)?);
            }
        }
        Command::Evaluate {
            common,
            qtable,
            steps,
            thin,
        } => {
            let c = common.load()?;
            let steps = steps.unwrap_or(c.iters_per_episode);
            let s = run_evaluate(&c, &qtable, steps, RunOptions { thin })?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Oracle { common, qtable } => {
            let c = common.load()?;
            let r = run_oracle(&c, qtable.as_deref())?;
            println!("states {} actions {} sweeps {}", r.n_states, r.n_actions, r.sweeps);
            if let Some(cmp) = r.comparison {
                println!(
                    "sup-norm gap {:.6e} (relative {:.4}), policy agreement {:.1}%",
                    cmp.sup_norm_gap,
                    cmp.relative_gap,
                    100.0 * cmp.policy_agreement
                );
            }
        }
        Command::EnumerateActions { common } => {
            let c = common.load()?;
            let n = run_enumerate_actions(&c)?;
            println!("{n} actions written to {}", c.output_dir.display());
        }
        Command::Curves {
            common,
            metrics,
            window,
        } => {
            let c = common.load()?;
            std::fs::create_dir_all(&c.output_dir)?;
            let out = c.output_dir.join(CURVES_FILE);
            let rows = aggregate_curves(&metrics, window, &c.sinr_target_db, c.p_total_db, &out)?;
            println!("{rows} rows written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

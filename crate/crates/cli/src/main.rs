use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use sarl_cli::commands::{self, Diverged};
use sarl_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "sarl", version, about = "State-adversarial RL lab: tabular solvers, training, attacks and certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for every artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set train.agent.config.kappa=0.05`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Exact values, optimal adversary and gap bound for a tabular policy.
    TabularEval,
    /// Adversarial values over the three-state policy grid (CSV).
    Sweep,
    /// Train an agent; writes a checkpoint and a log CSV.
    Train,
    /// Evaluate a checkpoint under the configured attacks.
    Attack,
    /// Bound-propagation certificates for a checkpoint.
    Certify,
    /// Run the oracle-backed checks that need no trained agent.
    Selftest,
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    match cli.command {
        Command::TabularEval => {
            let r = commands::cmd_tabular_eval(&cfg)?;
            println!("V     = {:?}", r.v_mdp);
            println!("V_adv = {:?}", r.v_adv);
            println!("adversary = {:?}", r.adversary);
            println!("gap = {:.6e}, bound = {:.6e}", r.gap.gap, r.gap.bound);
        }
        Command::Sweep => {
            let rows = commands::cmd_sweep(&cfg)?;
            println!("{} grid points written to {}", rows.len(), cfg.out.join("sweep.csv").display());
        }
        Command::Train => {
            let agent = commands::cmd_train(&cfg)?;
            println!("trained {} agent; checkpoint in {}", agent.kind(), cfg.out.display());
        }
        Command::Attack => {
            let m = commands::cmd_attack(&cfg)?;
            println!("natural  mean {:.4}", m.natural.mean);
            for r in &m.reports {
                println!("{:<8} mean {:.4} (eps {})", r.attack.name(), r.stats.mean, r.eps);
            }
        }
        Command::Certify => {
            let r = commands::cmd_certify(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Selftest => {
            let outcomes = commands::cmd_selftest(&cfg)?;
            for o in &outcomes {
                println!("{}", o.line());
            }
            return Ok(outcomes.iter().all(|o| o.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if e.downcast_ref::<Diverged>().is_some() => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

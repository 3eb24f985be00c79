use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use mtt_sim::agents::PolicyKind;
use mtt_sim::harness::{
    compare_policies, emit_plot_data, files, run_experiment, run_single, write_compare_csv,
    ExperimentSpec,
};
use mtt_sim::{Error, Result, SimConfig};

#[derive(Parser)]
#[command(
    name = "mtt-sim",
    about = "Deterministic mobile-target-tracking WSN simulator with a DRL resource scheduler",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Scenario/training configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base random seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a learning policy and write its checkpoint and training log.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Policy to train: ltdra, plain_dqn, or non_cooperative.
        #[arg(long, default_value = "ltdra")]
        policy: String,
        /// Training episodes (overrides the config).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run a policy x seed evaluation grid and write summary.csv.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        /// Comma-separated seed list; overrides --seed.
        #[arg(long)]
        seeds: Option<String>,
        /// Single policy to evaluate; all five when omitted.
        #[arg(long)]
        policy: Option<String>,
        /// Greedy evaluation episodes per run.
        #[arg(long, default_value_t = 5)]
        episodes: usize,
        /// Training episodes for the learning policies (overrides the config).
        #[arg(long)]
        train_episodes: Option<usize>,
    },
    /// Compare policies from an existing summary.csv.
    Compare {
        /// Directory holding summary.csv; compare.csv is written next to it.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Derive plot-ready CSVs from an experiment's artifact files.
    PlotData {
        /// Directory holding the per-run artifact files.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Parse and validate a configuration file.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<SimConfig> {
    match path {
        Some(p) => SimConfig::from_path(p),
        None => Ok(SimConfig::default()),
    }
}

fn parse_seeds(list: &Option<String>, fallback: u64) -> Result<Vec<u64>> {
    match list {
        None => Ok(vec![fallback]),
        Some(s) => s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::config("seeds", format!("`{t}` is not a seed")))
            })
            .collect(),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, policy, episodes } => {
            let cfg = load_config(&common.config)?;
            let policy: PolicyKind = policy.parse()?;
            if !policy.needs_training() {
                return Err(Error::config(
                    "policy",
                    format!("`{policy}` is scripted and has nothing to train"),
                ));
            }
            std::fs::create_dir_all(&common.out)?;
            let art = run_single(&cfg, policy, common.seed, episodes, 1, Some(&common.out))?;
            println!(
                "trained {} seed {}: {} episodes, final reward {:.4}, eval energy {:.3} J",
                policy,
                common.seed,
                art.training.len(),
                art.training.last().map(|e| e.total_reward).unwrap_or(0.0),
                art.summary.mean_energy_j,
            );
        }
        Command::Eval { common, seeds, policy, episodes, train_episodes } => {
            let cfg = load_config(&common.config)?;
            let policies = match policy {
                Some(p) => vec![p.parse::<PolicyKind>()?],
                None => PolicyKind::all().to_vec(),
            };
            let spec = ExperimentSpec {
                config: cfg,
                policies,
                seeds: parse_seeds(&seeds, common.seed)?,
                out_dir: common.out.clone(),
                train_episodes,
                eval_episodes: episodes.max(1),
            };
            let summaries = run_experiment(&spec)?;
            for s in &summaries {
                println!(
                    "{:<16} seed {:<4} energy {:>10.3} J  mse {:>9.3} m^2  t_alpha {:>8.5} s  deadline {:>6.2}%",
                    s.policy.name(),
                    s.seed,
                    s.mean_energy_j,
                    s.final_mse_m2,
                    s.mean_t_alpha_s,
                    s.deadline_rate * 100.0,
                );
            }
            println!("wrote {}", spec.out_dir.join("summary.csv").display());
        }
        Command::Compare { out } => {
            let summaries = files::read_summary_csv(&out.join("summary.csv"))?;
            let rows = compare_policies(&summaries)?;
            write_compare_csv(&out.join("compare.csv"), &rows)?;
            for r in &rows {
                println!(
                    "{:<16} energy {:>10.3} J ({:>+7.2}% vs ltdra)  t_alpha {:>8.5} s ({:>+7.2}%)  deadline {:>6.2}%",
                    r.policy.name(),
                    r.mean_energy_j,
                    r.energy_vs_ltdra_pct,
                    r.mean_t_alpha_s,
                    r.latency_vs_ltdra_pct,
                    r.deadline_rate * 100.0,
                );
            }
            println!("wrote {}", out.join("compare.csv").display());
        }
        Command::PlotData { out } => {
            emit_plot_data(&out)?;
            println!("wrote plot data under {}", out.join("plots").display());
        }
        Command::ValidateConfig { config } => {
            let cfg = SimConfig::from_path(&config)?;
            println!(
                "ok: {} sensors, {} mobiles, {} servers, {} training episodes",
                cfg.world.num_sensors,
                cfg.world.num_mobiles,
                cfg.world.servers.len(),
                cfg.agent.episodes,
            );
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

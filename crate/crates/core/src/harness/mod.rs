//! Experiment orchestration: policy x seed grids, training + greedy
//! evaluation, artifact files, policy comparison, and plot-ready data.

pub mod files;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agents::{
    policy_config, run_episode, train_dqn, EpisodeStats, PolicyKind, QNet,
};
use crate::config::SimConfig;
use crate::env::Sim;
use crate::error::{Error, Result};

pub use files::SCHEMA_VERSION;

/// Episode ids used for greedy evaluation, disjoint from training ids.
pub const EVAL_EPISODE_BASE: u64 = 1 << 20;

/// Rng stream separator for scripted policies and evaluation rollouts.
const EVAL_SEED_SALT: u64 = 0x9d_2c_55_38_10_4f_3a_71;

/// One (policy, seed) cell of an experiment grid.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub policy: PolicyKind,
    pub seed: u64,
    pub train_episodes: usize,
    pub eval_episodes: usize,
    /// Mean fleet energy per greedy-evaluation episode, joules.
    pub mean_energy_j: f64,
    /// Mean squared tracking error over the evaluation episodes, m^2.
    pub final_mse_m2: f64,
    pub mean_er_m: f64,
    /// Task-weighted mean system latency over the evaluation episodes.
    pub mean_t_alpha_s: f64,
    pub deadline_rate: f64,
    pub mean_reward: f64,
}

/// Everything produced by one run, for callers that aggregate further.
pub struct RunArtifacts {
    pub summary: RunSummary,
    pub training: Vec<EpisodeStats>,
    pub evals: Vec<EpisodeStats>,
    pub wall_s: f64,
}

/// A full experiment: grid, scenario, output location.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub config: SimConfig,
    pub policies: Vec<PolicyKind>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Overrides `config.agent.episodes` when set.
    pub train_episodes: Option<usize>,
    pub eval_episodes: usize,
}

/// Aggregates evaluation episodes into the summary row.
fn summarize(
    policy: PolicyKind,
    seed: u64,
    train_episodes: usize,
    evals: &[EpisodeStats],
) -> RunSummary {
    let n = evals.len().max(1) as f64;
    let tasks: u64 = evals.iter().map(|e| e.tasks).sum();
    let hits: u64 = evals.iter().map(|e| e.deadline_hits).sum();
    let t_alpha_weighted: f64 = evals.iter().map(|e| e.mean_t_alpha_s * e.tasks as f64).sum();
    RunSummary {
        policy,
        seed,
        train_episodes,
        eval_episodes: evals.len(),
        mean_energy_j: evals.iter().map(|e| e.energy_j).sum::<f64>() / n,
        final_mse_m2: evals.iter().map(|e| e.mse_m2).sum::<f64>() / n,
        mean_er_m: evals.iter().map(|e| e.mean_er_m).sum::<f64>() / n,
        mean_t_alpha_s: if tasks > 0 { t_alpha_weighted / tasks as f64 } else { 0.0 },
        deadline_rate: if tasks > 0 { hits as f64 / tasks as f64 } else { 1.0 },
        mean_reward: evals.iter().map(|e| e.total_reward).sum::<f64>() / n,
    }
}

/// Trains (when the policy learns) and evaluates one grid cell. With
/// `out_dir` set, writes the per-run artifact files.
pub fn run_single(
    base_cfg: &SimConfig,
    policy: PolicyKind,
    seed: u64,
    train_episodes: Option<usize>,
    eval_episodes: usize,
    out_dir: Option<&Path>,
) -> Result<RunArtifacts> {
    let start = Instant::now();
    let mut cfg = policy_config(base_cfg, policy);
    if let Some(w) = train_episodes {
        cfg.agent.episodes = w;
    }
    let w = cfg.agent.episodes;
    let mut sim = Sim::new(cfg.clone(), seed)?;

    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_SEED_SALT);
    let (net, training): (Option<QNet>, Vec<EpisodeStats>) = if policy.needs_training() {
        let out = train_dqn(&mut sim, &cfg.agent, seed)?;
        (Some(out.net), out.episodes)
    } else {
        // scripted policies log the same number of iterations for curve
        // comparability, no learning happens
        let mut log = Vec::with_capacity(w);
        for ep in 0..w as u64 {
            log.push(run_episode(&mut sim, policy, None, ep, &mut eval_rng)?);
        }
        (None, log)
    };

    let mut evals = Vec::with_capacity(eval_episodes);
    for i in 0..eval_episodes as u64 {
        if out_dir.is_some() && i + 1 == eval_episodes as u64 {
            sim.set_recording(true);
        }
        evals.push(run_episode(&mut sim, policy, net.as_ref(), EVAL_EPISODE_BASE + i, &mut eval_rng)?);
    }

    let prefix = format!("{}_{}", policy.name(), seed);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        files::write_episodes_csv(&dir.join(format!("episodes_{prefix}.csv")), &training)?;
        files::write_episodes_csv(&dir.join(format!("evals_{prefix}.csv")), &evals)?;
        files::write_records(dir, &prefix, sim.records())?;
        if let Some(net) = &net {
            net.save(&dir.join(format!("{prefix}.qnet")))?;
        }
    }

    Ok(RunArtifacts {
        summary: summarize(policy, seed, w, &evals),
        training,
        evals,
        wall_s: start.elapsed().as_secs_f64(),
    })
}

/// Runs the whole grid, parallel over cells, and writes `summary.csv` plus
/// `meta.json`. Results come back in grid order (policy-major, then seed).
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<RunSummary>> {
    spec.config.validate()?;
    if spec.policies.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Experiment("experiment grid is empty".into()));
    }
    let grid: Vec<(PolicyKind, u64)> = spec
        .policies
        .iter()
        .flat_map(|&p| spec.seeds.iter().map(move |&s| (p, s)))
        .collect();

    let run_cell = |&(policy, seed): &(PolicyKind, u64)| -> Result<RunArtifacts> {
        run_single(
            &spec.config,
            policy,
            seed,
            spec.train_episodes,
            spec.eval_episodes,
            Some(&spec.out_dir),
        )
    };

    let artifacts: Vec<RunArtifacts> = match thread_budget() {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Experiment(format!("thread pool: {e}")))?;
            pool.install(|| {
                use rayon::prelude::*;
                grid.par_iter().map(run_cell).collect::<Result<Vec<_>>>()
            })?
        }
        None => {
            use rayon::prelude::*;
            grid.par_iter().map(run_cell).collect::<Result<Vec<_>>>()?
        }
    };

    let summaries: Vec<RunSummary> = artifacts.iter().map(|a| a.summary.clone()).collect();
    files::write_summary_csv(&spec.out_dir.join("summary.csv"), &summaries)?;
    write_meta(spec, &artifacts)?;
    Ok(summaries)
}

/// Worker-count override from the environment (`MTT_SIM_THREADS`).
fn thread_budget() -> Option<usize> {
    std::env::var("MTT_SIM_THREADS").ok()?.parse().ok()
}

/// Wall-clock times and provenance go to a sidecar, never into the CSVs, so
/// CSV bodies stay byte-identical across reruns.
fn write_meta(spec: &ExperimentSpec, artifacts: &[RunArtifacts]) -> Result<()> {
    let wall: serde_json::Map<String, serde_json::Value> = artifacts
        .iter()
        .map(|a| {
            (
                format!("{}_{}", a.summary.policy.name(), a.summary.seed),
                serde_json::json!(a.wall_s),
            )
        })
        .collect();
    let meta = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "policies": spec.policies.iter().map(|p| p.name()).collect::<Vec<_>>(),
        "seeds": spec.seeds,
        "train_episodes": spec.train_episodes,
        "eval_episodes": spec.eval_episodes,
        "wall_s": wall,
        "config": spec.config,
    });
    std::fs::write(
        spec.out_dir.join("meta.json"),
        serde_json::to_string_pretty(&meta).map_err(|e| Error::Experiment(e.to_string()))?,
    )?;
    Ok(())
}

/// One row of the cross-policy comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub policy: PolicyKind,
    pub mean_energy_j: f64,
    /// Percent energy change relative to the learned scheduler (negative
    /// means the learned scheduler spends less).
    pub energy_vs_ltdra_pct: f64,
    pub mean_t_alpha_s: f64,
    pub latency_vs_ltdra_pct: f64,
    pub deadline_rate: f64,
    pub final_mse_m2: f64,
}

/// Seed-averaged comparison of every policy against the learned scheduler.
pub fn compare_policies(summaries: &[RunSummary]) -> Result<Vec<CompareRow>> {
    if summaries.is_empty() {
        return Err(Error::Experiment("no summaries to compare".into()));
    }
    let mean_of = |policy: PolicyKind, field: fn(&RunSummary) -> f64| -> Option<f64> {
        let vals: Vec<f64> =
            summaries.iter().filter(|s| s.policy == policy).map(field).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let ref_energy = mean_of(PolicyKind::Ltdra, |s| s.mean_energy_j);
    let ref_latency = mean_of(PolicyKind::Ltdra, |s| s.mean_t_alpha_s);

    let mut rows = Vec::new();
    for policy in PolicyKind::all() {
        let Some(energy) = mean_of(policy, |s| s.mean_energy_j) else { continue };
        let latency = mean_of(policy, |s| s.mean_t_alpha_s).unwrap_or(0.0);
        let pct = |v: f64, reference: Option<f64>| match reference {
            Some(r) if r != 0.0 => (v - r) / r * 100.0,
            _ => 0.0,
        };
        rows.push(CompareRow {
            policy,
            mean_energy_j: energy,
            energy_vs_ltdra_pct: pct(energy, ref_energy),
            mean_t_alpha_s: latency,
            latency_vs_ltdra_pct: pct(latency, ref_latency),
            deadline_rate: mean_of(policy, |s| s.deadline_rate).unwrap_or(1.0),
            final_mse_m2: mean_of(policy, |s| s.final_mse_m2).unwrap_or(0.0),
        });
    }
    Ok(rows)
}

pub fn write_compare_csv(path: &Path, rows: &[CompareRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(files::COMPARE_HEADER)?;
    for r in rows {
        w.write_record(&[
            r.policy.name().to_string(),
            format!("{}", r.mean_energy_j),
            format!("{}", r.energy_vs_ltdra_pct),
            format!("{}", r.mean_t_alpha_s),
            format!("{}", r.latency_vs_ltdra_pct),
            format!("{}", r.deadline_rate),
            format!("{}", r.final_mse_m2),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Derives the plot-ready CSVs under `<out>/plots/` from the per-run files an
/// experiment already wrote.
pub fn emit_plot_data(out_dir: &Path) -> Result<()> {
    let plots = out_dir.join("plots");
    std::fs::create_dir_all(&plots)?;

    // discover per-run episode logs: episodes_<policy>_<seed>.csv
    let mut runs: Vec<(String, String, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(out_dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(rest) = name.strip_prefix("episodes_").and_then(|r| r.strip_suffix(".csv")) {
            if let Some(pos) = rest.rfind('_') {
                runs.push((rest[..pos].to_string(), rest[pos + 1..].to_string(), entry.path()));
            }
        }
    }
    if runs.is_empty() {
        return Err(Error::Experiment(format!(
            "no episodes_*.csv files under {}",
            out_dir.display()
        )));
    }
    runs.sort();

    let mut mse = csv::Writer::from_path(plots.join("mse_vs_iteration.csv"))?;
    mse.write_record(["iteration", "mse_m2", "policy", "seed"])?;
    let mut energy = csv::Writer::from_path(plots.join("energy_vs_iteration.csv"))?;
    energy.write_record(["iteration", "energy_j", "policy", "seed"])?;
    let mut latency = csv::Writer::from_path(plots.join("latency_vs_iteration.csv"))?;
    latency.write_record(["iteration", "mean_t_alpha_s", "policy", "seed"])?;
    let mut acc_energy = csv::Writer::from_path(plots.join("accuracy_vs_energy.csv"))?;
    acc_energy.write_record(["energy_j", "mse_m2", "policy", "seed"])?;
    let mut activated = csv::Writer::from_path(plots.join("activated_sensors_vs_time.csv"))?;
    activated.write_record(["tick", "n_activated", "policy", "seed"])?;

    for (policy, seed, path) in &runs {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        let col = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Experiment(format!("missing column {name} in {}", path.display())))
        };
        let (c_ep, c_mse, c_energy, c_lat) =
            (col("episode")?, col("mse_m2")?, col("energy_j")?, col("mean_t_alpha_s")?);
        for rec in r.records() {
            let rec = rec?;
            mse.write_record([&rec[c_ep], &rec[c_mse], policy.as_str(), seed])?;
            energy.write_record([&rec[c_ep], &rec[c_energy], policy.as_str(), seed])?;
            latency.write_record([&rec[c_ep], &rec[c_lat], policy.as_str(), seed])?;
            acc_energy.write_record([&rec[c_energy], &rec[c_mse], policy.as_str(), seed])?;
        }

        let trace_path = out_dir.join(format!("trace_{policy}_{seed}.csv"));
        if trace_path.exists() {
            let mut r = csv::Reader::from_path(&trace_path)?;
            let headers = r.headers()?.clone();
            let c_tick = headers.iter().position(|h| h == "tick");
            let c_act = headers.iter().position(|h| h == "n_activated");
            if let (Some(ct), Some(ca)) = (c_tick, c_act) {
                for rec in r.records() {
                    let rec = rec?;
                    activated.write_record([&rec[ct], &rec[ca], policy.as_str(), seed])?;
                }
            }
        }
    }
    mse.flush()?;
    energy.flush()?;
    latency.flush()?;
    acc_energy.flush()?;
    activated.flush()?;
    Ok(())
}

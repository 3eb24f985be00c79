//! CSV and metadata file formats of the experiment harness.
//!
//! All numeric cells use the shortest round-trip float representation, so a
//! rerun with identical inputs produces byte-identical file bodies.

use std::path::Path;

use crate::agents::{EpisodeStats, PolicyKind};
use crate::env::TickRecords;
use crate::error::{Error, Result};
use crate::harness::RunSummary;

/// Bumped whenever any emitted column set changes.
pub const SCHEMA_VERSION: u32 = 2;

pub const EPISODES_HEADER: &[&str] = &[
    "episode",
    "steps",
    "reward",
    "energy_j",
    "mse_m2",
    "mean_er_m",
    "tasks",
    "deadline_hits",
    "mean_t_alpha_s",
    "q_violations",
    "mean_loss",
    "epsilon",
    "predictor_fits",
];

pub const SUMMARY_HEADER: &[&str] = &[
    "policy",
    "seed",
    "mean_energy_J",
    "final_mse_m2",
    "mean_Er_m",
    "deadline_rate",
    "mean_t_alpha_s",
    "train_episodes",
    "eval_episodes",
    "mean_reward",
];

pub const TRACE_HEADER: &[&str] = &[
    "tick", "action", "reward", "e_term", "a_term", "c1", "c2", "c3", "c4", "n_activated",
    "n_measured", "energy_j",
];

pub const TASKS_HEADER: &[&str] = &[
    "tick", "sn_id", "dest_kind", "dest_id", "tau_c", "tau_beta", "tau_a", "t_alpha",
    "deadline_met",
];

pub const TRACK_HEADER: &[&str] = &[
    "tick", "true_x", "true_y", "est_x", "est_y", "E_r", "n_activated", "n_measured",
    "n_accepted", "fused_amplitude",
];

pub const ENERGY_HEADER: &[&str] =
    &["tick", "node_id", "mode", "joules", "battery_remaining"];

pub const COMPARE_HEADER: &[&str] = &[
    "policy",
    "mean_energy_j",
    "energy_vs_ltdra_pct",
    "mean_t_alpha_s",
    "latency_vs_ltdra_pct",
    "deadline_rate",
    "final_mse_m2",
];

fn f(v: f64) -> String {
    format!("{v}")
}

fn b(v: bool) -> String {
    if v { "1".into() } else { "0".into() }
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(csv::Writer::from_path(path)?)
}

pub fn write_episodes_csv(path: &Path, episodes: &[EpisodeStats]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(EPISODES_HEADER)?;
    for e in episodes {
        w.write_record(&[
            e.episode.to_string(),
            e.steps.to_string(),
            f(e.total_reward),
            f(e.energy_j),
            f(e.mse_m2),
            f(e.mean_er_m),
            e.tasks.to_string(),
            e.deadline_hits.to_string(),
            f(e.mean_t_alpha_s),
            e.q_violations.to_string(),
            f(e.mean_loss),
            f(e.epsilon),
            e.predictor_fits.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, rows: &[RunSummary]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record(&[
            r.policy.name().to_string(),
            r.seed.to_string(),
            f(r.mean_energy_j),
            f(r.final_mse_m2),
            f(r.mean_er_m),
            f(r.deadline_rate),
            f(r.mean_t_alpha_s),
            r.train_episodes.to_string(),
            r.eval_episodes.to_string(),
            f(r.mean_reward),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<RunSummary>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != SUMMARY_HEADER {
        return Err(Error::Experiment(format!(
            "unexpected summary header in {}",
            path.display()
        )));
    }
    let parse_f = |s: &str| -> Result<f64> {
        s.parse().map_err(|_| Error::Experiment(format!("bad float `{s}` in summary")))
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(RunSummary {
            policy: rec[0].parse::<PolicyKind>()?,
            seed: rec[1].parse().map_err(|_| Error::Experiment("bad seed".into()))?,
            mean_energy_j: parse_f(&rec[2])?,
            final_mse_m2: parse_f(&rec[3])?,
            mean_er_m: parse_f(&rec[4])?,
            deadline_rate: parse_f(&rec[5])?,
            mean_t_alpha_s: parse_f(&rec[6])?,
            train_episodes: rec[7].parse().map_err(|_| Error::Experiment("bad count".into()))?,
            eval_episodes: rec[8].parse().map_err(|_| Error::Experiment("bad count".into()))?,
            mean_reward: parse_f(&rec[9])?,
        });
    }
    Ok(out)
}

/// Final-evaluation tick logs: trace, tasks, track, and energy files.
pub fn write_records(dir: &Path, prefix: &str, records: &TickRecords) -> Result<()> {
    let mut w = writer(&dir.join(format!("trace_{prefix}.csv")))?;
    w.write_record(TRACE_HEADER)?;
    for r in &records.trace {
        w.write_record(&[
            r.tick.to_string(),
            r.action.to_string(),
            f(r.reward),
            f(r.e_term),
            f(r.a_term),
            b(r.c1),
            b(r.c2),
            b(r.c3),
            b(r.c4),
            r.n_activated.to_string(),
            r.n_measured.to_string(),
            f(r.energy_j),
        ])?;
    }
    w.flush()?;

    let mut w = writer(&dir.join(format!("tasks_{prefix}.csv")))?;
    w.write_record(TASKS_HEADER)?;
    for r in &records.tasks {
        w.write_record(&[
            r.tick.to_string(),
            r.sn_id.to_string(),
            r.dest_kind.to_string(),
            r.dest_id.to_string(),
            f(r.tau_c),
            f(r.tau_beta),
            f(r.tau_a),
            f(r.t_alpha),
            b(r.deadline_met),
        ])?;
    }
    w.flush()?;

    let mut w = writer(&dir.join(format!("track_{prefix}.csv")))?;
    w.write_record(TRACK_HEADER)?;
    for r in &records.track {
        w.write_record(&[
            r.tick.to_string(),
            f(r.true_x),
            f(r.true_y),
            f(r.est_x),
            f(r.est_y),
            f(r.err_m),
            r.n_activated.to_string(),
            r.n_measured.to_string(),
            r.n_accepted.to_string(),
            r.fused_amplitude.map(f).unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let mut w = writer(&dir.join(format!("energy_{prefix}.csv")))?;
    w.write_record(ENERGY_HEADER)?;
    for r in &records.energy {
        w.write_record(&[
            r.tick.to_string(),
            r.node_id.to_string(),
            r.mode.to_string(),
            f(r.joules),
            f(r.battery_remaining),
        ])?;
    }
    w.flush()?;
    Ok(())
}

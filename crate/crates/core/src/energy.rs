//! Node state machine and energy cost model.
//!
//! Every node is in exactly one of four modes (Sleep, Idle, Check, Work),
//! each with its own energy rate. Event-driven transmission and compute costs
//! come on top of the per-mode rates. `period_cost` assembles the per-period
//! objective from one-hot mode indicators.

use serde::{Deserialize, Serialize};

use crate::config::EnergyConfig;
use crate::error::{Error, Result};

/// Exclusive operating state of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeMode {
    Sleep,
    Idle,
    Check,
    Work,
}

impl NodeMode {
    /// One-hot indicator in the canonical order [sleep, idle, check, work].
    pub fn indicator(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self.index()] = 1.0;
        v
    }

    pub fn index(self) -> usize {
        match self {
            NodeMode::Sleep => 0,
            NodeMode::Idle => 1,
            NodeMode::Check => 2,
            NodeMode::Work => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeMode::Sleep => "sleep",
            NodeMode::Idle => "idle",
            NodeMode::Check => "check",
            NodeMode::Work => "work",
        }
    }
}

/// Events driving the mode state machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeEvent {
    NoTask,
    TargetDetected,
    DataCollected,
    ScheduledToTrack,
    Timeout,
}

/// Applies one transition of the mode state machine.
///
/// Only mobile nodes may enter Work; `is_mobile` gates that edge.
pub fn transition_mode(mode: NodeMode, event: ModeEvent, is_mobile: bool) -> Result<NodeMode> {
    use ModeEvent::*;
    use NodeMode::*;
    match (mode, event) {
        (_, NoTask) | (_, Timeout) => Ok(Sleep),
        (Sleep, TargetDetected) => Ok(Idle),
        (m, TargetDetected) => Ok(m),
        (Idle, DataCollected) => Ok(Check),
        (Sleep, DataCollected) => Err(Error::IllegalTransition(
            "DataCollected while asleep".into(),
        )),
        (m, DataCollected) => Ok(m),
        (_, ScheduledToTrack) if !is_mobile => Err(Error::IllegalTransition(
            "only mobile nodes can be scheduled to track".into(),
        )),
        (Check, ScheduledToTrack) | (Idle, ScheduledToTrack) | (Work, ScheduledToTrack) => Ok(Work),
        (Sleep, ScheduledToTrack) => Err(Error::IllegalTransition(
            "cannot schedule a sleeping node to track".into(),
        )),
    }
}

/// Sleep-state energy over a period: P0 * gamma.
pub fn sleep_energy(period: f64, p0: f64) -> f64 {
    p0 * period
}

/// Idle-state energy over a period: eta_w * P0 * gamma, eta_w > 1.
pub fn idle_energy(period: f64, eta_w: f64, p0: f64) -> Result<f64> {
    if eta_w <= 1.0 {
        return Err(Error::Domain(format!("eta_w must be > 1, got {eta_w}")));
    }
    Ok(eta_w * p0 * period)
}

/// Transmission energy: 2*eps_elec*(q_t + q_s) + eps_amp*q_r*d^2.
pub fn trans_energy(params: &EnergyConfig, dist_m: f64) -> f64 {
    trans_energy_bits(params, params.q_r_bits, dist_m)
}

/// Transmission energy for an explicit payload size: the handshake term is
/// fixed, the amplifier term scales with the bits actually radiated.
pub fn trans_energy_bits(params: &EnergyConfig, payload_bits: f64, dist_m: f64) -> f64 {
    2.0 * params.eps_elec * (params.q_t_bits + params.q_s_bits)
        + params.eps_amp * payload_bits * dist_m * dist_m
}

/// Computation energy: kappa * a * L * f^2.
pub fn comp_energy(kappa: f64, a_frac: f64, bits: f64, freq: f64) -> f64 {
    kappa * a_frac * bits * freq * freq
}

/// Check-state energy: transmission and compute event costs plus the
/// probability-weighted idle-listen term. For `k_retry > 1` the listen term
/// is scaled by the geometric prefactor sum_{n=1..k} phi^n.
pub fn check_energy(
    phi: f64,
    k_retry: u32,
    dist_m: f64,
    params: &EnergyConfig,
    task_bits: f64,
    local_freq: f64,
    period: f64,
) -> Result<f64> {
    if !(0.0..1.0).contains(&phi) {
        return Err(Error::Domain(format!(
            "scheduling probability must be in [0, 1), got {phi}"
        )));
    }
    if k_retry == 0 {
        return Err(Error::Domain("k_retry must be >= 1".into()));
    }
    let listen_prefactor: f64 = (1..=k_retry).map(|n| phi.powi(n as i32)).sum();
    let e_trans = trans_energy(params, dist_m);
    let e_com = comp_energy(params.kappa, params.a_frac, task_bits, local_freq);
    Ok(e_trans + e_com + listen_prefactor * params.eta_w * params.p0_sleep * period)
}

/// Work-state (mobility) energy: v * gamma * varpi_v.
pub fn work_energy(speed_mps: f64, period: f64, varpi_v: f64) -> f64 {
    speed_mps * period * varpi_v
}

/// Tracking capacity con = w1 * R_norm + w2 * exp(-d).
pub fn tracking_capacity(residual_norm: f64, dist_m: f64, omega1: f64, omega2: f64) -> Result<f64> {
    if (omega1 + omega2 - 1.0).abs() > 1e-12 || omega1 < 0.0 || omega2 < 0.0 {
        return Err(Error::Domain(format!(
            "capacity weights must be nonnegative and sum to 1, got ({omega1}, {omega2})"
        )));
    }
    Ok(omega1 * residual_norm + omega2 * (-dist_m).exp())
}

/// Cumulative energy accounting for a node fleet.
#[derive(Debug, Clone, Default)]
pub struct EnergyLedger {
    /// Per-node cumulative energy by mode, order [sleep, idle, check, work].
    pub per_node: Vec<[f64; 4]>,
    /// Cumulative event costs by kind: [transmission, computation].
    pub events: [f64; 2],
    /// Grand total across nodes, modes, and events.
    pub total: f64,
}

impl EnergyLedger {
    pub fn new(num_nodes: usize) -> Self {
        Self {
            per_node: vec![[0.0; 4]; num_nodes],
            events: [0.0; 2],
            total: 0.0,
        }
    }

    pub fn charge_mode(&mut self, node: usize, mode: NodeMode, joules: f64) {
        self.per_node[node][mode.index()] += joules;
        self.total += joules;
    }

    pub fn charge_trans(&mut self, joules: f64) {
        self.events[0] += joules;
        self.total += joules;
    }

    pub fn charge_com(&mut self, joules: f64) {
        self.events[1] += joules;
        self.total += joules;
    }

    pub fn node_total(&self, node: usize) -> f64 {
        self.per_node[node].iter().sum()
    }
}

/// Period objective: sum over nodes of the one-hot indicator row dotted with
/// the node's per-mode energy vector.
pub fn period_cost(indicators: &[[f64; 4]], energies: &[[f64; 4]]) -> Result<f64> {
    if indicators.len() != energies.len() {
        return Err(Error::Domain("indicator/energy row count mismatch".into()));
    }
    let mut total = 0.0;
    for (row, (ind, e)) in indicators.iter().zip(energies).enumerate() {
        let ones = ind.iter().filter(|&&v| v == 1.0).count();
        let zeros = ind.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != 4 {
            return Err(Error::Domain(format!("indicator row {row} is not one-hot")));
        }
        total += ind.iter().zip(e).map(|(i, e)| i * e).sum::<f64>();
    }
    Ok(total)
}

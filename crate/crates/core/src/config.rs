//! Scenario and training configuration.
//!
//! A single TOML file with sections mirroring the simulator modules
//! (`world`, `radio`, `energy`, `tracker`, `env`, `agent`). Every field has a
//! shipped default; an empty file is a valid configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn is_finite_pos(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

/// How the target's initial position is drawn at episode start.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetInit {
    /// Fixed initial coordinate.
    Fixed { x: f64, y: f64 },
    /// Both coordinates drawn uniformly from `[min, max]`.
    Ranged { min: f64, max: f64 },
    /// Each coordinate drawn uniformly from its own interval.
    RangedXy { xmin: f64, xmax: f64, ymin: f64, ymax: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetConfig {
    pub init: TargetInit,
    /// Initial speed in m/s. Direction comes from `init_heading_rad` unless
    /// `random_heading` is set.
    pub init_speed_mps: f64,
    pub init_heading_rad: f64,
    /// Draw a fresh heading per episode.
    pub random_heading: bool,
    pub max_speed_mps: f64,
    /// Per-axis position process noise sigma (meters per tick).
    pub pos_noise_sigma: f64,
    /// Per-axis velocity process noise sigma (m/s per tick).
    pub vel_noise_sigma: f64,
    /// Acoustic source power P_i driving the amplitude measurement model.
    pub source_power_w: f64,
    /// Measurement noise sigma on received amplitude.
    pub meas_noise_sigma: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            init: TargetInit::Fixed { x: 0.0, y: 50.0 },
            init_speed_mps: 1.0,
            init_heading_rad: 0.0,
            random_heading: false,
            max_speed_mps: 1.0,
            pos_noise_sigma: 1.0,
            vel_noise_sigma: 0.1,
            source_power_w: 1.0e4,
            meas_noise_sigma: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServerSpec {
    pub x: f64,
    pub y: f64,
    /// Server CPU frequency f^e in cycles/s.
    pub cpu_freq: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// Side of the square monitoring area, meters.
    pub side_m: f64,
    pub num_sensors: usize,
    pub num_mobiles: usize,
    pub servers: Vec<ServerSpec>,
    pub sensor_battery_j: f64,
    pub mobile_battery_j: f64,
    pub sense_range_m: f64,
    pub comm_range_m: f64,
    pub sensor_tx_power_w: f64,
    pub mobile_speed_mps: f64,
    /// Mobile node CPU frequency in cycles/s.
    pub mobile_cpu_freq: f64,
    pub tick_s: f64,
    /// Episode horizon T in ticks.
    pub max_ticks: u64,
    pub target: TargetConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            side_m: 200.0,
            num_sensors: 56,
            num_mobiles: 6,
            servers: vec![
                ServerSpec { x: 50.0, y: 100.0, cpu_freq: 1.0e9 },
                ServerSpec { x: 150.0, y: 100.0, cpu_freq: 1.0e9 },
            ],
            sensor_battery_j: 40.0,
            mobile_battery_j: 400.0,
            sense_range_m: 30.0,
            comm_range_m: 50.0,
            sensor_tx_power_w: 0.5,
            mobile_speed_mps: 1.0,
            mobile_cpu_freq: 5.0e8,
            tick_s: 1.0,
            max_ticks: 200,
            target: TargetConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RadioConfig {
    /// Total bandwidth per offload destination, Hz. Concurrent offloaders on
    /// the same destination split this pool equally.
    pub bandwidth_hz: f64,
    /// Reference channel gain g0; gain at distance d is g0 / (1 + d^2).
    pub gain_g0: f64,
    /// Receiver noise power, watts.
    pub noise_w: f64,
    /// Task size L, bits.
    pub task_bits: f64,
    /// Task deadline tau_ar, seconds.
    pub deadline_s: f64,
    /// Task split: fraction eta computed at the mobile node.
    pub split_eta: f64,
    pub cycles_per_bit: f64,
    /// MN -> server backhaul rate, bits/s.
    pub backhaul_bps: f64,
    /// Forward the remote share over the backhaul after the SN -> MN hop.
    pub mn_forward: bool,
    /// Tracking-control time tau_a charged when a mobile node is scheduled.
    pub track_move_s: f64,
    /// Wake-up latency charged when a task is relayed through a mobile node
    /// other than the one currently scheduled to track (that node is asleep
    /// or idle and must transition to work before serving the relay).
    pub relay_wake_s: f64,
}

impl Default for RadioConfig {
    fn default() -> Self {
        Self {
            bandwidth_hz: 1.0e6,
            gain_g0: 0.1,
            noise_w: 1.0e-6,
            task_bits: 1.0e4,
            deadline_s: 0.1,
            split_eta: 0.35,
            cycles_per_bit: 1000.0,
            backhaul_bps: 1.0e7,
            mn_forward: true,
            track_move_s: 0.01,
            relay_wake_s: 0.02,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyConfig {
    /// Sleep power P0, J per unit time.
    pub p0_sleep: f64,
    /// Idle multiplier eta_w (> 1); idle rate is eta_w * P0.
    pub eta_w: f64,
    /// Check-state listen rate, J per unit time.
    pub check_rate: f64,
    /// Mobility cost per meter, J/m.
    pub varpi_v: f64,
    /// Circuit energy per bit, J/bit.
    pub eps_elec: f64,
    /// Amplifier energy, J/bit/m^2.
    pub eps_amp: f64,
    pub q_t_bits: f64,
    pub q_s_bits: f64,
    pub q_r_bits: f64,
    /// Effective switched capacitance kappa, J*s^2/cycle^3.
    pub kappa: f64,
    /// Compute duty fraction a in [0, 1].
    pub a_frac: f64,
    pub k_retry: u32,
    /// Weights of the tracking-capacity blend; must sum to 1.
    pub omega1: f64,
    pub omega2: f64,
    /// Fixed scheduling probability override; derived from con scores if unset.
    pub phi_fixed: Option<f64>,
    /// Capacity threshold for constraint C3.
    pub phi_min: f64,
    /// Per-node per-period energy cap E_max (constraint C2), joules.
    pub e_max_period_j: f64,
    /// Scheduling period gamma in ticks.
    pub period_ticks: u64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            p0_sleep: 0.1,
            eta_w: 2.0,
            check_rate: 0.6,
            varpi_v: 1.5,
            eps_elec: 50.0e-9,
            eps_amp: 1.0e-8,
            q_t_bits: 1000.0,
            q_s_bits: 1000.0,
            q_r_bits: 10000.0,
            kappa: 1.0e-26,
            a_frac: 1.0,
            k_retry: 1,
            omega1: 0.8,
            omega2: 0.2,
            phi_fixed: None,
            phi_min: 0.3,
            e_max_period_j: 5.0,
            period_ticks: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// MAD rejection threshold kappa_f for data fusion.
    pub kappa_f: f64,
    /// AR predictor order k.
    pub predictor_order: usize,
    /// Forecast horizon h in ticks.
    pub predictor_horizon: usize,
    /// Ratio of historical to prospective data in the fit window (2:1 or 3:1).
    pub history_ratio: usize,
    /// Initial diagonal of the EKF covariance.
    pub init_cov: f64,
    /// Use the innovation covariance exactly as printed (no +R term).
    pub strict_paper_s: bool,
    /// Zero the additive process noise in the covariance prediction.
    pub strict_paper_q: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            kappa_f: 3.0,
            predictor_order: 2,
            predictor_horizon: 3,
            history_ratio: 2,
            init_cov: 100.0,
            strict_paper_s: false,
            strict_paper_q: false,
        }
    }
}

/// Encoding of the Kalman gain matrix as a scalar state feature.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum GainEncoding {
    Frobenius,
    Trace,
    DiagonalSum,
}

/// How predictor forecasts enter the observation vector.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ForecastMode {
    /// Forecast features appended next to the filtered position.
    Augment,
    /// Forecast features stand in for the filtered position.
    Replace,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Number of nearest candidate sensors exposed to the action space.
    pub k_candidates: usize,
    /// Activation budget B_act: at most this many candidates per action.
    pub act_budget: usize,
    /// Reward weights; must sum to 1.
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    /// Per-step energy normalization bound, joules. 0 selects the worst case
    /// of the whole fleet in Work mode.
    pub energy_norm_j: f64,
    /// Tracking-error normalization bound, meters. 0 selects the area diagonal.
    pub error_norm_m: f64,
    pub gain_encoding: GainEncoding,
    pub gain_norm: f64,
    /// Minimum count of capable measuring nodes required by constraint C3.
    pub accuracy_min_nodes: usize,
    /// Hard cap on the enumerated action count.
    pub action_cap: usize,
    /// Enable MN/server collaborative computing. Disabled for the
    /// non-cooperative baseline: the whole task runs at the server.
    pub cooperative: bool,
    /// Enable the trajectory predictor (off for the plain DQN baseline).
    pub predictor_enabled: bool,
    pub forecast_mode: ForecastMode,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            k_candidates: 6,
            act_budget: 4,
            k1: 0.4,
            k2: 0.4,
            k3: 0.2,
            energy_norm_j: 15.0,
            error_norm_m: 12.0,
            gain_encoding: GainEncoding::Frobenius,
            gain_norm: 10.0,
            accuracy_min_nodes: 2,
            action_cap: 4096,
            cooperative: true,
            predictor_enabled: true,
            forecast_mode: ForecastMode::Augment,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    /// MLP gradient step size.
    pub learning_rate: f64,
    /// Discount factor of the reward function.
    pub discount_gamma: f64,
    pub batch_size: usize,
    pub memory_capacity: usize,
    /// Target-network sync interval N, in update steps.
    pub target_sync: u64,
    /// Training episodes W.
    pub episodes: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of total training steps over which epsilon decays.
    pub eps_decay_frac: f64,
    /// Bound on the predictor pre-training loop (ticks).
    pub pretrain_rounds: usize,
    /// Episodes between checkpoint evaluations during training; the network
    /// with the best greedy evaluation score is the one kept. 0 disables
    /// selection and keeps the final network.
    pub ckpt_every: usize,
    /// Greedy episodes per checkpoint evaluation.
    pub ckpt_episodes: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            learning_rate: 0.01,
            discount_gamma: 0.9,
            batch_size: 32,
            memory_capacity: 500,
            target_sync: 200,
            episodes: 150,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_frac: 0.5,
            pretrain_rounds: 1000,
            ckpt_every: 50,
            ckpt_episodes: 3,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub world: WorldConfig,
    pub radio: RadioConfig,
    pub energy: EnergyConfig,
    pub tracker: TrackerConfig,
    pub env: EnvConfig,
    pub agent: AgentConfig,
}

impl SimConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SimConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s)
    }

    /// Effective per-step energy normalization bound.
    pub fn energy_norm(&self) -> f64 {
        if self.env.energy_norm_j > 0.0 {
            self.env.energy_norm_j
        } else {
            let n = (self.world.num_sensors + self.world.num_mobiles) as f64;
            n * self.world.mobile_speed_mps * self.world.tick_s * self.energy.varpi_v
        }
    }

    /// Effective tracking-error normalization bound.
    pub fn error_norm(&self) -> f64 {
        if self.env.error_norm_m > 0.0 {
            self.env.error_norm_m
        } else {
            self.world.side_m * std::f64::consts::SQRT_2
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.world;
        if !is_finite_pos(w.side_m) {
            return Err(Error::config("world.side_m", "must be > 0"));
        }
        if w.num_sensors == 0 {
            return Err(Error::config("world.num_sensors", "must be > 0"));
        }
        if !is_finite_pos(w.sensor_battery_j) || !is_finite_pos(w.mobile_battery_j) {
            return Err(Error::config("world.*_battery_j", "must be > 0"));
        }
        if !is_finite_pos(w.sense_range_m) || !is_finite_pos(w.comm_range_m) {
            return Err(Error::config("world.*_range_m", "must be > 0"));
        }
        if !is_finite_pos(w.tick_s) {
            return Err(Error::config("world.tick_s", "must be > 0"));
        }
        if w.max_ticks == 0 {
            return Err(Error::config("world.max_ticks", "must be > 0"));
        }
        if !is_finite_pos(w.mobile_cpu_freq) {
            return Err(Error::config("world.mobile_cpu_freq", "must be > 0"));
        }
        for (i, s) in w.servers.iter().enumerate() {
            if !is_finite_pos(s.cpu_freq) {
                return Err(Error::config(&format!("world.servers[{i}].cpu_freq"), "must be > 0"));
            }
        }
        let t = &w.target;
        match t.init {
            TargetInit::Fixed { x, y } => {
                if !x.is_finite() || !y.is_finite() {
                    return Err(Error::config("world.target.init", "coordinates must be finite"));
                }
            }
            TargetInit::Ranged { min, max } => {
                if !min.is_finite() || !max.is_finite() || min > max {
                    return Err(Error::config("world.target.init", "needs finite min <= max"));
                }
            }
            TargetInit::RangedXy { xmin, xmax, ymin, ymax } => {
                if ![xmin, xmax, ymin, ymax].iter().all(|v| v.is_finite())
                    || xmin > xmax
                    || ymin > ymax
                {
                    return Err(Error::config(
                        "world.target.init",
                        "needs finite xmin <= xmax and ymin <= ymax",
                    ));
                }
            }
        }
        if !is_finite_pos(t.max_speed_mps) {
            return Err(Error::config("world.target.max_speed_mps", "must be > 0"));
        }
        if t.pos_noise_sigma < 0.0 || t.vel_noise_sigma < 0.0 {
            return Err(Error::config("world.target.*_noise_sigma", "must be >= 0"));
        }
        if !is_finite_pos(t.source_power_w) {
            return Err(Error::config("world.target.source_power_w", "must be > 0"));
        }

        let r = &self.radio;
        for (name, v) in [
            ("radio.bandwidth_hz", r.bandwidth_hz),
            ("radio.gain_g0", r.gain_g0),
            ("radio.noise_w", r.noise_w),
            ("radio.task_bits", r.task_bits),
            ("radio.deadline_s", r.deadline_s),
            ("radio.cycles_per_bit", r.cycles_per_bit),
            ("radio.backhaul_bps", r.backhaul_bps),
        ] {
            if !is_finite_pos(v) {
                return Err(Error::config(name, "must be > 0"));
            }
        }
        if !(0.0..=1.0).contains(&r.split_eta) {
            return Err(Error::config("radio.split_eta", "must be in [0, 1]"));
        }
        if r.track_move_s < 0.0 {
            return Err(Error::config("radio.track_move_s", "must be >= 0"));
        }
        if !r.relay_wake_s.is_finite() || r.relay_wake_s < 0.0 {
            return Err(Error::config("radio.relay_wake_s", "must be >= 0"));
        }

        let e = &self.energy;
        if e.eta_w <= 1.0 {
            return Err(Error::config("energy.eta_w", "must be > 1"));
        }
        if !(0.0..=1.0).contains(&e.a_frac) {
            return Err(Error::config("energy.a_frac", "must be in [0, 1]"));
        }
        if (e.omega1 + e.omega2 - 1.0).abs() > 1e-12 || e.omega1 < 0.0 || e.omega2 < 0.0 {
            return Err(Error::config("energy.omega1/omega2", "must be >= 0 and sum to 1"));
        }
        if let Some(phi) = e.phi_fixed {
            if !(0.0..1.0).contains(&phi) {
                return Err(Error::config("energy.phi_fixed", "must be in [0, 1)"));
            }
        }
        if e.k_retry == 0 {
            return Err(Error::config("energy.k_retry", "must be >= 1"));
        }
        if e.period_ticks == 0 {
            return Err(Error::config("energy.period_ticks", "must be >= 1"));
        }

        let tr = &self.tracker;
        if tr.predictor_order == 0 {
            return Err(Error::config("tracker.predictor_order", "must be >= 1"));
        }
        if tr.history_ratio == 0 {
            return Err(Error::config("tracker.history_ratio", "must be >= 1"));
        }
        if tr.kappa_f <= 0.0 {
            return Err(Error::config("tracker.kappa_f", "must be > 0"));
        }

        let v = &self.env;
        if v.k_candidates == 0 {
            return Err(Error::config("env.k_candidates", "must be >= 1"));
        }
        if v.act_budget > v.k_candidates {
            return Err(Error::config("env.act_budget", "must be <= env.k_candidates"));
        }
        if (v.k1 + v.k2 + v.k3 - 1.0).abs() > 1e-12 || v.k1 < 0.0 || v.k2 < 0.0 || v.k3 < 0.0 {
            return Err(Error::config("env.k1/k2/k3", "must be >= 0 and sum to 1"));
        }

        let a = &self.agent;
        if !(0.0 < a.discount_gamma && a.discount_gamma < 1.0) {
            return Err(Error::config("agent.discount_gamma", "must be in (0, 1)"));
        }
        if a.batch_size == 0 || a.batch_size > a.memory_capacity {
            return Err(Error::config("agent.batch_size", "must be in [1, memory_capacity]"));
        }
        if a.target_sync == 0 {
            return Err(Error::config("agent.target_sync", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&a.eps_start) || !(0.0..=1.0).contains(&a.eps_end) {
            return Err(Error::config("agent.eps_start/eps_end", "must be in [0, 1]"));
        }
        if a.eps_end > a.eps_start {
            return Err(Error::config("agent.eps_end", "must be <= eps_start"));
        }
        if !is_finite_pos(a.learning_rate) {
            return Err(Error::config("agent.learning_rate", "must be > 0"));
        }
        if a.ckpt_every > 0 && a.ckpt_episodes == 0 {
            return Err(Error::config("agent.ckpt_episodes", "must be >= 1 when ckpt_every > 0"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        SimConfig::default().validate().unwrap();
    }

    #[test]
    fn empty_toml_gives_defaults() {
        let cfg = SimConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.world.num_sensors, 56);
        assert_eq!(cfg.world.num_mobiles, 6);
        assert_eq!(cfg.world.side_m, 200.0);
        assert_eq!(cfg.agent.memory_capacity, 500);
        assert_eq!(cfg.agent.batch_size, 32);
        assert_eq!(cfg.agent.discount_gamma, 0.9);
    }

    #[test]
    fn invalid_field_names_the_field() {
        let mut cfg = SimConfig::default();
        cfg.energy.eta_w = 0.5;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("energy.eta_w"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn toml_overrides_apply() {
        let cfg = SimConfig::from_toml_str(
            "[world]\nnum_sensors = 10\n[env]\nk_candidates = 3\nact_budget = 1\n",
        )
        .unwrap();
        assert_eq!(cfg.world.num_sensors, 10);
        assert_eq!(cfg.env.k_candidates, 3);
    }

    #[test]
    fn ranged_init_roundtrips() {
        let cfg = SimConfig::from_toml_str(
            "[world.target]\ninit = { kind = \"ranged\", min = 0.0, max = 150.0 }\n",
        )
        .unwrap();
        assert_eq!(cfg.world.target.init, TargetInit::Ranged { min: 0.0, max: 150.0 });
    }
}

//! Physical scenario: node deployment, target kinematics, and sensing.

use nalgebra::{Matrix4, Vector4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{TargetInit, WorldConfig};
use crate::energy::NodeMode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Euclidean distance between two points.
pub fn distance(a: Position, b: Position) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetState {
    pub pos: Position,
    pub vel: (f64, f64),
}

impl TargetState {
    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.pos.x, self.pos.y, self.vel.0, self.vel.1)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self {
            pos: Position::new(v[0], v[1]),
            vel: (v[2], v[3]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SensorNode {
    pub id: usize,
    pub pos: Position,
    pub battery: f64,
    pub mode: NodeMode,
    pub sense_range: f64,
    pub comm_range: f64,
    pub tx_power: f64,
}

impl SensorNode {
    pub fn alive(&self) -> bool {
        self.battery > 0.0
    }
}

#[derive(Debug, Clone)]
pub struct MobileNode {
    pub id: usize,
    pub pos: Position,
    pub battery: f64,
    pub mode: NodeMode,
    pub speed: f64,
    pub cpu_freq: f64,
}

impl MobileNode {
    pub fn alive(&self) -> bool {
        self.battery > 0.0
    }
}

#[derive(Debug, Clone)]
pub struct EdgeServer {
    pub id: usize,
    pub pos: Position,
    pub cpu_freq: f64,
}

/// Full physical state at one tick. Plain value; all mutation flows through
/// the step functions with an explicit rng.
#[derive(Debug, Clone)]
pub struct WorldState {
    pub side: f64,
    pub sensors: Vec<SensorNode>,
    pub mobiles: Vec<MobileNode>,
    pub servers: Vec<EdgeServer>,
    pub target: TargetState,
}

impl WorldState {
    pub fn target_in_area(&self) -> bool {
        let p = self.target.pos;
        p.x >= 0.0 && p.x <= self.side && p.y >= 0.0 && p.y <= self.side
    }

    /// Total remaining battery across sensors and mobiles.
    pub fn total_battery(&self) -> f64 {
        self.sensors.iter().map(|s| s.battery).sum::<f64>()
            + self.mobiles.iter().map(|m| m.battery).sum::<f64>()
    }
}

/// Constant-velocity transfer matrix for state (x, y, vx, vy).
pub fn cv_transfer_matrix(dt: f64) -> Matrix4<f64> {
    Matrix4::new(
        1.0, 0.0, dt, 0.0, //
        0.0, 1.0, 0.0, dt, //
        0.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    )
}

/// Additive Gaussian process noise on the four state components.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec {
    pub sigma_pos: f64,
    pub sigma_vel: f64,
}

impl NoiseSpec {
    pub fn covariance(&self) -> Matrix4<f64> {
        Matrix4::from_diagonal(&Vector4::new(
            self.sigma_pos * self.sigma_pos,
            self.sigma_pos * self.sigma_pos,
            self.sigma_vel * self.sigma_vel,
            self.sigma_vel * self.sigma_vel,
        ))
    }
}

fn gaussian(rng: &mut impl Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    // Box-Muller; two uniforms per draw keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// One motion step: x' = F x + w, with the speed magnitude clamped to
/// `max_speed`.
pub fn step_target(
    state: &TargetState,
    transfer: &Matrix4<f64>,
    noise: &NoiseSpec,
    max_speed: f64,
    rng: &mut impl Rng,
) -> TargetState {
    let mut v = transfer * state.as_vector();
    v[0] += gaussian(rng, noise.sigma_pos);
    v[1] += gaussian(rng, noise.sigma_pos);
    v[2] += gaussian(rng, noise.sigma_vel);
    v[3] += gaussian(rng, noise.sigma_vel);
    let speed = (v[2] * v[2] + v[3] * v[3]).sqrt();
    if speed > max_speed && speed > 0.0 {
        let scale = max_speed / speed;
        v[2] *= scale;
        v[3] *= scale;
    }
    TargetState::from_vector(&v)
}

/// Noise-free amplitude at distance `d`: sqrt(P / (1 + d^2)).
pub fn amplitude(source_power: f64, dist: f64) -> f64 {
    (source_power / (1.0 + dist * dist)).sqrt()
}

/// Amplitude measurement from one sensor, or None when the target is out of
/// the sensing range. Dead or sleeping sensors never measure.
pub fn measure(
    sensor: &SensorNode,
    target_pos: Position,
    source_power: f64,
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Option<f64> {
    if !sensor.alive() || sensor.mode == NodeMode::Sleep {
        return None;
    }
    let d = distance(sensor.pos, target_pos);
    if d > sensor.sense_range {
        return None;
    }
    Some(amplitude(source_power, d) + gaussian(rng, noise_sigma))
}

fn initial_target(cfg: &WorldConfig, rng: &mut impl Rng) -> TargetState {
    let pos = match cfg.target.init {
        TargetInit::Fixed { x, y } => Position::new(x, y),
        TargetInit::Ranged { min, max } => {
            Position::new(rng.gen_range(min..=max), rng.gen_range(min..=max))
        }
        TargetInit::RangedXy { xmin, xmax, ymin, ymax } => {
            Position::new(rng.gen_range(xmin..=xmax), rng.gen_range(ymin..=ymax))
        }
    };
    let heading = if cfg.target.random_heading {
        rng.gen_range(0.0..std::f64::consts::TAU)
    } else {
        cfg.target.init_heading_rad
    };
    let speed = cfg.target.init_speed_mps.min(cfg.target.max_speed_mps);
    TargetState {
        pos,
        vel: (speed * heading.cos(), speed * heading.sin()),
    }
}

/// Deploys the scenario. Identical (config, seed) pairs produce bit-identical
/// world states.
pub fn init_world(cfg: &WorldConfig, seed: u64) -> Result<WorldState> {
    if cfg.num_sensors == 0 {
        return Err(Error::config("world.num_sensors", "must be > 0"));
    }
    if cfg.side_m <= 0.0 {
        return Err(Error::config("world.side_m", "must be > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let sensors = (0..cfg.num_sensors)
        .map(|id| SensorNode {
            id,
            pos: Position::new(rng.gen_range(0.0..cfg.side_m), rng.gen_range(0.0..cfg.side_m)),
            battery: cfg.sensor_battery_j,
            mode: NodeMode::Sleep,
            sense_range: cfg.sense_range_m,
            comm_range: cfg.comm_range_m,
            tx_power: cfg.sensor_tx_power_w,
        })
        .collect();

    let mobiles = (0..cfg.num_mobiles)
        .map(|id| MobileNode {
            id,
            pos: Position::new(rng.gen_range(0.0..cfg.side_m), rng.gen_range(0.0..cfg.side_m)),
            battery: cfg.mobile_battery_j,
            mode: NodeMode::Sleep,
            speed: cfg.mobile_speed_mps,
            cpu_freq: cfg.mobile_cpu_freq,
        })
        .collect();

    let servers = cfg
        .servers
        .iter()
        .enumerate()
        .map(|(id, s)| EdgeServer {
            id,
            pos: Position::new(s.x, s.y),
            cpu_freq: s.cpu_freq,
        })
        .collect();

    let target = initial_target(cfg, &mut rng);

    Ok(WorldState {
        side: cfg.side_m,
        sensors,
        mobiles,
        servers,
        target,
    })
}

/// Re-draws the target only, for per-episode variation over a fixed layout.
pub fn reinit_target(cfg: &WorldConfig, world: &mut WorldState, rng: &mut impl Rng) {
    world.target = initial_target(cfg, rng);
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn table2() -> WorldConfig {
        WorldConfig::default()
    }

    #[test]
    fn init_world_table2_counts_and_target() {
        let w = init_world(&table2(), 7).unwrap();
        assert_eq!(w.sensors.len(), 56);
        assert_eq!(w.mobiles.len(), 6);
        assert_eq!(w.side, 200.0);
        assert_eq!(w.target.pos, Position::new(0.0, 50.0));
        for s in &w.sensors {
            assert!(s.pos.x >= 0.0 && s.pos.x <= 200.0);
            assert!(s.pos.y >= 0.0 && s.pos.y <= 200.0);
        }
    }

    #[test]
    fn init_world_degenerate_scenario() {
        let mut cfg = table2();
        cfg.num_sensors = 1;
        cfg.num_mobiles = 0;
        cfg.side_m = 1.0;
        let w = init_world(&cfg, 0).unwrap();
        assert_eq!(w.sensors.len(), 1);
        assert!(w.sensors[0].pos.x <= 1.0 && w.sensors[0].pos.y <= 1.0);
    }

    #[test]
    fn init_world_determinism_contract() {
        let cfg = table2();
        let a = init_world(&cfg, 1).unwrap();
        let b = init_world(&cfg, 1).unwrap();
        let c = init_world(&cfg, 2).unwrap();
        for (x, y) in a.sensors.iter().zip(&b.sensors) {
            assert_eq!(x.pos, y.pos);
        }
        assert!(a.sensors.iter().zip(&c.sensors).any(|(x, y)| x.pos != y.pos));
    }

    #[test]
    fn init_world_invalid_config_names_field() {
        let mut cfg = table2();
        cfg.side_m = 0.0;
        let err = init_world(&cfg, 0).unwrap_err();
        assert!(err.to_string().contains("side_m"));
    }

    #[test]
    fn step_target_identity_no_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = TargetState { pos: Position::new(3.0, 4.0), vel: (0.5, -0.5) };
        let noise = NoiseSpec { sigma_pos: 0.0, sigma_vel: 0.0 };
        let out = step_target(&s, &Matrix4::identity(), &noise, 10.0, &mut rng);
        assert_eq!(out, s);
    }

    #[test]
    fn step_target_exact_kinematics() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = TargetState { pos: Position::new(0.0, 0.0), vel: (1.0, 0.0) };
        let noise = NoiseSpec { sigma_pos: 0.0, sigma_vel: 0.0 };
        let out = step_target(&s, &cv_transfer_matrix(1.0), &noise, 10.0, &mut rng);
        assert_relative_eq!(out.pos.x, 1.0);
        assert_relative_eq!(out.pos.y, 0.0);
    }

    #[test]
    fn step_target_zero_noise_iterates_transfer_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = cv_transfer_matrix(0.5);
        let noise = NoiseSpec { sigma_pos: 0.0, sigma_vel: 0.0 };
        let mut s = TargetState { pos: Position::new(1.0, 2.0), vel: (0.3, -0.4) };
        let k = 5;
        for _ in 0..k {
            s = step_target(&s, &f, &noise, 10.0, &mut rng);
        }
        let mut expect = TargetState { pos: Position::new(1.0, 2.0), vel: (0.3, -0.4) }.as_vector();
        for _ in 0..k {
            expect = f * expect;
        }
        assert_relative_eq!(s.as_vector(), expect, epsilon = 1e-12);
    }

    #[test]
    fn step_target_noise_mean_is_centered() {
        // Monte-Carlo oracle: mean of the injected noise over 1e5 draws must
        // sit within 3*sigma/sqrt(n) of zero.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let sigma = 1.0;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += gaussian(&mut rng, sigma);
        }
        let mean = sum / n as f64;
        assert!(mean.abs() < 3.0 * sigma / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn step_target_clamps_speed() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = TargetState { pos: Position::new(0.0, 0.0), vel: (3.0, 4.0) };
        let noise = NoiseSpec { sigma_pos: 0.0, sigma_vel: 0.0 };
        let out = step_target(&s, &Matrix4::identity(), &noise, 1.0, &mut rng);
        let speed = (out.vel.0.powi(2) + out.vel.1.powi(2)).sqrt();
        assert_relative_eq!(speed, 1.0, max_relative = 1e-12);
    }

    fn test_sensor(pos: Position) -> SensorNode {
        SensorNode {
            id: 0,
            pos,
            battery: 40.0,
            mode: NodeMode::Idle,
            sense_range: 30.0,
            comm_range: 50.0,
            tx_power: 0.5,
        }
    }

    #[test]
    fn measure_hand_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = test_sensor(Position::new(0.0, 0.0));
        let z = measure(&s, Position::new(0.0, 0.0), 4.0, 0.0, &mut rng).unwrap();
        assert_relative_eq!(z, 2.0);
        let z = measure(&s, Position::new(1.0, 0.0), 4.0, 0.0, &mut rng).unwrap();
        assert_relative_eq!(z, 2.0f64.sqrt(), max_relative = 1e-9);
    }

    #[test]
    fn measure_range_gate_and_dead_node() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = test_sensor(Position::new(0.0, 0.0));
        assert!(measure(&s, Position::new(100.0, 0.0), 4.0, 0.0, &mut rng).is_none());
        let mut dead = test_sensor(Position::new(0.0, 0.0));
        dead.battery = 0.0;
        assert!(measure(&dead, Position::new(1.0, 0.0), 4.0, 0.0, &mut rng).is_none());
        let mut asleep = test_sensor(Position::new(0.0, 0.0));
        asleep.mode = NodeMode::Sleep;
        assert!(measure(&asleep, Position::new(1.0, 0.0), 4.0, 0.0, &mut rng).is_none());
    }

    #[test]
    fn distance_hand_values() {
        assert_relative_eq!(distance(Position::new(0.0, 0.0), Position::new(3.0, 4.0)), 5.0);
        assert_eq!(distance(Position::new(2.0, 2.0), Position::new(2.0, 2.0)), 0.0);
    }

    proptest! {
        #[test]
        fn distance_is_symmetric(ax in -1e3..1e3f64, ay in -1e3..1e3f64,
                                 bx in -1e3..1e3f64, by in -1e3..1e3f64) {
            let a = Position::new(ax, ay);
            let b = Position::new(bx, by);
            prop_assert_eq!(distance(a, b).to_bits(), distance(b, a).to_bits());
            prop_assert!(distance(a, b) >= 0.0);
        }

        #[test]
        fn amplitude_decreases_with_distance(p in 0.1..1e4f64, d1 in 0.0..100.0f64, delta in 0.01..50.0f64) {
            prop_assert!(amplitude(p, d1 + delta) < amplitude(p, d1));
        }
    }
}

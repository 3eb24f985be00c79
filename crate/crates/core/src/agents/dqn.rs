//! Deep Q-learning: epsilon-greedy exploration, experience replay, and a
//! periodically synchronized target network.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agents::net::QNet;
use crate::agents::replay::{ReplayMemory, Transition};
use crate::config::AgentConfig;
use crate::error::{Error, Result};

/// Loss level treated as divergent when sustained.
const DIVERGE_LOSS: f64 = 1e6;
/// Consecutive divergent updates tolerated before aborting.
const DIVERGE_RUN: u32 = 100;

/// Stream separator so the learner's rng never aliases the environment's.
const LEARNER_SEED_SALT: u64 = 0x51_7c_c1_b7_27_22_0a_95;
const CKPT_SEED_SALT: u64 = 0x2b_99_2d_df_a2_32_49_d6;
/// Episode-id block for checkpoint-selection scoring, disjoint from both the
/// training episodes and the final-evaluation block.
pub const CKPT_EPISODE_BASE: u64 = 1 << 19;

/// Per-tick scalars reported by an environment step, consumed by training
/// logs and the experiment harness.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepMetrics {
    /// Fleet energy drained this tick, joules.
    pub energy_j: f64,
    /// Position error of the tracker against ground truth, meters.
    pub er_m: f64,
    /// Squared position error, m^2.
    pub sq_err_m2: f64,
    /// Sum of task latencies issued this tick, seconds.
    pub t_alpha_sum_s: f64,
    pub tasks: u32,
    pub deadline_hits: u32,
    /// Any scheduling constraint violated this tick.
    pub q_violation: bool,
    pub n_activated: u32,
    pub n_measured: u32,
    /// The trajectory predictor was (re)fitted this tick.
    pub predictor_fit: bool,
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct EnvStep {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub metrics: StepMetrics,
}

/// Minimal control interface the learner needs. Implemented by the full
/// simulator and by toy MDPs in tests.
pub trait Environment {
    /// Starts episode `episode` and returns the initial observation.
    fn reset(&mut self, episode: u64) -> Vec<f64>;
    fn step(&mut self, action: usize) -> Result<EnvStep>;
    fn action_count(&self) -> usize;
    fn obs_dim(&self) -> usize;
    /// Hard per-episode step bound.
    fn max_steps(&self) -> u64;
    /// Optional model warm-up before training; returns how many model fits
    /// it performed.
    fn pretrain_predictor(&mut self, _rounds: usize) -> usize {
        0
    }
}

/// Exploration rate after `step` of `decay_steps`: exponential interpolation
/// from `start` down to `end`, then flat.
pub fn epsilon_at(step: u64, decay_steps: u64, start: f64, end: f64) -> f64 {
    if start <= end || decay_steps == 0 {
        return end;
    }
    let frac = (step as f64 / decay_steps as f64).min(1.0);
    if end > 0.0 {
        start * (end / start).powf(frac)
    } else {
        start * (1.0 - frac)
    }
}

/// Epsilon-greedy action choice; greedy ties break toward the lowest index.
pub fn select_action(
    net: &QNet,
    obs: &[f64],
    epsilon: f64,
    n_actions: usize,
    rng: &mut impl Rng,
) -> Result<usize> {
    if epsilon > 0.0 && rng.gen_range(0.0..1.0) < epsilon {
        return Ok(rng.gen_range(0..n_actions));
    }
    let q = net.forward(obs)?;
    let mut best = 0;
    for (i, v) in q.iter().enumerate() {
        if *v > q[best] {
            best = i;
        }
    }
    Ok(best)
}

/// One-step TD target r + gamma * max_a Q(s', a), truncated at terminals.
pub fn td_target(reward: f64, done: bool, gamma: f64, next_q: &[f64]) -> f64 {
    if done {
        reward
    } else {
        let best = next_q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        reward + gamma * best
    }
}

/// Online network, target network, and replay memory bundled with the
/// update/sync bookkeeping.
pub struct DqnLearner {
    pub net: QNet,
    pub target: QNet,
    pub memory: ReplayMemory,
    cfg: AgentConfig,
    pub updates: u64,
    pub syncs: u64,
    diverge_run: u32,
}

impl DqnLearner {
    pub fn new(obs_dim: usize, n_actions: usize, cfg: &AgentConfig, rng: &mut impl Rng) -> Self {
        let mut sizes = Vec::with_capacity(cfg.hidden.len() + 2);
        sizes.push(obs_dim);
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(n_actions);
        let net = QNet::new(&sizes, rng);
        let target = net.clone();
        Self {
            net,
            target,
            memory: ReplayMemory::new(cfg.memory_capacity),
            cfg: cfg.clone(),
            updates: 0,
            syncs: 0,
            diverge_run: 0,
        }
    }

    pub fn record(&mut self, t: Transition) {
        self.memory.push(t);
    }

    /// One replay update if the memory already holds a full batch. Returns the
    /// pre-step loss when an update happened.
    pub fn learn(&mut self, rng: &mut impl Rng) -> Result<Option<f64>> {
        if self.memory.len() < self.cfg.batch_size {
            return Ok(None);
        }
        let batch = self.memory.sample(self.cfg.batch_size, rng);
        let mut samples: Vec<(&[f64], usize, f64)> = Vec::with_capacity(batch.len());
        for t in &batch {
            let next_q = self.target.forward(&t.next_state)?;
            let y = td_target(t.reward, t.done, self.cfg.discount_gamma, &next_q);
            samples.push((t.state.as_slice(), t.action, y));
        }
        let loss = self.net.sgd_step(&samples, self.cfg.learning_rate)?;
        self.updates += 1;
        if self.updates % self.cfg.target_sync == 0 {
            self.target = self.net.clone();
            self.syncs += 1;
        }
        if loss > DIVERGE_LOSS {
            self.diverge_run += 1;
            if self.diverge_run >= DIVERGE_RUN {
                return Err(Error::Diverged(format!(
                    "loss stayed above {DIVERGE_LOSS:.0} for {DIVERGE_RUN} consecutive updates"
                )));
            }
        } else {
            self.diverge_run = 0;
        }
        Ok(Some(loss))
    }
}

/// Per-episode training/evaluation log line.
#[derive(Debug, Clone, Default)]
pub struct EpisodeStats {
    pub episode: u64,
    pub steps: u64,
    pub total_reward: f64,
    /// Fleet energy drained over the episode, joules.
    pub energy_j: f64,
    /// Mean squared tracking error over the episode, m^2.
    pub mse_m2: f64,
    pub mean_er_m: f64,
    pub tasks: u64,
    pub deadline_hits: u64,
    /// Mean per-task system latency, seconds (0 when no tasks ran).
    pub mean_t_alpha_s: f64,
    pub q_violations: u64,
    pub mean_loss: f64,
    pub epsilon: f64,
    pub predictor_fits: u64,
}

impl EpisodeStats {
    pub fn deadline_rate(&self) -> f64 {
        if self.tasks == 0 {
            1.0
        } else {
            self.deadline_hits as f64 / self.tasks as f64
        }
    }
}

/// Streaming accumulator building an [`EpisodeStats`] from step metrics.
#[derive(Debug, Clone, Default)]
pub struct EpisodeAccumulator {
    stats: EpisodeStats,
    sq_err_sum: f64,
    er_sum: f64,
    t_alpha_sum: f64,
    loss_sum: f64,
    loss_count: u64,
}

impl EpisodeAccumulator {
    pub fn new(episode: u64) -> Self {
        let mut a = Self::default();
        a.stats.episode = episode;
        a
    }

    pub fn push(&mut self, reward: f64, m: &StepMetrics) {
        self.stats.steps += 1;
        self.stats.total_reward += reward;
        self.stats.energy_j += m.energy_j;
        self.sq_err_sum += m.sq_err_m2;
        self.er_sum += m.er_m;
        self.t_alpha_sum += m.t_alpha_sum_s;
        self.stats.tasks += m.tasks as u64;
        self.stats.deadline_hits += m.deadline_hits as u64;
        if m.q_violation {
            self.stats.q_violations += 1;
        }
        if m.predictor_fit {
            self.stats.predictor_fits += 1;
        }
    }

    pub fn push_loss(&mut self, loss: f64) {
        self.loss_sum += loss;
        self.loss_count += 1;
    }

    pub fn finish(mut self, epsilon: f64) -> EpisodeStats {
        let n = self.stats.steps.max(1) as f64;
        self.stats.mse_m2 = self.sq_err_sum / n;
        self.stats.mean_er_m = self.er_sum / n;
        self.stats.mean_t_alpha_s = if self.stats.tasks > 0 {
            self.t_alpha_sum / self.stats.tasks as f64
        } else {
            0.0
        };
        self.stats.mean_loss = if self.loss_count > 0 {
            self.loss_sum / self.loss_count as f64
        } else {
            0.0
        };
        self.stats.epsilon = epsilon;
        self.stats
    }
}

/// Output of a training run.
pub struct TrainResult {
    pub net: QNet,
    pub episodes: Vec<EpisodeStats>,
    pub predictor_fits: usize,
    pub updates: u64,
    pub syncs: u64,
    /// Mean greedy return of the selected checkpoint, if selection ran.
    pub selected_score: Option<f64>,
}

/// Mean greedy return over a fixed block of held-out episodes; the
/// checkpoint-selection score.
fn greedy_score(
    env: &mut dyn Environment,
    net: &QNet,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..episodes as u64 {
        let mut obs = env.reset(CKPT_EPISODE_BASE + i);
        loop {
            let action = select_action(net, &obs, 0.0, env.action_count(), rng)?;
            let step = env.step(action)?;
            total += step.reward;
            obs = step.obs;
            if step.done {
                break;
            }
        }
    }
    Ok(total / episodes as f64)
}

/// Full training loop: optional predictor warm-up, then `cfg.episodes` of
/// epsilon-greedy interaction with replay updates after every step. Every
/// `cfg.ckpt_every` episodes (and once at the end) the current network is
/// scored greedily on a fixed block of held-out episodes, and the
/// best-scoring checkpoint is the one returned; plain value-based learners
/// can drift away from a converged policy when training continues past
/// convergence with a small replay memory, and selection makes the outcome
/// monotone in training length.
pub fn train_dqn(env: &mut dyn Environment, cfg: &AgentConfig, seed: u64) -> Result<TrainResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ LEARNER_SEED_SALT);
    let mut ckpt_rng = ChaCha8Rng::seed_from_u64(seed ^ CKPT_SEED_SALT);
    let predictor_fits = env.pretrain_predictor(cfg.pretrain_rounds);
    let mut learner = DqnLearner::new(env.obs_dim(), env.action_count(), cfg, &mut rng);

    let total_steps = cfg.episodes as u64 * env.max_steps();
    let decay_steps = ((total_steps as f64 * cfg.eps_decay_frac) as u64).max(1);

    let mut episodes = Vec::with_capacity(cfg.episodes);
    let mut global_step = 0u64;
    let mut best: Option<(f64, QNet)> = None;
    for ep in 0..cfg.episodes as u64 {
        let mut obs = env.reset(ep);
        let mut acc = EpisodeAccumulator::new(ep);
        loop {
            let eps = epsilon_at(global_step, decay_steps, cfg.eps_start, cfg.eps_end);
            let action = select_action(&learner.net, &obs, eps, env.action_count(), &mut rng)?;
            let step = env.step(action)?;
            acc.push(step.reward, &step.metrics);
            learner.record(Transition {
                state: obs,
                action,
                reward: step.reward,
                next_state: step.obs.clone(),
                done: step.done,
            });
            if let Some(loss) = learner.learn(&mut rng)? {
                acc.push_loss(loss);
            }
            obs = step.obs;
            global_step += 1;
            if step.done {
                break;
            }
        }
        let eps_now = epsilon_at(global_step, decay_steps, cfg.eps_start, cfg.eps_end);
        episodes.push(acc.finish(eps_now));

        let last = ep + 1 == cfg.episodes as u64;
        if cfg.ckpt_every > 0 && ((ep + 1) % cfg.ckpt_every as u64 == 0 || last) {
            let score = greedy_score(env, &learner.net, cfg.ckpt_episodes, &mut ckpt_rng)?;
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, learner.net.clone()));
            }
        }
    }

    let (selected_score, net) = match best {
        Some((score, net)) => (Some(score), net),
        None => (None, learner.net),
    };
    Ok(TrainResult {
        net,
        episodes,
        predictor_fits,
        updates: learner.updates,
        syncs: learner.syncs,
        selected_score,
    })
}

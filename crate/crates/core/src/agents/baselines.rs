//! The scheduling policies under comparison: the trained DRL scheduler, two
//! trained ablations, and two scripted baselines.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::agents::dqn::{select_action, EpisodeAccumulator, EpisodeStats};
use crate::agents::net::QNet;
use crate::config::SimConfig;
use crate::env::Sim;
use crate::error::{Error, Result};

/// Scheduling policy identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PolicyKind {
    /// The full learned scheduler: cooperative offloading + predictor.
    Ltdra,
    /// Learned, but without the trajectory predictor.
    PlainDqn,
    /// Learned, but all computation runs at the edge server.
    NonCooperative,
    /// Activates the highest-battery candidates, no learning.
    Greedy,
    /// Activates each sensor on a fair coin flip, no learning.
    Random,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Ltdra => "ltdra",
            PolicyKind::PlainDqn => "plain_dqn",
            PolicyKind::NonCooperative => "non_cooperative",
            PolicyKind::Greedy => "greedy",
            PolicyKind::Random => "random",
        }
    }

    pub fn all() -> [PolicyKind; 5] {
        [
            PolicyKind::Ltdra,
            PolicyKind::PlainDqn,
            PolicyKind::NonCooperative,
            PolicyKind::Greedy,
            PolicyKind::Random,
        ]
    }

    /// Whether the policy needs a training phase before evaluation.
    pub fn needs_training(self) -> bool {
        matches!(self, PolicyKind::Ltdra | PolicyKind::PlainDqn | PolicyKind::NonCooperative)
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::all()
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = PolicyKind::all().iter().map(|p| p.name()).collect();
                Error::config("policy", format!("unknown policy `{s}`; one of {names:?}"))
            })
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Applies the policy's scenario switches to a base configuration.
pub fn policy_config(base: &SimConfig, kind: PolicyKind) -> SimConfig {
    let mut cfg = base.clone();
    match kind {
        PolicyKind::NonCooperative => cfg.env.cooperative = false,
        PolicyKind::PlainDqn => cfg.env.predictor_enabled = false,
        _ => {}
    }
    cfg
}

/// Greedy baseline action: activate the `act_budget` candidates with the most
/// remaining battery, cooperative offload mode. Ties break toward the nearer
/// (lower-slot) candidate.
pub fn greedy_action(sim: &Sim) -> Result<usize> {
    let budget = sim.cfg().env.act_budget;
    let mut ranked: Vec<(f64, usize)> = sim
        .candidates()
        .iter()
        .enumerate()
        .map(|(slot, &id)| (sim.world().sensors[id].battery, slot))
        .collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut slots: Vec<usize> = ranked.into_iter().take(budget).map(|(_, s)| s).collect();
    // the action table never offers fewer slots than the accuracy floor; when
    // the candidate list itself is shorter, pad with empty slots (they map to
    // no sensor and are dropped at dispatch)
    let env = &sim.cfg().env;
    let floor = env.accuracy_min_nodes.min(budget).min(env.k_candidates);
    let mut next_free = sim.candidates().len();
    while slots.len() < floor && next_free < env.k_candidates {
        slots.push(next_free);
        next_free += 1;
    }
    sim.action_index_for(&slots, false)
        .ok_or_else(|| Error::Experiment("greedy activation set not in the action table".into()))
}

/// Random baseline activation: an independent fair coin per sensor across the
/// whole fleet, bypassing the candidate-restricted action space.
pub fn random_activation(sim: &Sim, rng: &mut impl Rng) -> Vec<usize> {
    (0..sim.world().sensors.len())
        .filter(|_| rng.gen_range(0.0..1.0) > 0.5)
        .collect()
}

/// Runs one greedy-evaluation episode under the given policy. Learned
/// policies act greedily through `net`; scripted ones ignore it.
pub fn run_episode(
    sim: &mut Sim,
    kind: PolicyKind,
    net: Option<&QNet>,
    episode: u64,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeStats> {
    let mut obs = sim.reset_episode(episode);
    let mut acc = EpisodeAccumulator::new(episode);
    loop {
        let step = match kind {
            PolicyKind::Ltdra | PolicyKind::PlainDqn | PolicyKind::NonCooperative => {
                let net = net.ok_or_else(|| {
                    Error::Experiment(format!("policy {} requires a trained network", kind))
                })?;
                let a = select_action(net, &obs, 0.0, sim.actions().len(), rng)?;
                sim.step_action(a)?
            }
            PolicyKind::Greedy => {
                let a = greedy_action(sim)?;
                sim.step_action(a)?
            }
            PolicyKind::Random => {
                let ids = random_activation(sim, rng);
                // the offload half of the action is drawn at random too:
                // direct-vs-relay, and which mobile node relays
                let direct = rng.gen_bool(0.5);
                let relay = if direct {
                    None
                } else {
                    Some(rng.gen_range(0..sim.world().mobiles.len()))
                };
                sim.step_scripted_relay(&ids, direct, relay)?
            }
        };
        acc.push(step.reward, &step.metrics);
        obs = step.obs;
        if step.done {
            break;
        }
    }
    Ok(acc.finish(0.0))
}

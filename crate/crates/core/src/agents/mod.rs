//! Learning agents: the value network, experience replay, the DQN training
//! loop, and the baseline scheduling policies.

pub mod baselines;
pub mod dqn;
pub mod net;
pub mod replay;

pub use baselines::{greedy_action, policy_config, random_activation, run_episode, PolicyKind};
pub use dqn::{
    epsilon_at, select_action, td_target, train_dqn, DqnLearner, EnvStep, Environment,
    EpisodeAccumulator, EpisodeStats, StepMetrics, TrainResult,
};
pub use net::QNet;
pub use replay::{ReplayMemory, Transition};

//! Deterministic simulator of a mobile-target-tracking wireless sensor
//! network with edge computing, plus a DRL-based long-term resource
//! allocation scheduler and an experiment harness.
//!
//! The crate is organized around the simulation pipeline:
//!
//! - [`world`] — node deployment, target kinematics, amplitude sensing
//! - [`radio`] — transmission rates, offload destination selection, latency
//! - [`energy`] — node mode state machine and every energy cost formula
//! - [`tracker`] — EKF estimation, data fusion, trajectory predictor, metrics
//! - [`env`] — the MDP wrapper: observations, actions, rewards, constraints
//! - [`agents`] — the LTDRA deep Q-learner and the four baseline policies
//! - [`harness`] — configuration, experiment orchestration, CSV outputs

pub mod config;
pub mod energy;
pub mod error;
pub mod radio;
pub mod tracker;
pub mod world;

pub mod agents;
pub mod env;
pub mod harness;

pub use config::SimConfig;
pub use error::{Error, Result};

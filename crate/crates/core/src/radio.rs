//! Transmission rates, offloading-destination selection, and task latency.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{distance, Position, SensorNode, WorldState};

/// One sensing task: size, deadline, and collaborative split.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Task {
    /// Size L in bits.
    pub bits: f64,
    /// Deadline tau_ar in seconds.
    pub deadline_s: f64,
    /// Fraction eta computed at the mobile node; the rest goes to the server.
    pub split_eta: f64,
}

impl Task {
    pub fn new(bits: f64, deadline_s: f64, split_eta: f64) -> Result<Self> {
        if bits <= 0.0 {
            return Err(Error::Domain("task size must be > 0".into()));
        }
        if deadline_s <= 0.0 {
            return Err(Error::Domain("task deadline must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&split_eta) {
            return Err(Error::Domain("task split must be in [0, 1]".into()));
        }
        Ok(Self { bits, deadline_s, split_eta })
    }
}

/// Offload destination kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum OffloadKind {
    ToMobile(usize),
    ToServer(usize),
}

impl OffloadKind {
    pub fn label(&self) -> &'static str {
        match self {
            OffloadKind::ToMobile(_) => "mobile",
            OffloadKind::ToServer(_) => "server",
        }
    }

    pub fn dest_id(&self) -> usize {
        match self {
            OffloadKind::ToMobile(i) | OffloadKind::ToServer(i) => *i,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OffloadDecision {
    pub source: usize,
    pub kind: OffloadKind,
    /// Bandwidth share a_l granted to this link, Hz.
    pub bandwidth: f64,
    /// Achievable rate at that share, bits/s.
    pub rate: f64,
    /// Link distance, meters.
    pub dist: f64,
}

/// Per-tick channel snapshot: pool size and how many sources share each
/// destination. Shares are equal splits of the pool.
#[derive(Debug, Clone)]
pub struct ChannelState {
    pub bandwidth_hz: f64,
    pub gain_g0: f64,
    pub noise_w: f64,
    concurrent: BTreeMap<OffloadKind, usize>,
}

impl ChannelState {
    pub fn new(bandwidth_hz: f64, gain_g0: f64, noise_w: f64) -> Self {
        Self { bandwidth_hz, gain_g0, noise_w, concurrent: BTreeMap::new() }
    }

    pub fn register(&mut self, dest: OffloadKind) {
        *self.concurrent.entry(dest).or_insert(0) += 1;
    }

    /// Equal split of the destination pool among concurrent offloaders.
    pub fn share(&self, dest: OffloadKind) -> f64 {
        let n = self.concurrent.get(&dest).copied().unwrap_or(0).max(1);
        self.bandwidth_hz / n as f64
    }

    pub fn gain_at(&self, dist: f64) -> f64 {
        channel_gain(self.gain_g0, dist)
    }
}

/// Free-space-like channel gain g0 / (1 + d^2).
pub fn channel_gain(g0: f64, dist: f64) -> f64 {
    g0 / (1.0 + dist * dist)
}

/// Shannon-style rate a_l * log2(1 + p*g/delta).
pub fn transmission_rate(bandwidth: f64, tx_power: f64, gain: f64, noise: f64) -> Result<f64> {
    if bandwidth <= 0.0 || tx_power <= 0.0 || gain <= 0.0 || noise <= 0.0 {
        return Err(Error::Domain(format!(
            "transmission_rate needs positive inputs (a_l={bandwidth}, p={tx_power}, g={gain}, delta={noise})"
        )));
    }
    Ok(bandwidth * (1.0 + tx_power * gain / noise).log2())
}

/// payload / rate.
pub fn transmission_latency(payload_bits: f64, rate: f64) -> Result<f64> {
    if rate <= 0.0 {
        return Err(Error::Domain("unreachable destination: rate must be > 0".into()));
    }
    Ok(payload_bits / rate)
}

/// Picks the rate-maximal mobile node within comm range, falling back to the
/// rate-maximal edge server. Ties break toward the lower node id.
pub fn select_offload_destination(
    sn: &SensorNode,
    world: &WorldState,
    channel: &ChannelState,
) -> Result<OffloadDecision> {
    let rate_to = |pos: Position, kind: OffloadKind| -> (f64, f64, f64) {
        let d = distance(sn.pos, pos);
        let bw = channel.share(kind);
        let g = channel.gain_at(d);
        let rate = transmission_rate(bw, sn.tx_power, g, channel.noise_w).unwrap_or(0.0);
        (rate, bw, d)
    };

    let mut best: Option<(OffloadKind, f64, f64, f64)> = None;
    for mn in world.mobiles.iter().filter(|m| m.alive()) {
        let d = distance(sn.pos, mn.pos);
        if d > sn.comm_range {
            continue;
        }
        let kind = OffloadKind::ToMobile(mn.id);
        let (rate, bw, d) = rate_to(mn.pos, kind);
        let better = match best {
            None => true,
            Some((_, r, _, _)) => rate > r,
        };
        if better {
            best = Some((kind, rate, bw, d));
        }
    }

    if best.is_none() {
        for srv in &world.servers {
            let kind = OffloadKind::ToServer(srv.id);
            let (rate, bw, d) = rate_to(srv.pos, kind);
            let better = match best {
                None => true,
                Some((_, r, _, _)) => rate > r,
            };
            if better {
                best = Some((kind, rate, bw, d));
            }
        }
    }

    match best {
        Some((kind, rate, bandwidth, dist)) => Ok(OffloadDecision {
            source: sn.id,
            kind,
            bandwidth,
            rate,
            dist,
        }),
        None => Err(Error::OrphanSensor { sn_id: sn.id }),
    }
}

/// Offload through a caller-chosen mobile node, for policies that pick the
/// relay themselves instead of taking the rate-maximal one. Errors if the
/// node does not exist, is dead, or is outside the sensor's comm range.
pub fn offload_via_mobile(
    sn: &SensorNode,
    world: &WorldState,
    channel: &ChannelState,
    mn_id: usize,
) -> Result<OffloadDecision> {
    let mn = world.mobiles.get(mn_id).ok_or(Error::OrphanSensor { sn_id: sn.id })?;
    let d = distance(sn.pos, mn.pos);
    if !mn.alive() || d > sn.comm_range {
        return Err(Error::OrphanSensor { sn_id: sn.id });
    }
    let kind = OffloadKind::ToMobile(mn.id);
    let bandwidth = channel.share(kind);
    let rate = transmission_rate(bandwidth, sn.tx_power, channel.gain_at(d), channel.noise_w)?;
    Ok(OffloadDecision { source: sn.id, kind, bandwidth, rate, dist: d })
}

/// Local and remote computing time for the split task. The halves run in
/// parallel, so the computing latency is their max.
pub fn compute_latency(task: &Task, local_freq: f64, server_freq: f64, cycles_per_bit: f64) -> (f64, f64) {
    let tau_local = task.split_eta * task.bits * cycles_per_bit / local_freq;
    let tau_remote = (1.0 - task.split_eta) * task.bits * cycles_per_bit / server_freq;
    (tau_local, tau_remote)
}

/// t_alpha = tau_c + tau_beta + I_j * tau_a.
pub fn total_latency(tau_c: f64, tau_beta: f64, move_indicator: bool, tau_a: f64) -> f64 {
    tau_c + tau_beta + if move_indicator { tau_a } else { 0.0 }
}

/// Per-task latency breakdown, one row of the metrics CSV.
#[derive(Debug, Clone, Copy)]
pub struct LatencyBreakdown {
    pub tau_c: f64,
    pub tau_beta: f64,
    pub tau_a: f64,
    pub t_alpha: f64,
    pub deadline_met: bool,
}

impl LatencyBreakdown {
    pub fn assemble(tau_c: f64, tau_beta: f64, move_indicator: bool, tau_a: f64, deadline: f64) -> Self {
        let t_alpha = total_latency(tau_c, tau_beta, move_indicator, tau_a);
        Self {
            tau_c,
            tau_beta,
            tau_a: if move_indicator { tau_a } else { 0.0 },
            t_alpha,
            deadline_met: t_alpha <= deadline,
        }
    }
}

//! The slotted uplink environment.
//!
//! Every call to [`Environment::step`] runs one slot `t` in a fixed order:
//!
//! 1. arrivals `X_n(t)` are drawn and enqueued with `gen_slot = t`; a full
//!    queue drops the newest packets (drop-tail);
//! 2. UE `n` dequeues `min(queue_len, alloc[n] * packets_per_unit)` packets
//!    from the head of its FCFS queue;
//! 3. AoI becomes `t - gen_slot` of the last packet served, or grows by one
//!    if nothing was served;
//! 4. utility and reward are computed from the updated AoI;
//! 5. the slot counter advances.

use std::collections::VecDeque;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::traffic::{sample_arrivals, ArrivalSpec};
use crate::SimRng;

pub const DEFAULT_QUEUE_CAPACITY: usize = 100;
pub const DEFAULT_BETA: f64 = 0.01;
/// Slope applied to allocated units inside the utility sigmoid.
pub const UTILITY_SLOPE: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub num_ues: usize,
    /// Bandwidth units available per slot.
    pub bandwidth_units: u32,
    /// Maximum packets held per UE.
    pub queue_capacity: usize,
    /// Packets one bandwidth unit carries per slot.
    pub packets_per_unit: u32,
    /// AoI weight in the reward.
    pub beta: f64,
    /// Slots per episode.
    pub horizon: u64,
    pub seed: u64,
    /// One arrival process per UE.
    pub arrivals: Vec<ArrivalSpec>,
}

impl SimConfig {
    /// Defaults for everything but the UE count and bandwidth; every UE
    /// starts silent.
    pub fn new(num_ues: usize, bandwidth_units: u32) -> Self {
        SimConfig {
            num_ues,
            bandwidth_units,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            packets_per_unit: 1,
            beta: DEFAULT_BETA,
            horizon: 1000,
            seed: 0,
            arrivals: vec![ArrivalSpec::silent(); num_ues],
        }
    }

    pub fn with_arrivals(mut self, arrivals: Vec<ArrivalSpec>) -> Self {
        self.arrivals = arrivals;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_horizon(mut self, horizon: u64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    /// Packets the link can carry per slot when every unit is used.
    pub fn capacity_per_slot(&self) -> u64 {
        u64::from(self.bandwidth_units) * u64::from(self.packets_per_unit)
    }

    /// Aggregate mean arrivals per slot.
    pub fn offered_load(&self) -> f64 {
        self.arrivals.iter().map(ArrivalSpec::mean_per_slot).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_ues == 0 {
            return Err(Error::Config("num_ues must be positive".into()));
        }
        let b = self.bandwidth_units as usize;
        if b == 0 || b >= self.num_ues {
            return Err(Error::Config(format!(
                "bandwidth_units must satisfy 0 < B < N, got B={} N={}",
                self.bandwidth_units, self.num_ues
            )));
        }
        if self.queue_capacity == 0 {
            return Err(Error::Config("queue_capacity must be >= 1".into()));
        }
        if self.packets_per_unit == 0 {
            return Err(Error::Config("packets_per_unit must be >= 1".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if self.arrivals.len() != self.num_ues {
            return Err(Error::Config(format!(
                "expected {} arrival specs, got {}",
                self.num_ues,
                self.arrivals.len()
            )));
        }
        self.arrivals.iter().try_for_each(ArrivalSpec::validate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Packet {
    /// Slot in which the packet was generated.
    pub gen_slot: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UeState {
    /// Head is the oldest packet.
    pub queue: VecDeque<Packet>,
    /// Age of information in slots.
    pub aoi: u64,
    pub delivered_packets: u64,
    pub last_delivery_gen_slot: Option<u64>,
}

/// Per-slot bandwidth allocation, in units, indexed by UE.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Schedule {
    pub alloc: Vec<u32>,
}

impl Schedule {
    pub fn new(alloc: Vec<u32>) -> Self {
        Schedule { alloc }
    }

    pub fn idle(num_ues: usize) -> Self {
        Schedule { alloc: vec![0; num_ues] }
    }

    pub fn total(&self) -> u32 {
        self.alloc.iter().sum()
    }

    pub fn is_selected(&self, ue: usize) -> bool {
        self.alloc.get(ue).is_some_and(|&b| b > 0)
    }

    /// UEs holding at least one unit.
    pub fn selected(&self) -> Vec<usize> {
        (0..self.alloc.len()).filter(|&n| self.alloc[n] > 0).collect()
    }

    pub fn validate(&self, num_ues: usize, bandwidth_units: u32) -> Result<()> {
        if self.alloc.len() != num_ues {
            return Err(Error::InvalidAction(format!(
                "allocation has {} entries for {} UEs",
                self.alloc.len(),
                num_ues
            )));
        }
        let total: u64 = self.alloc.iter().map(|&b| u64::from(b)).sum();
        if total > u64::from(bandwidth_units) {
            return Err(Error::InvalidAction(format!(
                "allocation uses {total} units, budget is {bandwidth_units}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// Slot that was just executed.
    pub slot: u64,
    pub reward: f64,
    pub per_ue_utility: Vec<f64>,
    /// AoI after this slot's update.
    pub per_ue_aoi: Vec<u64>,
    pub arrivals: Vec<u32>,
    pub packets_served: Vec<u32>,
    pub packets_dropped: Vec<u32>,
}

impl StepResult {
    pub fn network_utility(&self) -> f64 {
        self.per_ue_utility.iter().sum()
    }

    pub fn total_served(&self) -> u64 {
        self.packets_served.iter().map(|&p| u64::from(p)).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Environment {
    config: SimConfig,
    ues: Vec<UeState>,
    slot: u64,
    rng: SimRng,
    arrived: Vec<u64>,
    dropped: Vec<u64>,
}

impl Environment {
    pub fn reset(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let n = config.num_ues;
        Ok(Environment {
            rng: SimRng::seed_from_u64(config.seed),
            ues: vec![UeState::default(); n],
            slot: 0,
            arrived: vec![0; n],
            dropped: vec![0; n],
            config,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// Index of the next slot to run.
    pub fn slot(&self) -> u64 {
        self.slot
    }

    pub fn ues(&self) -> &[UeState] {
        &self.ues
    }

    pub fn num_ues(&self) -> usize {
        self.config.num_ues
    }

    pub fn aoi(&self) -> Vec<u64> {
        self.ues.iter().map(|u| u.aoi).collect()
    }

    pub fn queue_lengths(&self) -> Vec<usize> {
        self.ues.iter().map(|u| u.queue.len()).collect()
    }

    /// Cumulative packets generated per UE, including dropped ones.
    pub fn arrived(&self) -> &[u64] {
        &self.arrived
    }

    pub fn dropped(&self) -> &[u64] {
        &self.dropped
    }

    /// Enqueues `count` packets stamped with the current slot on `ue`,
    /// bypassing the arrival generator. Packets beyond the queue capacity
    /// are dropped; returns how many were accepted.
    pub fn inject_packets(&mut self, ue: usize, count: usize) -> Result<usize> {
        let n_ues = self.config.num_ues;
        let state = self
            .ues
            .get_mut(ue)
            .ok_or_else(|| Error::InvalidArgument(format!("UE {ue} out of range for {n_ues} UEs")))?;
        let accepted = count.min(self.config.queue_capacity - state.queue.len());
        state.queue.extend(std::iter::repeat_n(Packet { gen_slot: self.slot }, accepted));
        self.arrived[ue] += count as u64;
        self.dropped[ue] += (count - accepted) as u64;
        Ok(accepted)
    }

    pub fn step(&mut self, schedule: &Schedule) -> Result<StepResult> {
        schedule.validate(self.config.num_ues, self.config.bandwidth_units)?;
        let t = self.slot;
        let n_ues = self.config.num_ues;
        let cap = self.config.queue_capacity;
        let per_unit = self.config.packets_per_unit as usize;

        let mut arrivals = Vec::with_capacity(n_ues);
        let mut dropped = Vec::with_capacity(n_ues);
        for (n, ue) in self.ues.iter_mut().enumerate() {
            let x = sample_arrivals(&self.config.arrivals[n], &mut self.rng);
            let room = cap - ue.queue.len();
            let accepted = (x as usize).min(room);
            ue.queue.extend(std::iter::repeat_n(Packet { gen_slot: t }, accepted));
            let lost = x - accepted as u32;
            self.arrived[n] += u64::from(x);
            self.dropped[n] += u64::from(lost);
            arrivals.push(x);
            dropped.push(lost);
        }

        let mut served = Vec::with_capacity(n_ues);
        for (ue, &units) in self.ues.iter_mut().zip(&schedule.alloc) {
            let k = ue.queue.len().min(units as usize * per_unit);
            let last = ue.queue.drain(..k).last();
            match last {
                Some(p) => {
                    ue.aoi = t - p.gen_slot;
                    ue.last_delivery_gen_slot = Some(p.gen_slot);
                    ue.delivered_packets += k as u64;
                }
                None => ue.aoi += 1,
            }
            served.push(k as u32);
        }

        let utility: Vec<f64> = schedule
            .alloc
            .iter()
            .zip(&arrivals)
            .map(|(&b, &x)| node_utility(b, x, b > 0))
            .collect();
        let aoi = self.aoi();
        let reward = slot_reward(&utility, &aoi, self.config.beta)?;
        self.slot += 1;

        Ok(StepResult {
            slot: t,
            reward,
            per_ue_utility: utility,
            per_ue_aoi: aoi,
            arrivals,
            packets_served: served,
            packets_dropped: dropped,
        })
    }
}

/// Sigmoid utility of giving `b` units to a UE that generated `x` packets
/// this slot; zero for unselected UEs.
pub fn node_utility(b: u32, x: u32, selected: bool) -> f64 {
    if !selected {
        return 0.0;
    }
    let z = UTILITY_SLOPE * f64::from(b) - f64::from(x);
    1.0 / (1.0 + (-z).exp())
}

/// `sum_n (U_n - beta * A_n)`.
pub fn slot_reward(utilities: &[f64], aois: &[u64], beta: f64) -> Result<f64> {
    if utilities.len() != aois.len() {
        return Err(Error::InvalidArgument(format!(
            "{} utilities but {} AoI values",
            utilities.len(),
            aois.len()
        )));
    }
    Ok(utilities
        .iter()
        .zip(aois)
        .map(|(u, &a)| u - beta * a as f64)
        .sum())
}

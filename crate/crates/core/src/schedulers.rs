//! Non-learning scheduling policies.
//!
//! All of them implement [`Scheduler`] and only ever emit allocations with
//! `sum(alloc) <= bandwidth_units`.

use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::sim::{Environment, Schedule, SimConfig};
use crate::traffic::RateAssignment;
use crate::SimRng;

/// Decides the allocation for the slot the environment is about to run.
pub trait Scheduler: Send {
    fn name(&self) -> &str;

    fn decide(&mut self, env: &Environment) -> Result<Schedule>;
}

/// One unit each to `b` consecutive UEs starting at `pointer` (mod `n`).
/// Returns the allocation and the next pointer.
pub fn round_robin_decide(pointer: usize, n: usize, b: u32) -> (Schedule, usize) {
    let mut alloc = vec![0u32; n];
    for k in 0..b as usize {
        alloc[(pointer + k) % n] += 1;
    }
    (Schedule::new(alloc), (pointer + b as usize) % n)
}

#[derive(Debug, Clone, Default)]
pub struct RoundRobin {
    pointer: usize,
}

impl RoundRobin {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Scheduler for RoundRobin {
    fn name(&self) -> &str {
        "rr"
    }

    fn decide(&mut self, env: &Environment) -> Result<Schedule> {
        let c = env.config();
        let (schedule, next) = round_robin_decide(self.pointer % c.num_ues, c.num_ues, c.bandwidth_units);
        self.pointer = next;
        Ok(schedule)
    }
}

/// Result of a proportional split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PfDecision {
    pub schedule: Schedule,
    /// Set when every rate was zero and the split fell back to round-robin.
    pub fallback: bool,
}

/// Splits `b` units proportionally to `rates` with the largest-remainder
/// method; remainder ties go to the lowest UE index.
pub fn proportional_fair_decide(rates: &RateAssignment, b: u32) -> PfDecision {
    let total: f64 = rates.per_ue_rate_hz.iter().sum();
    if total <= 0.0 {
        let (schedule, _) = round_robin_decide(0, rates.len(), b);
        return PfDecision {
            schedule,
            fallback: true,
        };
    }
    let quotas: Vec<f64> = rates.per_ue_rate_hz.iter().map(|r| f64::from(b) * r / total).collect();
    PfDecision {
        schedule: Schedule::new(largest_remainder(&quotas, b)),
        fallback: false,
    }
}

/// Hamilton apportionment of `b` units given real quotas summing to `b`.
pub fn largest_remainder(quotas: &[f64], b: u32) -> Vec<u32> {
    let mut alloc: Vec<u32> = quotas.iter().map(|q| q.max(0.0).floor() as u32).collect();
    let used: u32 = alloc.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    // Stable sort: equal remainders keep index order.
    order.sort_by(|&i, &j| {
        let ri = quotas[i] - quotas[i].floor();
        let rj = quotas[j] - quotas[j].floor();
        rj.total_cmp(&ri)
    });
    for &i in order.iter().take(b.saturating_sub(used) as usize) {
        alloc[i] += 1;
    }
    alloc
}

/// Static proportional split driven by the known mean arrival rates.
///
/// Each UE is owed a per-slot share of the bandwidth (see
/// [`ProportionalFair::shares`]). The scheduler accumulates what every UE is
/// owed and hands units to the largest outstanding credit each slot, so the
/// cumulative allocation tracks the shares to within one unit even when a
/// share is below one unit per slot. With zero initial credit the first slot
/// reproduces [`proportional_fair_decide`] on those shares.
///
/// The split ignores queue state, so under overload it keeps feeding heavy
/// UEs whose queues are already saturated. [`ProportionalFair`] is the
/// queue-aware variant.
#[derive(Debug, Clone)]
pub struct StaticProportionalFair {
    rates: RateAssignment,
    shares: Option<Vec<f64>>,
    credit: Vec<f64>,
}

impl StaticProportionalFair {
    pub fn new(rates: RateAssignment) -> Self {
        let n = rates.len();
        StaticProportionalFair {
            rates,
            shares: None,
            credit: vec![0.0; n],
        }
    }

    pub fn rates(&self) -> &RateAssignment {
        &self.rates
    }

    /// Units per slot owed to each UE: `B * r_n / sum(r)`, or an equal split
    /// when every rate is zero.
    pub fn shares(rates: &RateAssignment, config: &SimConfig) -> Vec<f64> {
        let b = f64::from(config.bandwidth_units);
        let total: f64 = rates.per_ue_rate_hz.iter().sum();
        if total <= 0.0 {
            return vec![b / rates.len() as f64; rates.len()];
        }
        rates.per_ue_rate_hz.iter().map(|r| b * r / total).collect()
    }
}

impl Scheduler for StaticProportionalFair {
    fn name(&self) -> &str {
        "pf-static"
    }

    fn decide(&mut self, env: &Environment) -> Result<Schedule> {
        let c = env.config();
        if self.rates.len() != c.num_ues {
            return Err(Error::Config(format!(
                "proportional-fair knows {} rates for {} UEs",
                self.rates.len(),
                c.num_ues
            )));
        }
        let shares = self.shares.get_or_insert_with(|| Self::shares(&self.rates, c));
        for (credit, share) in self.credit.iter_mut().zip(shares.iter()) {
            *credit += share;
        }
        let mut alloc = vec![0u32; c.num_ues];
        for _ in 0..c.bandwidth_units {
            let best = argmax_first(&self.credit);
            alloc[best] += 1;
            self.credit[best] -= 1.0;
        }
        Ok(Schedule::new(alloc))
    }
}

/// Classic proportional-fair scheduling over the UE buffers.
///
/// Units are handed out one at a time to the UE with the largest ratio of
/// packets it could send with one more unit to its smoothed past
/// throughput. UEs with nothing left to send are skipped, so units may go
/// unused. Smoothed throughputs start at the known mean arrival rates (in
/// packets per slot) and are updated once per slot with weight `alpha`.
/// Ties go to the lowest UE index.
#[derive(Debug, Clone)]
pub struct ProportionalFair {
    rates: RateAssignment,
    alpha: f64,
    average: Option<Vec<f64>>,
}

impl ProportionalFair {
    pub const DEFAULT_ALPHA: f64 = 0.01;

    pub fn new(rates: RateAssignment) -> Self {
        Self::with_alpha(rates, Self::DEFAULT_ALPHA)
    }

    pub fn with_alpha(rates: RateAssignment, alpha: f64) -> Self {
        ProportionalFair {
            rates,
            alpha: alpha.clamp(f64::MIN_POSITIVE, 1.0),
            average: None,
        }
    }

    pub fn rates(&self) -> &RateAssignment {
        &self.rates
    }

    /// Smoothed per-slot throughput, once the first decision has been made.
    pub fn average(&self) -> Option<&[f64]> {
        self.average.as_deref()
    }
}

impl Scheduler for ProportionalFair {
    fn name(&self) -> &str {
        "pf"
    }

    fn decide(&mut self, env: &Environment) -> Result<Schedule> {
        let c = env.config();
        if self.rates.len() != c.num_ues {
            return Err(Error::Config(format!(
                "proportional-fair knows {} rates for {} UEs",
                self.rates.len(),
                c.num_ues
            )));
        }
        let average = self.average.get_or_insert_with(|| {
            self.rates
                .per_ue_rate_hz
                .iter()
                .zip(&c.arrivals)
                .map(|(r, spec)| r * spec.slot_duration_s)
                .collect()
        });
        let per_unit = c.packets_per_unit as usize;
        let mut left = env.queue_lengths();
        let mut alloc = vec![0u32; c.num_ues];
        let mut sent = vec![0usize; c.num_ues];
        for _ in 0..c.bandwidth_units {
            let mut best: Option<(usize, f64)> = None;
            for n in 0..c.num_ues {
                let r = left[n].min(per_unit);
                if r == 0 {
                    continue;
                }
                let metric = r as f64 / average[n].max(1e-9);
                if best.is_none_or(|(_, m)| metric > m) {
                    best = Some((n, metric));
                }
            }
            let Some((n, _)) = best else { break };
            let k = left[n].min(per_unit);
            alloc[n] += 1;
            left[n] -= k;
            sent[n] += k;
        }
        for (avg, s) in average.iter_mut().zip(&sent) {
            *avg = (1.0 - self.alpha) * *avg + self.alpha * *s as f64;
        }
        Ok(Schedule::new(alloc))
    }
}

fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate().skip(1) {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Every allocation of at most `b` units over `n` UEs, in lexicographic order.
pub fn allocations_up_to(n: usize, b: u32) -> Vec<Vec<u32>> {
    fn rec(prefix: &mut Vec<u32>, n: usize, left: u32, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for units in 0..=left {
            prefix.push(units);
            rec(prefix, n, left - units, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), n, b, &mut out);
    out
}

/// Exhaustive one-slot argmax of the reward.
///
/// Each candidate is scored by stepping a clone of the environment, so the
/// clone draws exactly the arrivals the real slot will see. Ties go to the
/// lexicographically largest allocation, i.e. units land on the lowest UE
/// indices first.
#[derive(Debug, Clone)]
pub struct GreedyOracle {
    pub max_ues: usize,
    pub max_units: u32,
}

impl Default for GreedyOracle {
    fn default() -> Self {
        GreedyOracle {
            max_ues: 10,
            max_units: 6,
        }
    }
}

impl GreedyOracle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn decide_with_reward(&self, env: &Environment) -> Result<(Schedule, f64)> {
        let c = env.config();
        if c.num_ues > self.max_ues || c.bandwidth_units > self.max_units {
            return Err(Error::TooLarge {
                num_ues: c.num_ues,
                bandwidth_units: c.bandwidth_units,
            });
        }
        let mut best: Option<(Schedule, f64)> = None;
        for alloc in allocations_up_to(c.num_ues, c.bandwidth_units).into_iter().rev() {
            let schedule = Schedule::new(alloc);
            let reward = env.clone().step(&schedule)?.reward;
            if best.as_ref().is_none_or(|(_, r)| reward > *r) {
                best = Some((schedule, reward));
            }
        }
        Ok(best.expect("at least the idle allocation"))
    }
}

impl Scheduler for GreedyOracle {
    fn name(&self) -> &str {
        "oracle"
    }

    fn decide(&mut self, env: &Environment) -> Result<Schedule> {
        self.decide_with_reward(env).map(|(s, _)| s)
    }
}

/// Each of the `b` units goes to a UE chosen uniformly at random.
pub fn random_decide<R: Rng + ?Sized>(rng: &mut R, n: usize, b: u32) -> Schedule {
    let mut alloc = vec![0u32; n];
    for _ in 0..b {
        alloc[rng.random_range(0..n)] += 1;
    }
    Schedule::new(alloc)
}

#[derive(Debug, Clone)]
pub struct RandomScheduler {
    rng: SimRng,
}

impl RandomScheduler {
    pub fn new(seed: u64) -> Self {
        RandomScheduler {
            rng: SimRng::seed_from_u64(seed),
        }
    }
}

impl Scheduler for RandomScheduler {
    fn name(&self) -> &str {
        "random"
    }

    fn decide(&mut self, env: &Environment) -> Result<Schedule> {
        let c = env.config();
        Ok(random_decide(&mut self.rng, c.num_ues, c.bandwidth_units))
    }
}

//! PPO actor-critic scheduler.
//!
//! The action for one slot is an allocation of `B` bandwidth units. The
//! actor outputs one logit per UE and each unit is assigned by an
//! independent categorical draw from `softmax(logits)`, so an allocation
//! with counts `c` has multinomial likelihood `B! / prod(c_n!) * prod(p_n^c_n)`.
//! The critic outputs a scalar state value (in normalized return units, see
//! [`ValueNormalizer`]).

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{read_u32, AdamState, Mlp};
use crate::schedulers::Scheduler;
use crate::sim::{Environment, Schedule, SimConfig};
use crate::traffic::ArrivalSpec;
use crate::{derive_seed, SimRng};

/// Features per UE in an observation.
pub const FEATURES_PER_UE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoHyperparams {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_epsilon: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub rollout_length: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub entropy_coef: f64,
    pub max_iterations: usize,
    /// Stop once the moving-average reward has not improved by more than
    /// this for `patience` iterations.
    pub convergence_tol: f64,
    /// Zero disables early stopping.
    pub patience: usize,
    pub hidden_width: usize,
    /// Slots in the recent-throughput window.
    pub throughput_window: usize,
}

impl Default for PpoHyperparams {
    fn default() -> Self {
        PpoHyperparams {
            gamma: 0.95,
            gae_lambda: 0.95,
            clip_epsilon: 0.2,
            epochs: 10,
            minibatch_size: 80,
            rollout_length: 2048,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            entropy_coef: 0.01,
            max_iterations: 200,
            convergence_tol: 1e-3,
            patience: 20,
            hidden_width: 64,
            throughput_window: 10,
        }
    }
}

impl PpoHyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("ppo: {msg}")));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must be in [0, 1]");
        }
        if !(self.clip_epsilon > 0.0) {
            return bad("clip_epsilon must be positive");
        }
        if self.epochs == 0 || self.minibatch_size == 0 || self.rollout_length == 0 || self.max_iterations == 0 {
            return bad("epochs, minibatch_size, rollout_length and max_iterations must be positive");
        }
        if self.minibatch_size > self.rollout_length {
            return bad("minibatch_size must not exceed rollout_length");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.entropy_coef >= 0.0) {
            return bad("entropy_coef must be >= 0");
        }
        if self.hidden_width == 0 || self.throughput_window == 0 {
            return bad("hidden_width and throughput_window must be positive");
        }
        Ok(())
    }
}

/// Flattened per-UE `(queue, aoi, throughput)` features, each normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub features: Vec<f64>,
}

impl Observation {
    pub fn num_ues(&self) -> usize {
        self.features.len() / FEATURES_PER_UE
    }

    pub fn queue(&self, ue: usize) -> f64 {
        self.features[ue * FEATURES_PER_UE]
    }

    pub fn aoi(&self, ue: usize) -> f64 {
        self.features[ue * FEATURES_PER_UE + 1]
    }

    pub fn throughput(&self, ue: usize) -> f64 {
        self.features[ue * FEATURES_PER_UE + 2]
    }
}

/// Packets delivered per UE over the last `k` slots.
///
/// Fed either explicitly with [`ThroughputWindow::record`] or by diffing the
/// environment's cumulative delivery counters with [`ThroughputWindow::sync`].
#[derive(Debug, Clone)]
pub struct ThroughputWindow {
    k: usize,
    history: VecDeque<Vec<u64>>,
    last_delivered: Vec<u64>,
    last_slot: Option<u64>,
}

impl ThroughputWindow {
    pub fn new(k: usize) -> Self {
        ThroughputWindow {
            k: k.max(1),
            history: VecDeque::new(),
            last_delivered: Vec::new(),
            last_slot: None,
        }
    }

    pub fn capacity(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn record(&mut self, served: &[u64]) {
        if self.history.len() == self.k {
            self.history.pop_front();
        }
        self.history.push_back(served.to_vec());
    }

    /// Catches up with `env`. A slot counter that went backwards (a new
    /// episode) clears the window.
    pub fn sync(&mut self, env: &Environment) {
        let delivered: Vec<u64> = env.ues().iter().map(|u| u.delivered_packets).collect();
        match self.last_slot {
            Some(last) if env.slot() > last && delivered.len() == self.last_delivered.len() => {
                let delta: Vec<u64> = delivered
                    .iter()
                    .zip(&self.last_delivered)
                    .map(|(now, before)| now - before)
                    .collect();
                self.record(&delta);
            }
            Some(last) if env.slot() == last && delivered.len() == self.last_delivered.len() => {}
            _ => self.history.clear(),
        }
        self.last_delivered = delivered;
        self.last_slot = Some(env.slot());
    }

    /// Mean packets per slot delivered to `ue` over the recorded slots.
    pub fn mean(&self, ue: usize) -> f64 {
        if self.history.is_empty() {
            return 0.0;
        }
        self.history.iter().map(|s| s.get(ue).copied().unwrap_or(0) as f64).sum::<f64>() / self.history.len() as f64
    }
}

/// Running maximum of observed AoI (at least 1), frozen for evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AoiNormalizer {
    max: f64,
    frozen: bool,
}

impl Default for AoiNormalizer {
    fn default() -> Self {
        AoiNormalizer { max: 1.0, frozen: false }
    }
}

impl AoiNormalizer {
    pub fn frozen(divisor: f64) -> Self {
        AoiNormalizer {
            max: divisor.max(1.0),
            frozen: true,
        }
    }

    pub fn observe(&mut self, aois: &[u64]) {
        if self.frozen {
            return;
        }
        if let Some(&m) = aois.iter().max() {
            self.max = self.max.max(m as f64);
        }
    }

    pub fn divisor(&self) -> f64 {
        self.max
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }
}

/// Normalizes queue length by capacity, AoI by `aoi_divisor` and recent
/// throughput by `B * c`.
pub fn build_observation(env: &Environment, window: &ThroughputWindow, aoi_divisor: f64) -> Observation {
    let c = env.config();
    let queue_norm = c.queue_capacity as f64;
    let thr_norm = c.capacity_per_slot() as f64;
    let aoi_norm = aoi_divisor.max(1.0);
    let mut features = Vec::with_capacity(c.num_ues * FEATURES_PER_UE);
    for (n, ue) in env.ues().iter().enumerate() {
        features.push(ue.queue.len() as f64 / queue_norm);
        features.push(ue.aoi as f64 / aoi_norm);
        features.push(window.mean(n) / thr_norm);
    }
    Observation { features }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

fn ln_factorial(k: u32) -> f64 {
    (2..=k).map(|i| f64::from(i).ln()).sum()
}

/// `b` independent categorical unit assignments. The returned log
/// probability is that of the ordered draw sequence; see
/// [`action_log_prob`] for the likelihood of the resulting allocation.
pub fn sample_action<R: Rng + ?Sized>(logits: &[f64], b: u32, rng: &mut R) -> (Schedule, f64) {
    let logp = log_softmax(logits);
    let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let mut alloc = vec![0u32; logits.len()];
    let mut log_prob = 0.0;
    for _ in 0..b {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = logits.len() - 1;
        for (n, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = n;
                break;
            }
        }
        alloc[chosen] += 1;
        log_prob += logp[chosen];
    }
    (Schedule::new(alloc), log_prob)
}

/// Multinomial log-likelihood of `schedule` under `softmax(logits)`.
pub fn action_log_prob(logits: &[f64], schedule: &Schedule, b: u32) -> Result<f64> {
    if schedule.alloc.len() != logits.len() {
        return Err(Error::InvalidAction(format!(
            "allocation has {} entries for {} logits",
            schedule.alloc.len(),
            logits.len()
        )));
    }
    if schedule.total() != b {
        return Err(Error::InvalidAction(format!(
            "allocation uses {} units, expected exactly {b}",
            schedule.total()
        )));
    }
    Ok(multinomial_log_prob(&log_softmax(logits), &schedule.alloc))
}

fn multinomial_log_prob(logp: &[f64], counts: &[u32]) -> f64 {
    let b: u32 = counts.iter().sum();
    let coeff = ln_factorial(b) - counts.iter().map(|&c| ln_factorial(c)).sum::<f64>();
    coeff
        + counts
            .iter()
            .zip(logp)
            .filter(|(&c, _)| c > 0)
            .map(|(&c, l)| f64::from(c) * l)
            .sum::<f64>()
}

/// Deterministic allocation: units are handed out one at a time to the UE
/// maximizing `p_n / (c_n + 1)`, which greedily climbs toward the mode of
/// the multinomial. Ties go to the lowest index.
pub fn mode_allocation(logits: &[f64], b: u32) -> Schedule {
    let probs: Vec<f64> = log_softmax(logits).iter().map(|l| l.exp()).collect();
    let mut alloc = vec![0u32; logits.len()];
    for _ in 0..b {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (n, p) in probs.iter().enumerate() {
            let score = p / f64::from(alloc[n] + 1);
            if score > best_score {
                best = n;
                best_score = score;
            }
        }
        alloc[best] += 1;
    }
    Schedule::new(alloc)
}

/// How a rollout segment ended, when it did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpisodeEnd {
    Terminal,
    /// Cut by the horizon; the tail is bootstrapped from this value.
    Truncated { bootstrap_value: f64 },
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub observation: Vec<f64>,
    pub action: Schedule,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub end: Option<EpisodeEnd>,
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub steps: Vec<Transition>,
    /// Value of the state following the last step, if that step did not end
    /// an episode.
    pub bootstrap_value: f64,
    pub returns: Vec<f64>,
    /// Normalized advantages.
    pub advantages: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn push(&mut self, step: Transition) {
        self.steps.push(step);
    }
}

/// Generalized advantage estimates, before normalization.
pub fn gae(traj: &Trajectory, gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if traj.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let steps = &traj.steps;
    let mut adv = vec![0.0; steps.len()];
    let mut carry = 0.0;
    for t in (0..steps.len()).rev() {
        let s = &steps[t];
        let (next_value, next_adv) = match s.end {
            Some(EpisodeEnd::Terminal) => (0.0, 0.0),
            Some(EpisodeEnd::Truncated { bootstrap_value }) => (bootstrap_value, 0.0),
            None if t + 1 == steps.len() => (traj.bootstrap_value, 0.0),
            None => (steps[t + 1].value, carry),
        };
        let delta = s.reward + gamma * next_value - s.value;
        carry = delta + gamma * lambda * next_adv;
        adv[t] = carry;
    }
    Ok(adv)
}

/// Fills `returns` (advantage + value) and zero-mean, unit-variance
/// `advantages`.
pub fn compute_advantages(traj: &mut Trajectory, hp: &PpoHyperparams) -> Result<()> {
    let raw = gae(traj, hp.gamma, hp.gae_lambda)?;
    traj.returns = raw.iter().zip(&traj.steps).map(|(a, s)| a + s.value).collect();
    traj.advantages = normalize(&raw);
    Ok(())
}

/// Zero mean, unit (population) variance; the variance is floored at 1e-8.
pub fn normalize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.max(1e-8).sqrt();
    xs.iter().map(|x| (x - mean) / sd).collect()
}

/// One actor training example.
#[derive(Debug, Clone, Copy)]
pub struct ActorSample<'a> {
    pub observation: &'a [f64],
    pub action: &'a Schedule,
    pub old_log_prob: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ActorLoss {
    /// `-mean(min(r A, clip(r) A)) - entropy_coef * mean(H)`.
    pub loss: f64,
    /// `mean(min(r A, clip(r) A))`.
    pub surrogate: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

/// Clipped surrogate loss over `samples`. When `grads` is given, the
/// gradient with respect to the actor parameters is accumulated into it.
///
/// The entropy bonus is that of the per-unit categorical distribution.
pub fn actor_loss(
    actor: &Mlp,
    samples: &[ActorSample<'_>],
    clip_epsilon: f64,
    entropy_coef: f64,
    mut grads: Option<&mut [f64]>,
) -> Result<ActorLoss> {
    if samples.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let m = samples.len() as f64;
    let mut out = ActorLoss::default();
    let mut clipped = 0usize;
    for s in samples {
        let (logits, cache) = actor.forward(s.observation)?;
        let logp = log_softmax(&logits);
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        if s.action.alloc.len() != logits.len() {
            return Err(Error::Shape("action does not match actor outputs".into()));
        }
        let b = f64::from(s.action.total());
        let new_log_prob = multinomial_log_prob(&logp, &s.action.alloc);
        let ratio = (new_log_prob - s.old_log_prob).exp();
        let clipped_ratio = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
        let unclipped_term = ratio * s.advantage;
        let clipped_term = clipped_ratio * s.advantage;
        let objective = unclipped_term.min(clipped_term);
        let entropy = -probs.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();

        out.surrogate += objective / m;
        out.entropy += entropy / m;
        out.mean_ratio += ratio / m;
        if (ratio - 1.0).abs() > clip_epsilon {
            clipped += 1;
        }

        if let Some(g) = grads.as_deref_mut() {
            // d objective / d new_log_prob: zero when the clipped term is the minimum.
            let d_obj = if unclipped_term <= clipped_term { unclipped_term } else { 0.0 };
            let logit_grad: Vec<f64> = probs
                .iter()
                .zip(&logp)
                .zip(&s.action.alloc)
                .map(|((p, l), &c)| {
                    let d_logprob = f64::from(c) - b * p;
                    let d_entropy = -p * (l + entropy);
                    (-d_obj * d_logprob - entropy_coef * d_entropy) / m
                })
                .collect();
            actor.backward_into(&cache, &logit_grad, g)?;
        }
    }
    out.loss = -out.surrogate - entropy_coef * out.entropy;
    out.clip_fraction = clipped as f64 / m;
    Ok(out)
}

/// Mean squared error between critic outputs and `targets`, with its
/// gradient accumulated into `grads` when given.
pub fn critic_loss(critic: &Mlp, observations: &[&[f64]], targets: &[f64], mut grads: Option<&mut [f64]>) -> Result<f64> {
    if observations.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let m = observations.len() as f64;
    let mut loss = 0.0;
    for (obs, target) in observations.iter().zip(targets) {
        let (v, cache) = critic.forward(obs)?;
        let err = v[0] - target;
        loss += err * err / m;
        if let Some(g) = grads.as_deref_mut() {
            critic.backward_into(&cache, &[2.0 * err / m], g)?;
        }
    }
    Ok(loss)
}

/// Running mean and variance of returns; the critic regresses returns in
/// these standardized units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueNormalizer {
    pub mean: f64,
    pub var: f64,
    pub count: f64,
}

impl Default for ValueNormalizer {
    fn default() -> Self {
        ValueNormalizer {
            mean: 0.0,
            var: 1.0,
            count: 0.0,
        }
    }
}

impl ValueNormalizer {
    pub fn std(&self) -> f64 {
        self.var.max(1e-8).sqrt()
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std()
    }

    pub fn denormalize(&self, x: f64) -> f64 {
        x * self.std() + self.mean
    }

    /// Merges a batch (parallel-variance update).
    pub fn update(&mut self, xs: &[f64]) {
        if xs.is_empty() {
            return;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        if self.count == 0.0 {
            *self = ValueNormalizer { mean, var, count: n };
            return;
        }
        let total = self.count + n;
        let delta = mean - self.mean;
        let m2 = self.var * self.count + var * n + delta * delta * self.count * n / total;
        self.mean += delta * n / total;
        self.var = m2 / total;
        self.count = total;
    }
}

/// Actor and critic networks plus everything needed to rebuild
/// observations at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoPolicy {
    pub actor: Mlp,
    pub critic: Mlp,
    pub num_ues: usize,
    pub bandwidth_units: u32,
    pub packets_per_unit: u32,
    pub queue_capacity: usize,
    pub throughput_window: usize,
    pub aoi_divisor: f64,
    pub value_norm: ValueNormalizer,
    pub hyperparams: PpoHyperparams,
}

const POLICY_MAGIC: &[u8; 8] = b"AOIPPO\0\0";
const POLICY_VERSION: u8 = 1;

impl PpoPolicy {
    pub fn new<R: Rng + ?Sized>(sim: &SimConfig, hp: &PpoHyperparams, rng: &mut R) -> Result<Self> {
        let input = sim.num_ues * FEATURES_PER_UE;
        let h = hp.hidden_width;
        Ok(PpoPolicy {
            actor: Mlp::new(&[input, h, h, sim.num_ues], rng)?,
            critic: Mlp::new(&[input, h, h, 1], rng)?,
            num_ues: sim.num_ues,
            bandwidth_units: sim.bandwidth_units,
            packets_per_unit: sim.packets_per_unit,
            queue_capacity: sim.queue_capacity,
            throughput_window: hp.throughput_window,
            aoi_divisor: 1.0,
            value_norm: ValueNormalizer::default(),
            hyperparams: hp.clone(),
        })
    }

    pub fn check_compatible(&self, sim: &SimConfig) -> Result<()> {
        if self.num_ues != sim.num_ues
            || self.bandwidth_units != sim.bandwidth_units
            || self.packets_per_unit != sim.packets_per_unit
            || self.queue_capacity != sim.queue_capacity
        {
            return Err(Error::Checkpoint(format!(
                "policy trained for N={} B={} c={} L={}, environment has N={} B={} c={} L={}",
                self.num_ues,
                self.bandwidth_units,
                self.packets_per_unit,
                self.queue_capacity,
                sim.num_ues,
                sim.bandwidth_units,
                sim.packets_per_unit,
                sim.queue_capacity
            )));
        }
        Ok(())
    }

    /// State value in reward units.
    pub fn value(&self, observation: &[f64]) -> Result<f64> {
        Ok(self.value_norm.denormalize(self.critic.predict(observation)?[0]))
    }

    /// Checkpoint layout (little endian): 8-byte magic `AOIPPO\0\0`, a
    /// version byte, `u32` N, B, c, L and window length, `f64` AoI
    /// divisor, value mean and value variance, a `u32`-prefixed UTF-8 TOML
    /// dump of the hyperparameters, then the actor and critic networks in
    /// the [`crate::nn`] format.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(POLICY_MAGIC)?;
        w.write_all(&[POLICY_VERSION])?;
        for v in [
            self.num_ues as u32,
            self.bandwidth_units,
            self.packets_per_unit,
            self.queue_capacity as u32,
            self.throughput_window as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in [self.aoi_divisor, self.value_norm.mean, self.value_norm.var] {
            w.write_all(&v.to_le_bytes())?;
        }
        let hp = toml::to_string(&self.hyperparams).map_err(std::io::Error::other)?;
        w.write_all(&(hp.len() as u32).to_le_bytes())?;
        w.write_all(hp.as_bytes())?;
        self.actor.write_to(&mut w)?;
        self.critic.write_to(&mut w)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != POLICY_MAGIC {
            return Err(Error::Checkpoint("not a policy checkpoint".into()));
        }
        let mut version = [0u8; 1];
        r.read_exact(&mut version).map_err(io)?;
        if version[0] != POLICY_VERSION {
            return Err(Error::Checkpoint(format!("unsupported policy version {}", version[0])));
        }
        let mut header = [0u32; 5];
        for h in &mut header {
            *h = read_u32(&mut r).map_err(io)?;
        }
        let mut floats = [0f64; 3];
        for f in &mut floats {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf).map_err(io)?;
            *f = f64::from_le_bytes(buf);
        }
        let hp_len = read_u32(&mut r).map_err(io)? as usize;
        if hp_len > 1 << 16 {
            return Err(Error::Checkpoint("implausible hyperparameter block".into()));
        }
        let mut hp = vec![0u8; hp_len];
        r.read_exact(&mut hp).map_err(io)?;
        let hp = String::from_utf8(hp).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let hyperparams: PpoHyperparams = toml::from_str(&hp).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let actor = Mlp::read_from(&mut r)?;
        let critic = Mlp::read_from(&mut r)?;
        let [num_ues, bandwidth_units, packets_per_unit, queue_capacity, window] = header;
        let num_ues = num_ues as usize;
        let input = num_ues * FEATURES_PER_UE;
        if actor.input_dim() != input || actor.output_dim() != num_ues || critic.input_dim() != input || critic.output_dim() != 1 {
            return Err(Error::Checkpoint("network shapes do not match the header".into()));
        }
        Ok(PpoPolicy {
            actor,
            critic,
            num_ues,
            bandwidth_units,
            packets_per_unit,
            queue_capacity: queue_capacity as usize,
            throughput_window: window as usize,
            aoi_divisor: floats[0],
            value_norm: ValueNormalizer {
                mean: floats[1],
                var: floats[2],
                count: 1.0,
            },
            hyperparams,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateDiagnostics {
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
}

/// Adam states for the actor and critic.
#[derive(Debug, Clone)]
pub struct Optimizers {
    pub actor: AdamState,
    pub critic: AdamState,
}

impl Optimizers {
    pub fn new(policy: &PpoPolicy, hp: &PpoHyperparams) -> Self {
        Optimizers {
            actor: AdamState::new(policy.actor.params().len(), hp.actor_lr),
            critic: AdamState::new(policy.critic.params().len(), hp.critic_lr),
        }
    }
}

/// Runs `epochs` passes of shuffled minibatch updates over `traj`.
///
/// Any non-finite loss or gradient restores the parameters and optimizer
/// states to their values on entry and returns the error.
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut PpoPolicy,
    opt: &mut Optimizers,
    traj: &Trajectory,
    hp: &PpoHyperparams,
    rng: &mut R,
) -> Result<UpdateDiagnostics> {
    if traj.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    if traj.advantages.len() != traj.len() || traj.returns.len() != traj.len() {
        return Err(Error::InvalidArgument("advantages must be computed before updating".into()));
    }
    let snapshot = (policy.actor.clone(), policy.critic.clone(), opt.clone());
    let result = update_epochs(policy, opt, traj, hp, rng);
    if result.is_err() {
        policy.actor = snapshot.0;
        policy.critic = snapshot.1;
        *opt = snapshot.2;
    }
    result
}

fn update_epochs<R: Rng + ?Sized>(
    policy: &mut PpoPolicy,
    opt: &mut Optimizers,
    traj: &Trajectory,
    hp: &PpoHyperparams,
    rng: &mut R,
) -> Result<UpdateDiagnostics> {
    let targets: Vec<f64> = traj.returns.iter().map(|r| policy.value_norm.normalize(*r)).collect();
    let mut order: Vec<usize> = (0..traj.len()).collect();
    let mut diag = UpdateDiagnostics::default();
    let mut batches = 0usize;
    let mut actor_grad = vec![0.0; policy.actor.params().len()];
    let mut critic_grad = vec![0.0; policy.critic.params().len()];
    for _ in 0..hp.epochs {
        order.shuffle(rng);
        for batch in order.chunks(hp.minibatch_size) {
            let samples: Vec<ActorSample<'_>> = batch
                .iter()
                .map(|&i| ActorSample {
                    observation: &traj.steps[i].observation,
                    action: &traj.steps[i].action,
                    old_log_prob: traj.steps[i].log_prob,
                    advantage: traj.advantages[i],
                })
                .collect();
            actor_grad.iter_mut().for_each(|g| *g = 0.0);
            let a = actor_loss(
                &policy.actor,
                &samples,
                hp.clip_epsilon,
                hp.entropy_coef,
                Some(&mut actor_grad),
            )?;
            let observations: Vec<&[f64]> = batch.iter().map(|&i| traj.steps[i].observation.as_slice()).collect();
            let batch_targets: Vec<f64> = batch.iter().map(|&i| targets[i]).collect();
            critic_grad.iter_mut().for_each(|g| *g = 0.0);
            let c = critic_loss(&policy.critic, &observations, &batch_targets, Some(&mut critic_grad))?;
            if !(a.loss.is_finite() && c.is_finite()) {
                return Err(Error::NonFinite(format!("loss (actor {}, critic {c})", a.loss)));
            }
            opt.actor.step(policy.actor.params_mut(), &actor_grad)?;
            opt.critic.step(policy.critic.params_mut(), &critic_grad)?;

            diag.mean_ratio += a.mean_ratio;
            diag.clip_fraction += a.clip_fraction;
            diag.actor_loss += a.loss;
            diag.critic_loss += c;
            diag.entropy += a.entropy;
            batches += 1;
        }
    }
    let k = batches as f64;
    diag.mean_ratio /= k;
    diag.clip_fraction /= k;
    diag.actor_loss /= k;
    diag.critic_loss /= k;
    diag.entropy /= k;
    Ok(diag)
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    pub mean_reward: f64,
    /// Mean AoI in effect during the rollout's slots.
    pub mean_aoi: f64,
    /// Packets delivered per slot.
    pub throughput: f64,
    pub clip_fraction: f64,
    pub diagnostics: UpdateDiagnostics,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: PpoPolicy,
    pub curve: Vec<CurvePoint>,
}

/// Trains on `sim` as given.
pub fn train(sim: &SimConfig, hp: &PpoHyperparams, seed: u64) -> Result<TrainOutcome> {
    train_with_scenarios(sim, &[sim.arrivals.clone()], hp, seed)
}

/// Trains with episodes cycling through `scenarios` (one arrival spec per
/// UE each). Episodes last `sim.horizon` slots; rollouts of
/// `rollout_length` slots run across episode boundaries, bootstrapping the
/// value at each horizon cut.
pub fn train_with_scenarios(
    sim: &SimConfig,
    scenarios: &[Vec<ArrivalSpec>],
    hp: &PpoHyperparams,
    seed: u64,
) -> Result<TrainOutcome> {
    hp.validate()?;
    sim.validate()?;
    if scenarios.is_empty() {
        return Err(Error::Config("at least one training scenario is required".into()));
    }
    for s in scenarios {
        sim.clone().with_arrivals(s.clone()).validate()?;
    }
    let mut rng = SimRng::seed_from_u64(derive_seed(seed, 0));
    let mut policy = PpoPolicy::new(sim, hp, &mut rng)?;
    let mut opt = Optimizers::new(&policy, hp);
    let b = sim.bandwidth_units;

    let mut episode = 0u64;
    let episode_config = |e: u64| {
        sim.clone()
            .with_arrivals(scenarios[(e % scenarios.len() as u64) as usize].clone())
            .with_seed(derive_seed(seed, 1 + e))
    };
    let mut env = Environment::reset(episode_config(episode))?;
    let mut window = ThroughputWindow::new(hp.throughput_window);
    let mut aoi_norm = AoiNormalizer::default();
    let mut curve = Vec::with_capacity(hp.max_iterations);
    let mut best_avg = f64::NEG_INFINITY;
    let mut stale = 0usize;

    for iteration in 1..=hp.max_iterations {
        let mut traj = Trajectory::default();
        let (mut aoi_sum, mut served) = (0.0, 0u64);
        for _ in 0..hp.rollout_length {
            window.sync(&env);
            aoi_norm.observe(&env.aoi().iter().copied().collect::<Vec<_>>());
            let obs = build_observation(&env, &window, aoi_norm.divisor());
            let logits = policy.actor.predict(&obs.features)?;
            let (action, _) = sample_action(&logits, b, &mut rng);
            let log_prob = action_log_prob(&logits, &action, b)?;
            let value = policy.value(&obs.features)?;
            aoi_sum += env.aoi().iter().sum::<u64>() as f64 / sim.num_ues as f64;
            let step = env.step(&action)?;
            served += step.total_served();
            let mut end = None;
            if env.slot() >= sim.horizon {
                window.sync(&env);
                let next = build_observation(&env, &window, aoi_norm.divisor());
                end = Some(EpisodeEnd::Truncated {
                    bootstrap_value: policy.value(&next.features)?,
                });
                episode += 1;
                env = Environment::reset(episode_config(episode))?;
            }
            traj.push(Transition {
                observation: obs.features,
                action,
                log_prob,
                reward: step.reward,
                value,
                end,
            });
        }
        window.sync(&env);
        traj.bootstrap_value = policy.value(&build_observation(&env, &window, aoi_norm.divisor()).features)?;

        compute_advantages(&mut traj, hp)?;
        policy.value_norm.update(&traj.returns);
        let diagnostics = ppo_update(&mut policy, &mut opt, &traj, hp, &mut rng)?;

        let n = traj.len() as f64;
        let point = CurvePoint {
            iteration,
            mean_reward: traj.steps.iter().map(|s| s.reward).sum::<f64>() / n,
            mean_aoi: aoi_sum / n,
            throughput: served as f64 / n,
            clip_fraction: diagnostics.clip_fraction,
            diagnostics,
        };
        curve.push(point);

        if hp.patience > 0 && curve.len() >= hp.patience {
            let recent = &curve[curve.len() - hp.patience..];
            let avg = recent.iter().map(|p| p.mean_reward).sum::<f64>() / hp.patience as f64;
            if avg > best_avg + hp.convergence_tol {
                best_avg = avg;
                stale = 0;
            } else {
                stale += 1;
                if stale >= hp.patience {
                    break;
                }
            }
        }
    }
    aoi_norm.freeze();
    policy.aoi_divisor = aoi_norm.divisor();
    Ok(TrainOutcome { policy, curve })
}

/// Training curve CSV: `iteration,mean_reward,mean_aoi,throughput,clip_fraction`.
pub fn write_curve<W: Write>(curve: &[CurvePoint], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["iteration", "mean_reward", "mean_aoi", "throughput", "clip_fraction"])?;
    for p in curve {
        out.write_record([
            p.iteration.to_string(),
            p.mean_reward.to_string(),
            p.mean_aoi.to_string(),
            p.throughput.to_string(),
            p.clip_fraction.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<curve>", e))
}

/// How a trained policy turns logits into an allocation.
#[derive(Debug, Clone)]
pub enum EvalMode {
    /// [`mode_allocation`].
    Greedy,
    /// Stochastic draws, as during training.
    Sample(SimRng),
}

/// A trained policy behind the [`Scheduler`] interface.
#[derive(Debug, Clone)]
pub struct PpoScheduler {
    policy: PpoPolicy,
    window: ThroughputWindow,
    mode: EvalMode,
}

impl PpoScheduler {
    pub fn new(policy: PpoPolicy) -> Self {
        let window = ThroughputWindow::new(policy.throughput_window);
        PpoScheduler {
            policy,
            window,
            mode: EvalMode::Greedy,
        }
    }

    pub fn sampling(policy: PpoPolicy, seed: u64) -> Self {
        PpoScheduler {
            mode: EvalMode::Sample(SimRng::seed_from_u64(seed)),
            ..Self::new(policy)
        }
    }

    pub fn policy(&self) -> &PpoPolicy {
        &self.policy
    }
}

impl Scheduler for PpoScheduler {
    fn name(&self) -> &str {
        "ppo"
    }

    fn decide(&mut self, env: &Environment) -> Result<Schedule> {
        self.policy.check_compatible(env.config())?;
        self.window.sync(env);
        let obs = build_observation(env, &self.window, self.policy.aoi_divisor);
        let logits = self.policy.actor.predict(&obs.features)?;
        let b = env.config().bandwidth_units;
        Ok(match &mut self.mode {
            EvalMode::Greedy => mode_allocation(&logits, b),
            EvalMode::Sample(rng) => sample_action(&logits, b, rng).0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedulers::allocations_up_to;
    use crate::traffic::ArrivalSpec;

    fn step(reward: f64, value: f64, end: Option<EpisodeEnd>) -> Transition {
        Transition {
            observation: vec![],
            action: Schedule::idle(1),
            log_prob: 0.0,
            reward,
            value,
            end,
        }
    }

    #[test]
    fn fresh_observation_is_zero() {
        let env = Environment::reset(SimConfig::new(3, 1)).unwrap();
        let window = ThroughputWindow::new(5);
        assert!(build_observation(&env, &window, 1.0).features.iter().all(|f| *f == 0.0));
    }

    #[test]
    fn full_queue_feature_is_one() {
        let mut config = SimConfig::new(2, 1).with_arrivals(vec![ArrivalSpec::constant(4000.0), ArrivalSpec::silent()]);
        config.queue_capacity = 8;
        let mut env = Environment::reset(config).unwrap();
        for _ in 0..3 {
            env.step(&Schedule::idle(2)).unwrap();
        }
        let obs = build_observation(&env, &ThroughputWindow::new(4), 10.0);
        assert_eq!(obs.queue(0), 1.0);
        assert_eq!(obs.aoi(1), 0.3);
    }

    #[test]
    fn saturated_delivery_gives_unit_throughput() {
        let config = SimConfig::new(3, 2).with_arrivals(vec![
            ArrivalSpec::constant(5000.0),
            ArrivalSpec::silent(),
            ArrivalSpec::silent(),
        ]);
        let mut env = Environment::reset(config).unwrap();
        let mut window = ThroughputWindow::new(4);
        for _ in 0..6 {
            window.sync(&env);
            env.step(&Schedule::new(vec![2, 0, 0])).unwrap();
        }
        window.sync(&env);
        assert_eq!(window.len(), 4);
        let obs = build_observation(&env, &window, 1.0);
        assert_eq!(obs.throughput(0), 1.0);
        assert_eq!(obs.throughput(1), 0.0);
    }

    #[test]
    fn window_clears_on_new_episode() {
        let config = SimConfig::new(2, 1).with_arrivals(vec![ArrivalSpec::constant(1000.0); 2]);
        let mut env = Environment::reset(config.clone()).unwrap();
        let mut window = ThroughputWindow::new(3);
        window.sync(&env);
        env.step(&Schedule::new(vec![1, 0])).unwrap();
        window.sync(&env);
        assert_eq!(window.mean(0), 1.0);
        let env = Environment::reset(config).unwrap();
        window.sync(&env);
        assert!(window.is_empty());
    }

    #[test]
    fn aoi_normalizer_floor_and_freeze() {
        let mut n = AoiNormalizer::default();
        n.observe(&[0, 0]);
        assert_eq!(n.divisor(), 1.0);
        n.observe(&[4, 9]);
        assert_eq!(n.divisor(), 9.0);
        n.freeze();
        n.observe(&[50]);
        assert_eq!(n.divisor(), 9.0);
    }

    #[test]
    fn degenerate_logits_pick_one_ue() {
        let mut rng = SimRng::seed_from_u64(1);
        let (s, lp) = sample_action(&[50.0, -50.0, -50.0], 2, &mut rng);
        assert_eq!(s.alloc, vec![2, 0, 0]);
        assert!(lp.abs() < 1e-12);
        assert!(lp <= 0.0);
    }

    #[test]
    fn uniform_logits_sample_evenly() {
        let mut rng = SimRng::seed_from_u64(2);
        let draws = 100_000;
        let first = (0..draws)
            .filter(|_| sample_action(&[0.3, 0.3], 1, &mut rng).0.alloc[0] == 1)
            .count();
        assert!((first as f64 / draws as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn samples_use_every_unit() {
        let mut rng = SimRng::seed_from_u64(3);
        for _ in 0..1000 {
            let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert_eq!(sample_action(&logits, 4, &mut rng).0.total(), 4);
        }
    }

    #[test]
    fn log_prob_examples() {
        let lp = action_log_prob(&[0.0, 0.0], &Schedule::new(vec![1, 0]), 1).unwrap();
        assert!((lp - 0.5f64.ln()).abs() < 1e-15);
        let lp = action_log_prob(&[1.0, 1.0], &Schedule::new(vec![1, 1]), 2).unwrap();
        assert!((lp - 0.5f64.ln()).abs() < 1e-15);
        assert!(action_log_prob(&[0.0, 0.0], &Schedule::new(vec![1, 0]), 2).is_err());
        assert!(action_log_prob(&[0.0, 0.0, 0.0], &Schedule::new(vec![1, 0]), 1).is_err());
    }

    #[test]
    fn log_prob_normalizes_over_compositions() {
        let logits = [0.4, -1.1, 2.0];
        let total: f64 = allocations_up_to(3, 2)
            .into_iter()
            .filter(|a| a.iter().sum::<u32>() == 2)
            .map(|a| action_log_prob(&logits, &Schedule::new(a), 2).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sequence_log_prob_plus_coefficient_is_allocation_log_prob() {
        let mut rng = SimRng::seed_from_u64(4);
        let logits = [0.2, 1.3, -0.4, 0.0];
        for _ in 0..50 {
            let (s, seq) = sample_action(&logits, 3, &mut rng);
            let coeff = ln_factorial(3) - s.alloc.iter().map(|&c| ln_factorial(c)).sum::<f64>();
            let full = action_log_prob(&logits, &s, 3).unwrap();
            assert!((seq + coeff - full).abs() < 1e-12);
        }
    }

    #[test]
    fn mode_of_degenerate_policy() {
        assert_eq!(mode_allocation(&[20.0, 0.0, 0.0, 0.0], 3).alloc, vec![3, 0, 0, 0]);
        assert_eq!(mode_allocation(&[0.0, 0.0, 0.0], 2).alloc, vec![1, 1, 0]);
    }

    #[test]
    fn advantages_null_signal() {
        let mut traj = Trajectory::default();
        for _ in 0..4 {
            traj.push(step(0.0, 0.0, None));
        }
        assert!(gae(&traj, 0.9, 0.95).unwrap().iter().all(|a| *a == 0.0));
    }

    #[test]
    fn advantages_single_terminal_step() {
        let mut traj = Trajectory::default();
        traj.push(step(2.5, 0.75, Some(EpisodeEnd::Terminal)));
        traj.bootstrap_value = 100.0;
        assert_eq!(gae(&traj, 0.37, 0.95).unwrap(), vec![1.75]);
    }

    #[test]
    fn advantages_three_step_discounted() {
        let mut traj = Trajectory::default();
        traj.push(step(1.0, 0.0, None));
        traj.push(step(1.0, 0.0, None));
        traj.push(step(1.0, 0.0, Some(EpisodeEnd::Terminal)));
        assert_eq!(gae(&traj, 0.5, 1.0).unwrap(), vec![1.75, 1.5, 1.0]);
    }

    #[test]
    fn truncation_bootstraps() {
        let mut traj = Trajectory::default();
        traj.push(step(1.0, 0.5, Some(EpisodeEnd::Truncated { bootstrap_value: 4.0 })));
        traj.push(step(0.0, 1.0, None));
        traj.bootstrap_value = 2.0;
        let adv = gae(&traj, 0.5, 0.9).unwrap();
        assert_eq!(adv, vec![1.0 + 0.5 * 4.0 - 0.5, 0.5 * 2.0 - 1.0]);
    }

    #[test]
    fn empty_trajectory_errors() {
        let mut traj = Trajectory::default();
        assert!(matches!(
            compute_advantages(&mut traj, &PpoHyperparams::default()),
            Err(Error::EmptyTrajectory)
        ));
    }

    #[test]
    fn normalized_advantages() {
        let mut traj = Trajectory::default();
        for (r, v) in [(1.0, 0.2), (-0.5, 0.1), (3.0, 1.0), (0.0, -2.0), (0.7, 0.7)] {
            traj.push(step(r, v, None));
        }
        compute_advantages(&mut traj, &PpoHyperparams::default()).unwrap();
        let n = traj.len() as f64;
        let mean = traj.advantages.iter().sum::<f64>() / n;
        let var = traj.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-8);
    }

    #[test]
    fn value_normalizer_merges_batches() {
        let xs = [1.0, 4.0, -2.0, 7.5, 0.25, 3.0, 3.0];
        let mut vn = ValueNormalizer::default();
        vn.update(&xs[..3]);
        vn.update(&xs[3..]);
        let mean = xs.iter().sum::<f64>() / 7.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 7.0;
        assert!((vn.mean - mean).abs() < 1e-12);
        assert!((vn.var - var).abs() < 1e-12);
        assert!((vn.denormalize(vn.normalize(2.2)) - 2.2).abs() < 1e-12);
    }

    fn small_actor(seed: u64) -> Mlp {
        Mlp::new(&[6, 8, 8, 2], &mut SimRng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn on_policy_surrogate_is_mean_advantage() {
        let actor = small_actor(5);
        let obs: Vec<Vec<f64>> = (0..4).map(|i| vec![0.1 * i as f64; 6]).collect();
        let actions = [
            Schedule::new(vec![1, 0]),
            Schedule::new(vec![0, 1]),
            Schedule::new(vec![1, 0]),
            Schedule::new(vec![0, 1]),
        ];
        let adv = normalize(&[0.3, -1.0, 2.0, 0.1]);
        let samples: Vec<ActorSample<'_>> = (0..4)
            .map(|i| {
                let logits = actor.predict(&obs[i]).unwrap();
                ActorSample {
                    observation: &obs[i],
                    action: &actions[i],
                    old_log_prob: action_log_prob(&logits, &actions[i], 1).unwrap(),
                    advantage: adv[i],
                }
            })
            .collect();
        let l = actor_loss(&actor, &samples, 0.2, 0.0, None).unwrap();
        assert!((l.mean_ratio - 1.0).abs() < 1e-12);
        assert!(l.surrogate.abs() < 1e-12);
        assert_eq!(l.clip_fraction, 0.0);
    }

    #[test]
    fn zero_advantage_leaves_only_entropy_gradient() {
        let actor = small_actor(6);
        let obs = vec![0.2, -0.1, 0.4, 0.0, 0.9, 0.3];
        let action = Schedule::new(vec![2, 1]);
        let sample = ActorSample {
            observation: &obs,
            action: &action,
            old_log_prob: -1.0,
            advantage: 0.0,
        };
        let mut g = vec![0.0; actor.params().len()];
        actor_loss(&actor, &[sample], 0.2, 0.0, Some(&mut g)).unwrap();
        assert!(g.iter().all(|x| *x == 0.0));
        actor_loss(&actor, &[sample], 0.2, 0.05, Some(&mut g)).unwrap();
        assert!(g.iter().any(|x| *x != 0.0));
    }

    #[test]
    fn ratio_above_clip_uses_clipped_value() {
        let actor = small_actor(7);
        let obs = vec![0.5; 6];
        let action = Schedule::new(vec![1, 0]);
        let logits = actor.predict(&obs).unwrap();
        let current = action_log_prob(&logits, &action, 1).unwrap();
        let sample = ActorSample {
            observation: &obs,
            action: &action,
            old_log_prob: current - 1.5f64.ln(),
            advantage: 1.0,
        };
        let mut g = vec![0.0; actor.params().len()];
        let l = actor_loss(&actor, &[sample], 0.2, 0.0, Some(&mut g)).unwrap();
        assert!((l.mean_ratio - 1.5).abs() < 1e-12);
        assert!((l.surrogate - 1.2).abs() < 1e-12);
        assert_eq!(l.clip_fraction, 1.0);
        // The clipped term is constant in the parameters.
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn pessimistic_side_keeps_gradient() {
        // r > 1 + eps with A < 0: the unclipped term is the minimum.
        let actor = small_actor(8);
        let obs = vec![0.5; 6];
        let action = Schedule::new(vec![1, 0]);
        let logits = actor.predict(&obs).unwrap();
        let current = action_log_prob(&logits, &action, 1).unwrap();
        let sample = ActorSample {
            observation: &obs,
            action: &action,
            old_log_prob: current - 1.5f64.ln(),
            advantage: -1.0,
        };
        let mut g = vec![0.0; actor.params().len()];
        let l = actor_loss(&actor, &[sample], 0.2, 0.0, Some(&mut g)).unwrap();
        assert!((l.surrogate + 1.5).abs() < 1e-12);
        assert!(g.iter().any(|x| *x != 0.0));
    }

    fn tiny_setup() -> (SimConfig, PpoHyperparams) {
        let sim = SimConfig::new(2, 1)
            .with_arrivals(vec![ArrivalSpec::silent(), ArrivalSpec::poisson(1500.0)])
            .with_horizon(64);
        let hp = PpoHyperparams {
            rollout_length: 64,
            minibatch_size: 16,
            epochs: 2,
            max_iterations: 3,
            hidden_width: 8,
            patience: 0,
            ..PpoHyperparams::default()
        };
        (sim, hp)
    }

    #[test]
    fn single_iteration_curve() {
        let (sim, mut hp) = tiny_setup();
        hp.max_iterations = 1;
        let out = train(&sim, &hp, 9).unwrap();
        assert_eq!(out.curve.len(), 1);
        assert_eq!(out.curve[0].iteration, 1);
    }

    #[test]
    fn training_is_reproducible() {
        let (sim, hp) = tiny_setup();
        let a = train(&sim, &hp, 10).unwrap();
        let b = train(&sim, &hp, 10).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.policy, b.policy);
        let c = train(&sim, &hp, 11).unwrap();
        assert_ne!(a.curve, c.curve);
    }

    #[test]
    fn update_rolls_back_on_non_finite_loss() {
        let (sim, hp) = tiny_setup();
        let mut rng = SimRng::seed_from_u64(12);
        let mut policy = PpoPolicy::new(&sim, &hp, &mut rng).unwrap();
        let mut opt = Optimizers::new(&policy, &hp);
        let mut traj = Trajectory::default();
        for i in 0..20 {
            traj.push(Transition {
                observation: vec![0.1 * i as f64; 6],
                action: Schedule::new(vec![1, 0]),
                log_prob: -0.7,
                reward: 1.0,
                value: 0.0,
                end: None,
            });
        }
        compute_advantages(&mut traj, &hp).unwrap();
        traj.advantages[17] = f64::NAN;
        let before = (policy.clone(), opt.actor.clone());
        let err = ppo_update(&mut policy, &mut opt, &traj, &hp, &mut rng);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(policy, before.0);
        assert_eq!(opt.actor, before.1);
    }

    #[test]
    fn update_requires_advantages() {
        let (sim, hp) = tiny_setup();
        let mut rng = SimRng::seed_from_u64(13);
        let mut policy = PpoPolicy::new(&sim, &hp, &mut rng).unwrap();
        let mut opt = Optimizers::new(&policy, &hp);
        let mut traj = Trajectory::default();
        traj.push(step(1.0, 0.0, None));
        assert!(ppo_update(&mut policy, &mut opt, &traj, &hp, &mut rng).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_compatibility() {
        let (sim, hp) = tiny_setup();
        let mut policy = train(&sim, &hp, 14).unwrap().policy;
        policy.value_norm.count = 1.0;
        let mut buf = Vec::new();
        policy.write_to(&mut buf).unwrap();
        let back = PpoPolicy::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, policy);
        assert!(back.check_compatible(&sim).is_ok());
        let other = SimConfig::new(3, 1);
        assert!(matches!(back.check_compatible(&other), Err(Error::Checkpoint(_))));
        let env = Environment::reset(other).unwrap();
        assert!(PpoScheduler::new(back).decide(&env).is_err());
        assert!(PpoPolicy::read_from(&buf[..20]).is_err());
        assert!(PpoPolicy::read_from(&b"garbage!garbage!"[..]).is_err());
    }

    #[test]
    fn invalid_hyperparameters() {
        let hp = PpoHyperparams {
            minibatch_size: 100,
            rollout_length: 50,
            ..PpoHyperparams::default()
        };
        assert!(hp.validate().is_err());
        let hp = PpoHyperparams {
            gamma: 1.5,
            ..PpoHyperparams::default()
        };
        assert!(hp.validate().is_err());
    }
}

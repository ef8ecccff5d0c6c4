//! Experiment orchestration: TOML configs, episodes, rate sweeps, CSV
//! output and the command-line entry point.
//!
//! A config file looks like
//!
//! ```toml
//! eval_horizon = 20000
//! output = "sweep.csv"
//!
//! [sim]
//! num_ues = 6
//! bandwidth_units = 3
//! seed = 1
//!
//! [traffic]
//! kind = "poisson"
//! rate_range_hz = [60.0, 1300.0]
//!
//! [scheduler]
//! name = "rr"
//!
//! [sweep]
//! load_factors = [0.25, 1.5]
//! schedulers = ["rr", "pf"]
//! episodes_per_point = 10
//! ```
//!
//! Every section and key is optional; unknown keys are rejected.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::ppo::{train_with_scenarios, write_curve, PpoHyperparams, PpoPolicy, PpoScheduler, TrainOutcome};
use crate::reference::ReferenceSim;
use crate::schedulers::{
    allocations_up_to, random_decide, GreedyOracle, ProportionalFair, RandomScheduler, RoundRobin, Scheduler,
    StaticProportionalFair,
};
use crate::sim::{Environment, Schedule, SimConfig, DEFAULT_BETA, DEFAULT_QUEUE_CAPACITY};
use crate::traffic::{assign_rates, assign_rates_normal, ArrivalKind, ArrivalSpec, RateAssignment, DEFAULT_SLOT_DURATION_S};
use crate::{derive_seed, SimRng};

/// Header of every sweep CSV.
pub const CSV_HEADER: [&str; 6] = ["sweep_rate_hz", "scheduler", "episode", "mean_aoi", "throughput", "seed"];

/// Bytes per packet, for presenting throughput in bytes per second.
pub const PACKET_SIZE_BYTES: f64 = 2048.0;

pub const SCHEDULER_NAMES: [&str; 6] = ["rr", "pf", "pf-static", "oracle", "random", "ppo"];

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub num_ues: usize,
    pub bandwidth_units: u32,
    pub queue_capacity: usize,
    pub packets_per_unit: u32,
    pub beta: f64,
    /// Episode length used for training.
    pub horizon: u64,
    pub seed: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            num_ues: 6,
            bandwidth_units: 3,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            packets_per_unit: 1,
            beta: DEFAULT_BETA,
            horizon: 2048,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateDraw {
    Uniform,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficSection {
    pub kind: ArrivalKind,
    /// Per-slot rate variance for the normal-rate kind, in Hz^2.
    pub rate_variance: f64,
    pub slot_duration_s: f64,
    /// Explicit per-UE mean rates. When absent, rates are drawn from
    /// `rate_range_hz`.
    pub rates_hz: Option<Vec<f64>>,
    pub rate_range_hz: [f64; 2],
    pub rate_draw: RateDraw,
    /// Variance of the normal rate draw, in Hz^2.
    pub draw_variance: f64,
    pub rate_seed: u64,
}

impl Default for TrafficSection {
    fn default() -> Self {
        TrafficSection {
            kind: ArrivalKind::Poisson,
            rate_variance: 0.0,
            slot_duration_s: DEFAULT_SLOT_DURATION_S,
            rates_hz: None,
            rate_range_hz: [60.0, 1300.0],
            rate_draw: RateDraw::Uniform,
            draw_variance: 9000.0,
            rate_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PpoEvalMode {
    #[default]
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerSection {
    pub name: String,
    /// Policy checkpoint for `ppo`.
    pub checkpoint: Option<PathBuf>,
    /// One checkpoint per sweep point, used by `sweep` instead of
    /// `checkpoint`.
    pub point_checkpoints: Vec<PathBuf>,
    pub ppo_mode: PpoEvalMode,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        SchedulerSection {
            name: "rr".into(),
            checkpoint: None,
            point_checkpoints: Vec::new(),
            ppo_mode: PpoEvalMode::Greedy,
        }
    }
}

/// Sweep points are given either as mean per-UE rates or as multiples of
/// the service capacity `B * c` per slot; the base rate profile is rescaled
/// to each point.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub mean_rates_hz: Option<Vec<f64>>,
    pub load_factors: Option<Vec<f64>>,
    /// Defaults to the `[scheduler]` name alone.
    pub schedulers: Vec<String>,
    pub episodes_per_point: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            mean_rates_hz: None,
            load_factors: None,
            schedulers: Vec::new(),
            episodes_per_point: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Training episodes cycle through these loads; defaults to the sweep
    /// points, or the base profile when there is no sweep.
    pub mean_rates_hz: Option<Vec<f64>>,
    pub load_factors: Option<Vec<f64>>,
    pub checkpoint: Option<PathBuf>,
    pub curve: Option<PathBuf>,
    /// Train one policy per point instead of one on the mixture. Outputs
    /// are numbered with [`numbered_path`].
    pub per_point: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Slots per evaluation episode; defaults to `sim.horizon`.
    pub eval_horizon: Option<u64>,
    pub output: Option<PathBuf>,
    pub sim: SimSection,
    pub traffic: TrafficSection,
    pub scheduler: SchedulerSection,
    pub sweep: SweepSection,
    pub ppo: PpoHyperparams,
    pub train: TrainSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.base_sim()?.validate()?;
        if self.eval_horizon == Some(0) {
            return Err(Error::Config("eval_horizon must be >= 1".into()));
        }
        if self.sweep.episodes_per_point == 0 {
            return Err(Error::Config("sweep.episodes_per_point must be >= 1".into()));
        }
        if self.sweep.mean_rates_hz.is_some() && self.sweep.load_factors.is_some() {
            return Err(Error::Config("give sweep.mean_rates_hz or sweep.load_factors, not both".into()));
        }
        if self.train.mean_rates_hz.is_some() && self.train.load_factors.is_some() {
            return Err(Error::Config("give train.mean_rates_hz or train.load_factors, not both".into()));
        }
        for points in [&self.sweep.mean_rates_hz, &self.sweep.load_factors, &self.train.mean_rates_hz, &self.train.load_factors]
            .into_iter()
            .flatten()
        {
            if points.is_empty() {
                return Err(Error::Config("rate point lists must not be empty".into()));
            }
            if points.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(Error::Config("rate points must be finite and >= 0".into()));
            }
        }
        for name in self.sweep_schedulers().iter().chain([&self.scheduler.name]) {
            check_scheduler_name(name)?;
        }
        self.ppo.validate()
    }

    pub fn eval_horizon(&self) -> u64 {
        self.eval_horizon.unwrap_or(self.sim.horizon)
    }

    pub fn sweep_schedulers(&self) -> Vec<String> {
        if self.sweep.schedulers.is_empty() {
            vec![self.scheduler.name.clone()]
        } else {
            self.sweep.schedulers.clone()
        }
    }

    /// Per-UE mean rates before any rescaling.
    pub fn rate_profile(&self) -> Result<RateAssignment> {
        let t = &self.traffic;
        let n = self.sim.num_ues;
        let rates = match &t.rates_hz {
            Some(r) => RateAssignment::new(r.clone())?,
            None => {
                let [lo, hi] = t.rate_range_hz;
                let mut rng = SimRng::seed_from_u64(t.rate_seed);
                match t.rate_draw {
                    RateDraw::Uniform => assign_rates(n, lo, hi, &mut rng)?,
                    RateDraw::Normal => assign_rates_normal(n, lo, hi, t.draw_variance, &mut rng)?,
                }
            }
        };
        if rates.len() != n {
            return Err(Error::Config(format!("traffic.rates_hz has {} entries for {n} UEs", rates.len())));
        }
        Ok(rates)
    }

    /// Simulator config at the base rate profile, with the training horizon.
    pub fn base_sim(&self) -> Result<SimConfig> {
        let rates = self.rate_profile()?;
        Ok(self.sim_with_rates(&rates))
    }

    pub fn sim_with_rates(&self, rates: &RateAssignment) -> SimConfig {
        let s = &self.sim;
        let mut config = SimConfig::new(s.num_ues, s.bandwidth_units)
            .with_arrivals(rates.arrival_specs(self.traffic.kind, self.traffic.rate_variance, self.traffic.slot_duration_s))
            .with_beta(s.beta)
            .with_horizon(s.horizon)
            .with_seed(s.seed);
        config.queue_capacity = s.queue_capacity;
        config.packets_per_unit = s.packets_per_unit;
        config
    }

    /// Mean per-UE rate (Hz) at which total arrivals equal `factor` times
    /// the service capacity.
    pub fn load_to_mean_rate(&self, factor: f64) -> f64 {
        let capacity_hz =
            f64::from(self.sim.bandwidth_units) * f64::from(self.sim.packets_per_unit) / self.traffic.slot_duration_s;
        factor * capacity_hz / self.sim.num_ues as f64
    }

    /// Mean per-UE rates of the sweep points; the base profile's mean when
    /// no sweep is configured.
    pub fn sweep_points(&self) -> Result<Vec<f64>> {
        self.points(&self.sweep.mean_rates_hz, &self.sweep.load_factors)
    }

    pub fn train_points(&self) -> Result<Vec<f64>> {
        if self.train.mean_rates_hz.is_some() || self.train.load_factors.is_some() {
            self.points(&self.train.mean_rates_hz, &self.train.load_factors)
        } else {
            self.sweep_points()
        }
    }

    fn points(&self, rates: &Option<Vec<f64>>, loads: &Option<Vec<f64>>) -> Result<Vec<f64>> {
        Ok(match (rates, loads) {
            (Some(r), _) => r.clone(),
            (None, Some(l)) => l.iter().map(|&f| self.load_to_mean_rate(f)).collect(),
            (None, None) => vec![self.rate_profile()?.mean()],
        })
    }
}

fn check_scheduler_name(name: &str) -> Result<()> {
    if SCHEDULER_NAMES.contains(&name) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "unknown scheduler {name:?}; expected one of {}",
            SCHEDULER_NAMES.join(", ")
        )))
    }
}

/// Builds a scheduler by name. `seed` feeds the stochastic ones; `policy`
/// is required for `ppo`.
pub fn make_scheduler(
    name: &str,
    rates: &RateAssignment,
    seed: u64,
    policy: Option<&PpoPolicy>,
    ppo_mode: PpoEvalMode,
) -> Result<Box<dyn Scheduler>> {
    check_scheduler_name(name)?;
    Ok(match name {
        "rr" => Box::new(RoundRobin::new()),
        "pf" => Box::new(ProportionalFair::new(rates.clone())),
        "pf-static" => Box::new(StaticProportionalFair::new(rates.clone())),
        "oracle" => Box::new(GreedyOracle::new()),
        "random" => Box::new(RandomScheduler::new(seed)),
        _ => {
            let policy = policy
                .ok_or_else(|| Error::Config("scheduler \"ppo\" needs scheduler.checkpoint".into()))?
                .clone();
            match ppo_mode {
                PpoEvalMode::Greedy => Box::new(PpoScheduler::new(policy)),
                PpoEvalMode::Sample => Box::new(PpoScheduler::sampling(policy, seed)),
            }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeMetrics {
    /// AoI averaged over UEs and over the `T` slots, each slot contributing
    /// the ages in effect when its schedule is decided.
    pub mean_aoi: f64,
    /// Delivered packets per slot.
    pub throughput: f64,
    pub packets_served: u64,
    pub total_reward: f64,
    pub slots: u64,
}

impl EpisodeMetrics {
    pub fn throughput_bytes_per_s(&self, slot_duration_s: f64) -> f64 {
        self.throughput * PACKET_SIZE_BYTES / slot_duration_s
    }
}

/// Runs `config.horizon` slots from a fresh environment.
pub fn run_episode(config: &SimConfig, scheduler: &mut dyn Scheduler) -> Result<EpisodeMetrics> {
    let mut env = Environment::reset(config.clone())?;
    let mut aoi_sum = 0u128;
    let mut served = 0u64;
    let mut reward = 0.0;
    for _ in 0..config.horizon {
        aoi_sum += env.ues().iter().map(|u| u128::from(u.aoi)).sum::<u128>();
        let schedule = scheduler.decide(&env)?;
        let step = env.step(&schedule)?;
        served += step.total_served();
        reward += step.reward;
    }
    let t = config.horizon as f64;
    Ok(EpisodeMetrics {
        mean_aoi: aoi_sum as f64 / (t * config.num_ues as f64),
        throughput: served as f64 / t,
        packets_served: served,
        total_reward: reward,
        slots: config.horizon,
    })
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub sweep_rate_hz: f64,
    pub scheduler: String,
    pub episode: usize,
    pub seed: u64,
    pub metrics: EpisodeMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointSummary {
    pub sweep_rate_hz: f64,
    pub scheduler: String,
    pub mean_aoi: f64,
    pub aoi_std_err: f64,
    pub mean_throughput: f64,
    pub throughput_std_err: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    /// In (point, scheduler, episode) order.
    pub records: Vec<EpisodeRecord>,
}

impl MetricsReport {
    /// Per (point, scheduler) means and standard errors, in record order.
    pub fn summaries(&self) -> Vec<PointSummary> {
        let mut out: Vec<PointSummary> = Vec::new();
        let mut groups: Vec<Vec<&EpisodeRecord>> = Vec::new();
        for r in &self.records {
            match groups.last_mut() {
                Some(g) if g[0].sweep_rate_hz == r.sweep_rate_hz && g[0].scheduler == r.scheduler => g.push(r),
                _ => groups.push(vec![r]),
            }
        }
        for g in groups {
            let aoi: Vec<f64> = g.iter().map(|r| r.metrics.mean_aoi).collect();
            let thr: Vec<f64> = g.iter().map(|r| r.metrics.throughput).collect();
            let (mean_aoi, aoi_std_err) = mean_and_std_err(&aoi);
            let (mean_throughput, throughput_std_err) = mean_and_std_err(&thr);
            out.push(PointSummary {
                sweep_rate_hz: g[0].sweep_rate_hz,
                scheduler: g[0].scheduler.clone(),
                mean_aoi,
                aoi_std_err,
                mean_throughput,
                throughput_std_err,
                episodes: g.len(),
            });
        }
        out
    }

    pub fn summary(&self, sweep_rate_hz: f64, scheduler: &str) -> Option<PointSummary> {
        self.summaries()
            .into_iter()
            .find(|s| s.sweep_rate_hz == sweep_rate_hz && s.scheduler == scheduler)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(CSV_HEADER)?;
        for r in &self.records {
            out.write_record([
                r.sweep_rate_hz.to_string(),
                r.scheduler.clone(),
                r.episode.to_string(),
                r.metrics.mean_aoi.to_string(),
                r.metrics.throughput.to_string(),
                r.seed.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Sample mean and standard error (zero for a single value).
pub fn mean_and_std_err(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Seed of episode `episode` at sweep point `point`. It does not depend on
/// the scheduler, so every scheduler sees the same arrivals.
pub fn episode_seed(base: u64, point: usize, episode: usize) -> u64 {
    derive_seed(derive_seed(base, point as u64), episode as u64)
}

/// Stream for a scheduler's own randomness, kept apart from the arrivals.
fn scheduler_seed(episode_seed: u64) -> u64 {
    derive_seed(episode_seed, 0x5c4e_d01e)
}

/// Runs every (point, scheduler, episode) combination of the sweep in
/// parallel and returns the rows in (point, scheduler, episode) order.
///
/// `policies` feeds `ppo`: either one policy shared by all points or one
/// per sweep point.
pub fn run_sweep(config: &ExperimentConfig, policies: &[PpoPolicy]) -> Result<MetricsReport> {
    config.validate()?;
    let profile = config.rate_profile()?;
    let points = config.sweep_points()?;
    let schedulers = config.sweep_schedulers();
    if schedulers.iter().any(|s| s == "ppo") {
        if policies.is_empty() {
            return Err(Error::Config("scheduler \"ppo\" needs scheduler.checkpoint".into()));
        }
        if policies.len() != 1 && policies.len() != points.len() {
            return Err(Error::Config(format!(
                "{} policies for {} sweep points",
                policies.len(),
                points.len()
            )));
        }
    }
    let policy_for = |p: usize| policies.get(p).or(policies.first());
    let episodes = config.sweep.episodes_per_point;
    let mut jobs = Vec::with_capacity(points.len() * schedulers.len() * episodes);
    for (p, &rate) in points.iter().enumerate() {
        for name in &schedulers {
            for e in 0..episodes {
                jobs.push((p, rate, name.as_str(), e));
            }
        }
    }
    let records = jobs
        .into_par_iter()
        .map(|(p, rate, name, episode)| {
            let rates = profile.scaled_to_mean(rate);
            let seed = episode_seed(config.sim.seed, p, episode);
            let sim = config
                .sim_with_rates(&rates)
                .with_seed(seed)
                .with_horizon(config.eval_horizon());
            let mut scheduler =
                make_scheduler(name, &rates, scheduler_seed(seed), policy_for(p), config.scheduler.ppo_mode)?;
            let metrics = run_episode(&sim, scheduler.as_mut())?;
            Ok(EpisodeRecord {
                sweep_rate_hz: rate,
                scheduler: name.to_string(),
                episode,
                seed,
                metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport { records })
}

/// Trains on the configured training points: one policy on their mixture,
/// or one per point when `train.per_point` is set.
pub fn train_from_config(config: &ExperimentConfig) -> Result<Vec<TrainOutcome>> {
    config.validate()?;
    let profile = config.rate_profile()?;
    let scenarios: Vec<Vec<ArrivalSpec>> = config
        .train_points()?
        .into_iter()
        .map(|rate| config.sim_with_rates(&profile.scaled_to_mean(rate)).arrivals)
        .collect();
    let sim = config.base_sim()?;
    if config.train.per_point {
        scenarios
            .iter()
            .enumerate()
            .map(|(i, s)| {
                train_with_scenarios(&sim, std::slice::from_ref(s), &config.ppo, derive_seed(config.sim.seed, i as u64))
            })
            .collect()
    } else {
        Ok(vec![train_with_scenarios(&sim, &scenarios, &config.ppo, config.sim.seed)?])
    }
}

/// `dir/name.ext` becomes `dir/name.{index}.ext`.
pub fn numbered_path(path: &Path, index: usize) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.{index}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{index}"),
    };
    path.with_file_name(name)
}

/// Outcome of the brute-force consistency checks behind `oracle-check`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OracleCheckReport {
    pub reference_instances: usize,
    pub reference_mismatches: Vec<String>,
    pub oracle_states: usize,
    pub oracle_mismatches: Vec<String>,
}

impl OracleCheckReport {
    pub fn passed(&self) -> bool {
        self.reference_mismatches.is_empty() && self.oracle_mismatches.is_empty()
    }
}

/// Replays random small instances through both [`Environment`] and
/// [`ReferenceSim`], and checks the greedy oracle against a full enumeration
/// on random reachable states.
pub fn oracle_check(seed: u64, instances: usize) -> Result<OracleCheckReport> {
    let mut report = OracleCheckReport::default();
    let mut rng = SimRng::seed_from_u64(seed);
    for i in 0..instances {
        let num_ues = rng.random_range(2..=4usize);
        let b = rng.random_range(1..num_ues as u32);
        let horizon = rng.random_range(1..=50u64);
        let kinds = [ArrivalKind::Poisson, ArrivalKind::Bernoulli, ArrivalKind::Constant];
        let arrivals = (0..num_ues)
            .map(|_| ArrivalSpec::new(kinds[rng.random_range(0..kinds.len())], rng.random_range(0.0..1500.0)))
            .collect();
        let mut config = SimConfig::new(num_ues, b)
            .with_arrivals(arrivals)
            .with_seed(rng.random())
            .with_horizon(horizon);
        config.queue_capacity = rng.random_range(1..=6);
        config.packets_per_unit = rng.random_range(1..=2);
        let mut env = Environment::reset(config.clone())?;
        let mut reference = ReferenceSim::new(num_ues, config.queue_capacity, config.packets_per_unit, config.beta);
        for t in 0..horizon {
            let schedule = random_partial(&mut rng, num_ues, b);
            let step = env.step(&schedule)?;
            let expected = reference.step(&step.arrivals, &schedule.alloc);
            if expected.aoi != step.per_ue_aoi
                || expected.served != step.packets_served
                || expected.dropped != step.packets_dropped
                || expected.reward != step.reward
            {
                report.reference_mismatches.push(format!(
                    "instance {i} slot {t}: simulator aoi {:?}, reference aoi {:?}",
                    step.per_ue_aoi, expected.aoi
                ));
                break;
            }
        }
    }
    report.reference_instances = instances;

    let oracle = GreedyOracle::new();
    for i in 0..instances {
        let num_ues = rng.random_range(2..=5usize);
        let b = rng.random_range(1..=(num_ues as u32 - 1).min(3));
        let arrivals = (0..num_ues)
            .map(|_| ArrivalSpec::poisson(rng.random_range(0.0..2500.0)))
            .collect();
        let mut config = SimConfig::new(num_ues, b)
            .with_arrivals(arrivals)
            .with_seed(rng.random())
            .with_beta(rng.random_range(0.0..0.5));
        config.queue_capacity = rng.random_range(1..=10);
        let mut env = Environment::reset(config)?;
        for _ in 0..rng.random_range(0..30) {
            env.step(&random_partial(&mut rng, num_ues, b))?;
        }
        let (_, chosen) = oracle.decide_with_reward(&env)?;
        let best = allocations_up_to(num_ues, b)
            .into_iter()
            .map(|a| env.clone().step(&Schedule::new(a)).map(|s| s.reward))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        if chosen != best {
            report
                .oracle_mismatches
                .push(format!("state {i}: oracle reward {chosen}, enumeration max {best}"));
        }
    }
    report.oracle_states = instances;
    Ok(report)
}

/// Up to `b` units, not necessarily all of them.
fn random_partial<R: Rng + ?Sized>(rng: &mut R, n: usize, b: u32) -> Schedule {
    let used = rng.random_range(0..=b);
    random_decide(rng, n, used)
}

#[derive(Debug, Parser)]
#[command(name = "aoisched", about = "AoI-aware uplink scheduling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct CommonArgs {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides sim.seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the scheduler (and the sweep's scheduler list).
    #[arg(long)]
    scheduler: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one episode at the base rate profile and print its metrics.
    Run(CommonArgs),
    /// Run the configured rate sweep and write the per-episode CSV.
    Sweep(CommonArgs),
    /// Train a PPO policy; writes the checkpoint to --out and the training
    /// curve next to it.
    Train(CommonArgs),
    /// Check the simulator against the reference model and the greedy
    /// oracle against full enumeration on random small instances.
    OracleCheck(CommonArgs),
}

/// Command-line entry point. Returns the process exit code: 0 on success,
/// 2 on usage errors, 1 on any other failure.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.sim.seed = seed;
    }
    if let Some(name) = &args.scheduler {
        config.scheduler.name = name.clone();
        config.sweep.schedulers = vec![name.clone()];
    }
    config.validate()?;
    Ok(config)
}

/// Loads the configured checkpoints: the per-point list when `per_point`
/// is set and the list is nonempty, the single checkpoint otherwise.
fn load_policies(config: &ExperimentConfig, per_point: bool) -> Result<Vec<PpoPolicy>> {
    let paths: Vec<&PathBuf> = if per_point && !config.scheduler.point_checkpoints.is_empty() {
        config.scheduler.point_checkpoints.iter().collect()
    } else {
        let path = config
            .scheduler
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Config("scheduler \"ppo\" needs scheduler.checkpoint".into()))?;
        vec![path]
    };
    let sim = config.base_sim()?;
    paths
        .into_iter()
        .map(|path| {
            let policy = PpoPolicy::load(path)?;
            policy.check_compatible(&sim)?;
            Ok(policy)
        })
        .collect()
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run(args) => {
            let config = load_config(&args)?;
            let policy = if config.scheduler.name == "ppo" {
                load_policies(&config, false)?.pop()
            } else {
                None
            };
            let rates = config.rate_profile()?;
            let seed = config.sim.seed;
            let sim = config.base_sim()?.with_horizon(config.eval_horizon());
            let mut scheduler = make_scheduler(
                &config.scheduler.name,
                &rates,
                scheduler_seed(seed),
                policy.as_ref(),
                config.scheduler.ppo_mode,
            )?;
            let m = run_episode(&sim, scheduler.as_mut())?;
            println!("scheduler {}", config.scheduler.name);
            println!("slots {}", m.slots);
            println!("mean_aoi {}", m.mean_aoi);
            println!("throughput {}", m.throughput);
            println!(
                "throughput_bytes_per_s {}",
                m.throughput_bytes_per_s(config.traffic.slot_duration_s)
            );
            println!("total_reward {}", m.total_reward);
            if let Some(out) = args.out.as_ref().or(config.output.as_ref()) {
                let report = MetricsReport {
                    records: vec![EpisodeRecord {
                        sweep_rate_hz: rates.mean(),
                        scheduler: config.scheduler.name.clone(),
                        episode: 0,
                        seed,
                        metrics: m,
                    }],
                };
                report.save_csv(out)?;
            }
            Ok(())
        }
        Command::Sweep(args) => {
            let config = load_config(&args)?;
            let out = args
                .out
                .clone()
                .or(config.output.clone())
                .ok_or_else(|| Error::Config("sweep needs --out or an output key".into()))?;
            let policies = if config.sweep_schedulers().iter().any(|s| s == "ppo") {
                load_policies(&config, true)?
            } else {
                Vec::new()
            };
            let report = run_sweep(&config, &policies)?;
            report.save_csv(&out)?;
            for s in report.summaries() {
                println!(
                    "{:>10.2} Hz {:<10} aoi {:>10.3} ± {:.3}  throughput {:.4} ± {:.4}",
                    s.sweep_rate_hz, s.scheduler, s.mean_aoi, s.aoi_std_err, s.mean_throughput, s.throughput_std_err
                );
            }
            Ok(())
        }
        Command::Train(args) => {
            let config = load_config(&args)?;
            let checkpoint = args
                .out
                .clone()
                .or(config.train.checkpoint.clone())
                .ok_or_else(|| Error::Config("train needs --out or train.checkpoint".into()))?;
            let curve = config.train.curve.clone().unwrap_or_else(|| checkpoint.with_extension("curve.csv"));
            let outcomes = train_from_config(&config)?;
            let numbered = outcomes.len() > 1 || config.train.per_point;
            for (i, outcome) in outcomes.iter().enumerate() {
                let (checkpoint, curve) = if numbered {
                    (numbered_path(&checkpoint, i), numbered_path(&curve, i))
                } else {
                    (checkpoint.clone(), curve.clone())
                };
                outcome.policy.save(&checkpoint)?;
                let file = std::fs::File::create(&curve).map_err(|e| Error::io(&curve, e))?;
                write_curve(&outcome.curve, std::io::BufWriter::new(file))?;
                if let (Some(first), Some(last)) = (outcome.curve.first(), outcome.curve.last()) {
                    println!(
                        "iterations {} mean_reward {} -> {}",
                        outcome.curve.len(),
                        first.mean_reward,
                        last.mean_reward
                    );
                }
                println!("checkpoint {}", checkpoint.display());
                println!("curve {}", curve.display());
            }
            Ok(())
        }
        Command::OracleCheck(args) => {
            let config = load_config(&args)?;
            let report = oracle_check(config.sim.seed, 100)?;
            println!(
                "reference equivalence: {} instances, {} mismatches",
                report.reference_instances,
                report.reference_mismatches.len()
            );
            println!(
                "oracle optimality: {} states, {} mismatches",
                report.oracle_states,
                report.oracle_mismatches.len()
            );
            for m in report.reference_mismatches.iter().chain(&report.oracle_mismatches) {
                eprintln!("{m}");
            }
            if report.passed() {
                Ok(())
            } else {
                Err(Error::InvalidArgument("oracle check failed".into()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn silent(n: usize, b: u32, horizon: u64) -> SimConfig {
        SimConfig::new(n, b).with_horizon(horizon)
    }

    #[test]
    fn zero_arrivals_mean_aoi() {
        for t in [1u64, 2, 10, 999] {
            let m = run_episode(&silent(3, 1, t), &mut RoundRobin::new()).unwrap();
            assert_eq!(m.mean_aoi, (t as f64 - 1.0) / 2.0);
            assert_eq!(m.throughput, 0.0);
        }
    }

    #[test]
    fn dedicated_saturated_ue_has_zero_age() {
        // Every slot serves the packet generated in that slot.
        let config = SimConfig::new(2, 1)
            .with_arrivals(vec![ArrivalSpec::constant(1000.0), ArrivalSpec::silent()])
            .with_horizon(50);
        let mut env = Environment::reset(config).unwrap();
        for _ in 0..50 {
            let step = env.step(&Schedule::new(vec![1, 0])).unwrap();
            assert_eq!(step.per_ue_aoi[0], 0);
        }
    }

    #[test]
    fn throughput_within_capacity() {
        let config = SimConfig::new(4, 2)
            .with_arrivals(vec![ArrivalSpec::poisson(3000.0); 4])
            .with_horizon(500);
        let m = run_episode(&config, &mut RoundRobin::new()).unwrap();
        assert!(m.throughput <= 2.0);
        assert_eq!(m.throughput * 500.0, m.packets_served as f64);
    }

    #[test]
    fn minimal_config_parses() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.sweep_points().unwrap().len(), 1);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(
            ExperimentConfig::from_toml("[sim]\nnum_uez = 4"),
            Err(Error::Config(_))
        ));
        assert!(matches!(ExperimentConfig::from_toml("[ppo]\ngama = 0.9"), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "[sim]\nnum_ues = 3\nbandwidth_units = 3",
            "[sweep]\nepisodes_per_point = 0",
            "[sweep]\nload_factors = []",
            "[sweep]\nload_factors = [1.0]\nmean_rates_hz = [10.0]",
            "[scheduler]\nname = \"magic\"",
            "[traffic]\nrates_hz = [1.0, 2.0]",
            "eval_horizon = 0",
        ] {
            assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn load_factor_conversion() {
        let c = ExperimentConfig::from_toml("[sweep]\nload_factors = [0.5, 1.5]").unwrap();
        // 6 UEs sharing 3 packets per 1 ms slot.
        assert_eq!(c.sweep_points().unwrap(), vec![250.0, 750.0]);
    }

    #[test]
    fn single_point_sweep_csv() {
        let c = ExperimentConfig::from_toml("eval_horizon = 100\n[sweep]\nmean_rates_hz = [200.0]").unwrap();
        let report = run_sweep(&c, &[]).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "sweep_rate_hz,scheduler,episode,mean_aoi,throughput,seed");
        assert!(lines[1].starts_with("200,rr,0,"));
    }

    #[test]
    fn sweep_uses_common_seeds_across_schedulers() {
        let c = ExperimentConfig::from_toml(
            "eval_horizon = 50\n[sweep]\nmean_rates_hz = [100.0, 400.0]\nschedulers = [\"rr\", \"random\"]\nepisodes_per_point = 2",
        )
        .unwrap();
        let report = run_sweep(&c, &[]).unwrap();
        assert_eq!(report.records.len(), 8);
        for chunk in report.records.chunks(4) {
            assert_eq!(chunk[0].seed, chunk[2].seed);
            assert_eq!(chunk[1].seed, chunk[3].seed);
            assert_ne!(chunk[0].seed, chunk[1].seed);
        }
        let order: Vec<(&str, usize)> = report.records[..4].iter().map(|r| (r.scheduler.as_str(), r.episode)).collect();
        assert_eq!(order, vec![("rr", 0), ("rr", 1), ("random", 0), ("random", 1)]);
        assert_eq!(report.summaries().len(), 4);
    }

    #[test]
    fn ppo_sweep_needs_policy() {
        let c = ExperimentConfig::from_toml("[scheduler]\nname = \"ppo\"").unwrap();
        assert!(matches!(run_sweep(&c, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn numbered_paths() {
        assert_eq!(numbered_path(Path::new("out/p.bin"), 3), PathBuf::from("out/p.3.bin"));
        assert_eq!(numbered_path(Path::new("p"), 0), PathBuf::from("p.0"));
        assert_eq!(
            numbered_path(Path::new("p.curve.csv"), 1),
            PathBuf::from("p.curve.1.csv")
        );
    }

    #[test]
    fn std_err_of_constant_series_is_zero() {
        assert_eq!(mean_and_std_err(&[2.0, 2.0, 2.0]), (2.0, 0.0));
        let (m, se) = mean_and_std_err(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_check_passes() {
        assert!(oracle_check(3, 20).unwrap().passed());
    }
}

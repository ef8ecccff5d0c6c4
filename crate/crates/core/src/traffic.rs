//! Per-UE packet arrival processes.
//!
//! Rates are given in Hz and converted to a mean per slot as
//! `rate_hz * slot_duration_s`. Fractional means are handled by the
//! distribution itself, never by rounding the rate.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default slot duration (1 ms).
pub const DEFAULT_SLOT_DURATION_S: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArrivalKind {
    /// `floor(m)` packets plus one more with probability `frac(m)`.
    Constant,
    /// One packet with probability `min(m, 1)`.
    Bernoulli,
    Poisson,
    /// `round(max(0, Normal(m, sigma * tau)))` with `sigma = sqrt(rate_variance)`.
    NormalRate,
}

impl std::str::FromStr for ArrivalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(ArrivalKind::Constant),
            "bernoulli" => Ok(ArrivalKind::Bernoulli),
            "poisson" => Ok(ArrivalKind::Poisson),
            "normal-rate" => Ok(ArrivalKind::NormalRate),
            other => Err(Error::InvalidArgument(format!("unknown arrival kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrivalSpec {
    pub kind: ArrivalKind,
    /// Mean packet generation frequency.
    pub rate_hz: f64,
    /// Variance of the rate, in Hz^2; only read by [`ArrivalKind::NormalRate`].
    pub rate_variance: f64,
    pub slot_duration_s: f64,
}

impl ArrivalSpec {
    pub fn new(kind: ArrivalKind, rate_hz: f64) -> Self {
        ArrivalSpec {
            kind,
            rate_hz,
            rate_variance: 0.0,
            slot_duration_s: DEFAULT_SLOT_DURATION_S,
        }
    }

    pub fn poisson(rate_hz: f64) -> Self {
        Self::new(ArrivalKind::Poisson, rate_hz)
    }

    pub fn constant(rate_hz: f64) -> Self {
        Self::new(ArrivalKind::Constant, rate_hz)
    }

    /// A process that never generates packets.
    pub fn silent() -> Self {
        Self::new(ArrivalKind::Constant, 0.0)
    }

    /// Mean packets per slot.
    pub fn mean_per_slot(&self) -> f64 {
        self.rate_hz * self.slot_duration_s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz.is_finite() && self.rate_hz >= 0.0) {
            return Err(Error::Config(format!("rate_hz must be >= 0, got {}", self.rate_hz)));
        }
        if !(self.rate_variance.is_finite() && self.rate_variance >= 0.0) {
            return Err(Error::Config(format!(
                "rate_variance must be >= 0, got {}",
                self.rate_variance
            )));
        }
        if !(self.slot_duration_s.is_finite() && self.slot_duration_s > 0.0) {
            return Err(Error::Config(format!(
                "slot_duration_s must be > 0, got {}",
                self.slot_duration_s
            )));
        }
        Ok(())
    }
}

/// Draws the number of packets generated by one UE in one slot.
pub fn sample_arrivals<R: Rng + ?Sized>(spec: &ArrivalSpec, rng: &mut R) -> u32 {
    let mean = spec.mean_per_slot();
    if mean <= 0.0 {
        return 0;
    }
    match spec.kind {
        ArrivalKind::Constant => {
            let whole = mean.floor();
            let frac = mean - whole;
            let extra = if frac > 1e-12 && rng.random::<f64>() < frac { 1.0 } else { 0.0 };
            to_count(whole + extra)
        }
        ArrivalKind::Bernoulli => u32::from(rng.random::<f64>() < mean.min(1.0)),
        ArrivalKind::Poisson => {
            // mean > 0 and finite, so construction cannot fail.
            let dist = Poisson::new(mean).expect("positive finite Poisson mean");
            to_count(dist.sample(rng))
        }
        ArrivalKind::NormalRate => {
            let sd = spec.rate_variance.sqrt() * spec.slot_duration_s;
            let draw = if sd > 0.0 {
                Normal::new(mean, sd).expect("finite normal parameters").sample(rng)
            } else {
                mean
            };
            to_count(draw.max(0.0).round())
        }
    }
}

fn to_count(x: f64) -> u32 {
    if x >= u32::MAX as f64 {
        u32::MAX
    } else {
        x as u32
    }
}

/// Each UE's mean arrival rate. Known to the proportional-fair scheduler only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateAssignment {
    pub per_ue_rate_hz: Vec<f64>,
}

impl RateAssignment {
    pub fn new(per_ue_rate_hz: Vec<f64>) -> Result<Self> {
        if let Some(bad) = per_ue_rate_hz.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
            return Err(Error::InvalidArgument(format!("rate must be finite and >= 0, got {bad}")));
        }
        Ok(RateAssignment { per_ue_rate_hz })
    }

    pub fn len(&self) -> usize {
        self.per_ue_rate_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_ue_rate_hz.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.per_ue_rate_hz.iter().sum::<f64>() / self.len() as f64
    }

    /// Rescales every rate so the mean becomes `target_mean_hz`, keeping the
    /// relative profile. An all-zero profile becomes uniform.
    pub fn scaled_to_mean(&self, target_mean_hz: f64) -> RateAssignment {
        let mean = self.mean();
        let per_ue_rate_hz = if mean > 0.0 {
            self.per_ue_rate_hz.iter().map(|r| r * target_mean_hz / mean).collect()
        } else {
            vec![target_mean_hz; self.len()]
        };
        RateAssignment { per_ue_rate_hz }
    }

    /// Arrival specs of the given kind, one per UE.
    pub fn arrival_specs(&self, kind: ArrivalKind, rate_variance: f64, slot_duration_s: f64) -> Vec<ArrivalSpec> {
        self.per_ue_rate_hz
            .iter()
            .map(|&rate_hz| ArrivalSpec {
                kind,
                rate_hz,
                rate_variance,
                slot_duration_s,
            })
            .collect()
    }
}

/// Draws each UE's mean rate uniformly from `[lo_hz, hi_hz]`.
pub fn assign_rates<R: Rng + ?Sized>(n: usize, lo_hz: f64, hi_hz: f64, rng: &mut R) -> Result<RateAssignment> {
    check_range(lo_hz, hi_hz)?;
    let rates = (0..n)
        .map(|_| if hi_hz > lo_hz { rng.random_range(lo_hz..=hi_hz) } else { lo_hz })
        .collect();
    RateAssignment::new(rates)
}

/// Draws each UE's mean rate from a normal centred on the middle of
/// `[lo_hz, hi_hz]` with the given variance, clamped to the interval.
pub fn assign_rates_normal<R: Rng + ?Sized>(
    n: usize,
    lo_hz: f64,
    hi_hz: f64,
    variance_hz2: f64,
    rng: &mut R,
) -> Result<RateAssignment> {
    check_range(lo_hz, hi_hz)?;
    if !(variance_hz2.is_finite() && variance_hz2 >= 0.0) {
        return Err(Error::InvalidArgument(format!("variance must be >= 0, got {variance_hz2}")));
    }
    let centre = 0.5 * (lo_hz + hi_hz);
    let sd = variance_hz2.sqrt();
    let rates = (0..n)
        .map(|_| {
            let r = if sd > 0.0 {
                Normal::new(centre, sd).expect("finite normal parameters").sample(rng)
            } else {
                centre
            };
            r.clamp(lo_hz, hi_hz)
        })
        .collect();
    RateAssignment::new(rates)
}

fn check_range(lo_hz: f64, hi_hz: f64) -> Result<()> {
    if !(lo_hz.is_finite() && hi_hz.is_finite() && 0.0 <= lo_hz && lo_hz <= hi_hz) {
        return Err(Error::InvalidArgument(format!(
            "rate range must satisfy 0 <= lo <= hi, got [{lo_hz}, {hi_hz}]"
        )));
    }
    Ok(())
}

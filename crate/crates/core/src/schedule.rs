//! Sampling time schedules.
//!
//! Each family is uniform in its own warp space: `t^(1/rho)` for the
//! polynomial (EDM) family, `t` for time-uniform and `log t` for logSNR
//! (under `sigma(t) = t`, logSNR is `-2 log t`).

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const DEFAULT_T_MIN: f64 = 0.002;
pub const DEFAULT_T_MAX: f64 = 80.0;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum ScheduleKind {
    Polynomial { rho: f64 },
    TimeUniform,
    #[cfg_attr(feature = "serde", serde(rename = "logsnr"))]
    LogSnr,
}

impl ScheduleKind {
    pub const EDM: ScheduleKind = ScheduleKind::Polynomial { rho: 7.0 };

    fn warp(&self, t: f64) -> f64 {
        match *self {
            ScheduleKind::Polynomial { rho } => libm::pow(t, 1.0 / rho),
            ScheduleKind::TimeUniform => t,
            ScheduleKind::LogSnr => libm::log(t),
        }
    }

    fn unwarp(&self, u: f64) -> f64 {
        match *self {
            ScheduleKind::Polynomial { rho } => libm::pow(u, rho),
            ScheduleKind::TimeUniform => u,
            ScheduleKind::LogSnr => libm::exp(u),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Polynomial { .. } => "polynomial",
            ScheduleKind::TimeUniform => "time_uniform",
            ScheduleKind::LogSnr => "logsnr",
        }
    }
}

/// Family, step count and endpoints of a schedule, as found in configs.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScheduleSpec {
    #[cfg_attr(feature = "serde", serde(flatten))]
    pub kind: ScheduleKind,
    pub steps: usize,
    #[cfg_attr(feature = "serde", serde(default = "default_t_min"))]
    pub t_min: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_t_max"))]
    pub t_max: f64,
}

#[cfg(feature = "serde")]
fn default_t_min() -> f64 {
    DEFAULT_T_MIN
}

#[cfg(feature = "serde")]
fn default_t_max() -> f64 {
    DEFAULT_T_MAX
}

impl ScheduleSpec {
    pub fn new(kind: ScheduleKind, steps: usize) -> Self {
        Self {
            kind,
            steps,
            t_min: DEFAULT_T_MIN,
            t_max: DEFAULT_T_MAX,
        }
    }

    pub fn build(&self) -> Result<TimeSchedule> {
        TimeSchedule::build(self.kind, self.steps, self.t_min, self.t_max)
    }
}

/// Increasing sequence of sampling times `t_0 = t_min < ... < t_N = t_max`.
///
/// Solvers visit it in reverse, from `t_N` down to `t_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSchedule {
    kind: ScheduleKind,
    times: Vec<f64>,
}

fn interpolate(kind: &ScheduleKind, lo: f64, hi: f64, frac: f64) -> f64 {
    let (a, b) = (kind.warp(lo), kind.warp(hi));
    kind.unwarp(a + frac * (b - a))
}

impl TimeSchedule {
    pub fn build(kind: ScheduleKind, steps: usize, t_min: f64, t_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("at least one step required".into()));
        }
        if !(t_min > 0.0) || !(t_max > t_min) || !t_max.is_finite() {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < t_min < t_max, got t_min={t_min}, t_max={t_max}"
            )));
        }
        if let ScheduleKind::Polynomial { rho } = kind {
            if !(rho > 0.0) || !rho.is_finite() {
                return Err(Error::InvalidSchedule(format!("rho must be positive, got {rho}")));
            }
        }
        let mut times: Vec<f64> = (0..=steps)
            .map(|j| interpolate(&kind, t_min, t_max, j as f64 / steps as f64))
            .collect();
        times[0] = t_min;
        times[steps] = t_max;
        let schedule = Self { kind, times };
        schedule.check_monotone()?;
        Ok(schedule)
    }

    /// Wraps explicit times (increasing). Used for fixtures and tests.
    pub fn from_times(kind: ScheduleKind, times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidSchedule("at least two times required".into()));
        }
        if !(times[0] > 0.0) {
            return Err(Error::InvalidSchedule("times must be positive".into()));
        }
        let schedule = Self { kind, times };
        schedule.check_monotone()?;
        Ok(schedule)
    }

    fn check_monotone(&self) -> Result<()> {
        for (j, w) in self.times.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(Error::InvalidSchedule(format!(
                    "times not strictly increasing at index {j}: {} >= {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    /// Inserts `m` points inside every interval, uniform in the family's warp
    /// space. Every original time is kept exactly.
    pub fn refine(&self, m: usize) -> Self {
        if m == 0 {
            return self.clone();
        }
        let mut times = Vec::with_capacity(self.steps() * (m + 1) + 1);
        for w in self.times.windows(2) {
            times.push(w[0]);
            for i in 1..=m {
                times.push(interpolate(&self.kind, w[0], w[1], i as f64 / (m + 1) as f64));
            }
        }
        times.push(self.t_max());
        Self {
            kind: self.kind,
            times,
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of steps `N`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Times in increasing order, `t_0 .. t_N`.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn t_min(&self) -> f64 {
        self.times[0]
    }

    pub fn t_max(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// `t_n`.
    pub fn at(&self, n: usize) -> f64 {
        self.times[n]
    }

    /// Step intervals in visitation order: `(n, t_{n+1}, t_n)` for
    /// `n = N-1, ..., 0`.
    pub fn intervals(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        (0..self.steps())
            .rev()
            .map(move |n| (n, self.times[n + 1], self.times[n]))
    }
}

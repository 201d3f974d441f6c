//! Ensemble parallel direction steps.
//!
//! One EPD step from `t_{n+1}` to `t_n` takes a single start-point
//! direction `d0`, Euler-predicts `K` intermediate states at times `tau_k`
//! inside the interval, evaluates the oracle at all of them concurrently
//! (at the shifted times `tau_k + delta_k`), and advances along the weighted
//! sum `sum_k lambda_k * sigma_k * g_k`. The effective output scale is
//! `1 + o_n` with `o_n = sum_k lambda_k * sigma_k - 1`.
//!
//! Parameters are learned in an unconstrained (raw) form and mapped through
//! sigmoids and a softmax:
//!
//! * `r = sigmoid(r_raw)`, `tau = t_{n+1}^r * t_n^(1-r)` (geometric interpolation)
//! * `lambda = softmax(lam_raw)` over the step's branches
//! * `s = 1 + s_width * (sigmoid(s_raw) - 0.5)`, `delta = (s - 1) * tau`
//! * `sigma = 1 + sig_width * (sigmoid(sig_raw) - 0.5)`

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::exec::{par_map_eval, EvalRequest, Executor};
use crate::oracle::{CountingOracle, NoiseOracle};
use crate::schedule::{ScheduleKind, TimeSchedule};
use crate::solvers::{afs_direction, axpy, ipndm_combine, AfsVariant, HistoryBuffer, Trajectory};
use crate::State;

/// Raw scalars per branch: `r`, `lambda`, `s`, `sigma`.
pub const RAW_PER_BRANCH: usize = 4;

/// Simplex tolerance for constrained values printed with five decimals.
pub const TABLE_SIMPLEX_TOL: f64 = 1e-4;

/// Widths of the bands `s` and `sigma` are squashed into, centred at 1.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Bounds {
    pub s_width: f64,
    pub sig_width: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            s_width: 0.1,
            sig_width: 0.1,
        }
    }
}

impl Bounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_width > 0.0) || !(self.sig_width > 0.0) {
            return Err(Error::InvalidParams(format!(
                "bound widths must be positive, got s_width={}, sig_width={}",
                self.s_width, self.sig_width
            )));
        }
        Ok(())
    }

    pub fn s_range(&self) -> (f64, f64) {
        (1.0 - self.s_width / 2.0, 1.0 + self.s_width / 2.0)
    }

    pub fn sig_range(&self) -> (f64, f64) {
        (1.0 - self.sig_width / 2.0, 1.0 + self.sig_width / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BranchRaw {
    pub r_raw: f64,
    pub lam_raw: f64,
    pub s_raw: f64,
    pub sig_raw: f64,
}

/// Branch values in the constrained form the learned-parameter tables use.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BranchConstrained {
    pub r: f64,
    pub s: f64,
    pub sigma: f64,
    pub lambda: f64,
}

impl BranchConstrained {
    /// `r = 0.5`, no shift or modulation, full weight.
    pub const MIDPOINT: Self = Self {
        r: 0.5,
        s: 1.0,
        sigma: 1.0,
        lambda: 1.0,
    };

    /// `r = 1`: evaluates at the start point.
    pub const START: Self = Self {
        r: 1.0,
        s: 1.0,
        sigma: 1.0,
        lambda: 1.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedBranch {
    pub tau: f64,
    pub lam: f64,
    pub s_mult: f64,
    pub sig_mult: f64,
    pub delta: f64,
}

impl DerivedBranch {
    /// Time at which the oracle is queried, `tau + delta`.
    pub fn eval_time(&self) -> f64 {
        self.tau + self.delta
    }

    /// Weight of this branch in the update, `lambda * sigma`.
    pub fn weight(&self) -> f64 {
        self.lam * self.sig_mult
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

fn logit(p: f64) -> f64 {
    libm::log(p / (1.0 - p))
}

fn check_interval(t_from: f64, t_to: f64) -> Result<()> {
    if !(t_to > 0.0) {
        return Err(Error::NonPositiveTime(t_to));
    }
    if !(t_from > t_to) {
        return Err(Error::DegenerateInterval {
            from: t_from,
            to: t_to,
        });
    }
    Ok(())
}

fn geometric(t_from: f64, t_to: f64, r: f64) -> f64 {
    libm::pow(t_from, r) * libm::pow(t_to, 1.0 - r)
}

/// Maps one step's raw branches onto `(tau, lambda, s, sigma, delta)`.
pub fn derive_step_params(
    raw: &[BranchRaw],
    bounds: &Bounds,
    t_from: f64,
    t_to: f64,
) -> Result<Vec<DerivedBranch>> {
    check_interval(t_from, t_to)?;
    if raw.is_empty() {
        return Err(Error::InvalidParams("a step needs at least one branch".into()));
    }
    let max = raw.iter().map(|b| b.lam_raw).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|b| libm::exp(b.lam_raw - max)).collect();
    let total: f64 = exps.iter().sum();
    Ok(raw
        .iter()
        .zip(&exps)
        .map(|(b, e)| {
            let tau = geometric(t_from, t_to, sigmoid(b.r_raw));
            let s_mult = 1.0 + bounds.s_width * (sigmoid(b.s_raw) - 0.5);
            DerivedBranch {
                tau,
                lam: e / total,
                s_mult,
                sig_mult: 1.0 + bounds.sig_width * (sigmoid(b.sig_raw) - 0.5),
                delta: (s_mult - 1.0) * tau,
            }
        })
        .collect())
}

/// Derives branches from constrained values. `lambda` is renormalised to an
/// exact simplex.
pub fn derive_constrained(
    branches: &[BranchConstrained],
    t_from: f64,
    t_to: f64,
) -> Result<Vec<DerivedBranch>> {
    check_interval(t_from, t_to)?;
    if branches.is_empty() {
        return Err(Error::InvalidParams("a step needs at least one branch".into()));
    }
    let total: f64 = branches.iter().map(|b| b.lambda).sum();
    if !(total > 0.0) {
        return Err(Error::Simplex { step: 0, sum: total });
    }
    Ok(branches
        .iter()
        .map(|b| {
            let tau = geometric(t_from, t_to, b.r);
            DerivedBranch {
                tau,
                lam: b.lambda / total,
                s_mult: b.s,
                sig_mult: b.sigma,
                delta: (b.s - 1.0) * tau,
            }
        })
        .collect())
}

/// Output-scale offset `o_n = sum_k lambda_k sigma_k - 1`.
pub fn output_offset(branches: &[DerivedBranch]) -> f64 {
    branches.iter().map(DerivedBranch::weight).sum::<f64>() - 1.0
}

/// Per-step branch values, in either representation.
#[derive(Debug, Clone, PartialEq)]
pub enum StepValues {
    Raw(Vec<Vec<BranchRaw>>),
    Constrained(Vec<Vec<BranchConstrained>>),
}

/// Learned parameters for an `N`-step EPD run. Step `n` moves from
/// `t_{n+1}` to `t_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpdParams {
    k: usize,
    pub bounds: Bounds,
    pub schedule: Option<ScheduleKind>,
    pub afs: Option<AfsVariant>,
    values: StepValues,
}

impl EpdParams {
    pub fn new(
        k: usize,
        bounds: Bounds,
        values: StepValues,
        schedule: Option<ScheduleKind>,
        afs: Option<AfsVariant>,
    ) -> Result<Self> {
        bounds.validate()?;
        if k == 0 {
            return Err(Error::InvalidParams("K must be at least 1".into()));
        }
        let rows: Vec<usize> = match &values {
            StepValues::Raw(steps) => steps.iter().map(Vec::len).collect(),
            StepValues::Constrained(steps) => steps.iter().map(Vec::len).collect(),
        };
        if rows.is_empty() {
            return Err(Error::InvalidParams("at least one step required".into()));
        }
        if let Some(got) = rows.iter().copied().find(|len| *len != k) {
            return Err(Error::BranchCountMismatch { expected: k, got });
        }
        let params = Self {
            k,
            bounds,
            schedule,
            afs,
            values,
        };
        params.validate()?;
        Ok(params)
    }

    /// Raw initial parameters. With one branch this is the geometric
    /// midpoint; with more, the interpolation ratios start evenly spread at
    /// `(k + 0.5) / K` so the branches are not interchangeable.
    pub fn initial(steps: usize, k: usize, bounds: Bounds) -> Result<Self> {
        let row: Vec<BranchRaw> = (0..k)
            .map(|i| BranchRaw {
                r_raw: if k == 1 {
                    0.0
                } else {
                    logit((i as f64 + 0.5) / k as f64)
                },
                ..BranchRaw::default()
            })
            .collect();
        Self::new(k, bounds, StepValues::Raw(vec![row; steps]), None, None)
    }

    /// Uniform constrained parameters: every step uses `branches`.
    pub fn constrained(steps: usize, branches: &[BranchConstrained]) -> Result<Self> {
        Self::new(
            branches.len(),
            Bounds::default(),
            StepValues::Constrained(vec![branches.to_vec(); steps]),
            None,
            None,
        )
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn steps(&self) -> usize {
        match &self.values {
            StepValues::Raw(s) => s.len(),
            StepValues::Constrained(s) => s.len(),
        }
    }

    pub fn values(&self) -> &StepValues {
        &self.values
    }

    pub fn is_raw(&self) -> bool {
        matches!(self.values, StepValues::Raw(_))
    }

    fn validate(&self) -> Result<()> {
        match &self.values {
            StepValues::Raw(steps) => {
                for (n, row) in steps.iter().enumerate() {
                    for b in row {
                        if ![b.r_raw, b.lam_raw, b.s_raw, b.sig_raw].iter().all(|v| v.is_finite()) {
                            return Err(Error::InvalidParams(format!(
                                "step {n}: raw parameters must be finite"
                            )));
                        }
                    }
                }
            }
            StepValues::Constrained(steps) => {
                for (n, row) in steps.iter().enumerate() {
                    for (k, b) in row.iter().enumerate() {
                        if !(0.0..=1.0).contains(&b.r) {
                            return Err(Error::InvalidParams(format!(
                                "step {n}, branch {k}: r={} outside [0, 1]",
                                b.r
                            )));
                        }
                        if !(b.s > 0.0) || !(b.sigma > 0.0) || !b.s.is_finite() || !b.sigma.is_finite() {
                            return Err(Error::InvalidParams(format!(
                                "step {n}, branch {k}: s and sigma must be positive"
                            )));
                        }
                        if !(b.lambda >= 0.0) {
                            return Err(Error::InvalidParams(format!(
                                "step {n}, branch {k}: lambda={} negative",
                                b.lambda
                            )));
                        }
                    }
                    let sum: f64 = row.iter().map(|b| b.lambda).sum();
                    if (sum - 1.0).abs() > TABLE_SIMPLEX_TOL {
                        return Err(Error::Simplex { step: n, sum });
                    }
                }
            }
        }
        Ok(())
    }

    /// Derived branches for step `n` on the interval `(t_from, t_to)`.
    pub fn derive(&self, n: usize, t_from: f64, t_to: f64) -> Result<Vec<DerivedBranch>> {
        match &self.values {
            StepValues::Raw(steps) => derive_step_params(&steps[n], &self.bounds, t_from, t_to),
            StepValues::Constrained(steps) => derive_constrained(&steps[n], t_from, t_to),
        }
    }

    /// `o_n` for step `n`, computed from the stored (unnormalised) values.
    pub fn output_offset(&self, n: usize) -> f64 {
        match &self.values {
            StepValues::Raw(steps) => {
                // o_n does not depend on the interval; any valid one works.
                derive_step_params(&steps[n], &self.bounds, 2.0, 1.0)
                    .map(|d| output_offset(&d))
                    .unwrap_or(f64::NAN)
            }
            StepValues::Constrained(steps) => {
                steps[n].iter().map(|b| b.lambda * b.sigma).sum::<f64>() - 1.0
            }
        }
    }

    /// Raw parameters flattened step-major, then branch, then
    /// `(r, lambda, s, sigma)`. `None` for constrained parameters.
    pub fn raw_flat(&self) -> Option<Vec<f64>> {
        match &self.values {
            StepValues::Raw(steps) => Some(
                steps
                    .iter()
                    .flatten()
                    .flat_map(|b| [b.r_raw, b.lam_raw, b.s_raw, b.sig_raw])
                    .collect(),
            ),
            StepValues::Constrained(_) => None,
        }
    }

    /// Overwrites raw parameters from a flat vector laid out as in
    /// [`EpdParams::raw_flat`].
    pub fn set_raw_flat(&mut self, flat: &[f64]) -> Result<()> {
        let k = self.k;
        let steps = self.steps();
        if flat.len() != steps * k * RAW_PER_BRANCH {
            return Err(Error::DimensionMismatch {
                expected: steps * k * RAW_PER_BRANCH,
                got: flat.len(),
            });
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("raw parameters must be finite".into()));
        }
        let rows = flat
            .chunks(k * RAW_PER_BRANCH)
            .map(|row| {
                row.chunks(RAW_PER_BRANCH)
                    .map(|c| BranchRaw {
                        r_raw: c[0],
                        lam_raw: c[1],
                        s_raw: c[2],
                        sig_raw: c[3],
                    })
                    .collect()
            })
            .collect();
        self.values = StepValues::Raw(rows);
        Ok(())
    }

    /// Indices in the flat raw vector that belong to step `n`.
    pub fn step_range(&self, n: usize) -> Range<usize> {
        let width = self.k * RAW_PER_BRANCH;
        n * width..(n + 1) * width
    }
}

/// Ensemble direction `sum_k lambda_k sigma_k g_k` and the start direction.
fn ensemble_direction<O, E>(
    oracle: &O,
    executor: &E,
    x: &[f64],
    t_from: f64,
    branches: &[DerivedBranch],
    d_override: Option<&[f64]>,
) -> Result<State>
where
    O: NoiseOracle + ?Sized,
    E: Executor + ?Sized,
{
    if branches.is_empty() {
        return Err(Error::InvalidParams("a step needs at least one branch".into()));
    }
    let d0 = match d_override {
        Some(d) if d.len() != x.len() => {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: d.len(),
            })
        }
        Some(d) => d.to_vec(),
        None => oracle.noise(x, t_from)?,
    };
    let requests: Vec<EvalRequest> = branches
        .iter()
        .enumerate()
        .map(|(k, b)| EvalRequest {
            state: axpy(x, b.tau - t_from, &d0),
            time: b.eval_time(),
            branch: k,
        })
        .collect();
    let grads = par_map_eval(executor, oracle, &requests)?;
    let mut dir = vec![0.0; x.len()];
    for (b, g) in branches.iter().zip(&grads) {
        let w = b.weight();
        for (d, gi) in dir.iter_mut().zip(g) {
            *d += w * gi;
        }
    }
    Ok(dir)
}

/// One EPD step from `t_from` to `t_to`.
pub fn epd_step<O, E>(
    oracle: &O,
    executor: &E,
    x: &[f64],
    t_from: f64,
    t_to: f64,
    branches: &[DerivedBranch],
    d_override: Option<&[f64]>,
) -> Result<State>
where
    O: NoiseOracle + ?Sized,
    E: Executor + ?Sized,
{
    let dir = ensemble_direction(oracle, executor, x, t_from, branches, d_override)?;
    Ok(axpy(x, t_to - t_from, &dir))
}

/// EPD-Plugin step for iPNDM: the ensemble direction fills the current slot
/// of the multistep combination. Returns the new state and the ensemble
/// direction, which the caller pushes into the history.
#[allow(clippy::too_many_arguments)]
pub fn epd_plugin_step<O, E>(
    oracle: &O,
    executor: &E,
    x: &[f64],
    t_from: f64,
    t_to: f64,
    history: &HistoryBuffer,
    branches: &[DerivedBranch],
    d_override: Option<&[f64]>,
) -> Result<(State, State)>
where
    O: NoiseOracle + ?Sized,
    E: Executor + ?Sized,
{
    let d_epd = ensemble_direction(oracle, executor, x, t_from, branches, d_override)?;
    let combined = ipndm_combine(&d_epd, history)?;
    Ok((axpy(x, t_to - t_from, &combined), d_epd))
}

/// Runs the EPD solver (or the plugin) over `schedule`.
///
/// AFS follows `params.afs`. Sequential depth is 2 per step, minus one on
/// the AFS step; total evaluations are `N (1 + K)` minus one with AFS.
pub fn run_epd<O, E>(
    params: &EpdParams,
    oracle: &O,
    executor: &E,
    schedule: &TimeSchedule,
    x_init: &[f64],
    plugin: bool,
) -> Result<Trajectory>
where
    O: NoiseOracle + ?Sized,
    E: Executor + ?Sized,
{
    run_epd_until(params, oracle, executor, schedule, x_init, plugin, 0)
}

/// Like [`run_epd`], but stops once node `stop_node` has been reached.
pub fn run_epd_until<O, E>(
    params: &EpdParams,
    oracle: &O,
    executor: &E,
    schedule: &TimeSchedule,
    x_init: &[f64],
    plugin: bool,
    stop_node: usize,
) -> Result<Trajectory>
where
    O: NoiseOracle + ?Sized,
    E: Executor + ?Sized,
{
    if params.steps() != schedule.steps() {
        return Err(Error::InvalidParams(format!(
            "parameters cover {} steps but the schedule has {}",
            params.steps(),
            schedule.steps()
        )));
    }
    if x_init.len() != oracle.dim() {
        return Err(Error::DimensionMismatch {
            expected: oracle.dim(),
            got: x_init.len(),
        });
    }
    let counter = CountingOracle::new(oracle);
    let mut times = Vec::with_capacity(schedule.steps() + 1);
    let mut states = Vec::with_capacity(schedule.steps() + 1);
    times.push(schedule.t_max());
    states.push(x_init.to_vec());
    let mut history = HistoryBuffer::new();
    let mut x = x_init.to_vec();
    let mut depth = 0;
    for (i, (n, t_from, t_to)) in schedule.intervals().enumerate() {
        if n < stop_node {
            break;
        }
        let branches = params.derive(n, t_from, t_to)?;
        if branches.len() != params.k() {
            return Err(Error::BranchCountMismatch {
                expected: params.k(),
                got: branches.len(),
            });
        }
        let afs_d = match (i, params.afs) {
            (0, Some(v)) => Some(afs_direction(&x, t_from, v)),
            _ => None,
        };
        depth += 1 + usize::from(afs_d.is_none());
        x = if plugin {
            let (next, d) = epd_plugin_step(
                &counter,
                executor,
                &x,
                t_from,
                t_to,
                &history,
                &branches,
                afs_d.as_deref(),
            )?;
            history.push(d);
            next
        } else {
            epd_step(&counter, executor, &x, t_from, t_to, &branches, afs_d.as_deref())?
        };
        times.push(t_to);
        states.push(x.clone());
    }
    Ok(Trajectory {
        times,
        states,
        nfe: counter.calls(),
        para_nfe: depth,
    })
}

/// Evaluations and sequential depth of an EPD run.
pub fn epd_nfe(steps: usize, k: usize, afs: bool) -> (usize, usize) {
    let saved = usize::from(afs && steps > 0);
    (steps * (1 + k) - saved, 2 * steps - saved)
}

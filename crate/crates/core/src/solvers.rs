//! Training-free baseline steps and trajectory drivers.
//!
//! Every step moves a state from `t_from = t_{n+1}` to `t_to = t_n` with
//! `h = t_to - t_from < 0`. An optional direction override replaces the
//! start-point evaluation (used for the analytical first step).

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::oracle::{CountingOracle, NoiseOracle};
use crate::schedule::TimeSchedule;
use crate::State;

/// Ordered states of one sampling run, in visitation order `t_N .. t_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<State>,
    /// Oracle evaluations issued.
    pub nfe: usize,
    /// Sequential depth of those evaluations.
    pub para_nfe: usize,
}

impl Trajectory {
    pub fn endpoint(&self) -> &State {
        self.states.last().expect("trajectory holds at least the initial state")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SolverKind {
    Ddim,
    Heun,
    Dpm2,
    Ipndm,
}

impl SolverKind {
    pub const ALL: [SolverKind; 4] = [
        SolverKind::Ddim,
        SolverKind::Heun,
        SolverKind::Dpm2,
        SolverKind::Ipndm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SolverKind::Ddim => "ddim",
            SolverKind::Heun => "heun",
            SolverKind::Dpm2 => "dpm2",
            SolverKind::Ipndm => "ipndm",
        }
    }

    /// Oracle evaluations per step without an override.
    pub fn evals_per_step(&self) -> usize {
        match self {
            SolverKind::Ddim | SolverKind::Ipndm => 1,
            SolverKind::Heun | SolverKind::Dpm2 => 2,
        }
    }
}

/// Analytic stand-in for the first start-point direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AfsVariant {
    /// `x / sqrt(1 + t^2)`: exact in the large-`t` limit for unit-variance data.
    #[default]
    Scaled,
    /// `x / t`.
    OverT,
    /// `x` itself.
    Raw,
}

pub fn afs_direction(x: &[f64], t_max: f64, variant: AfsVariant) -> State {
    let scale = match variant {
        AfsVariant::Scaled => 1.0 / libm::sqrt(1.0 + t_max * t_max),
        AfsVariant::OverT => 1.0 / t_max,
        AfsVariant::Raw => return x.to_vec(),
    };
    x.iter().map(|v| v * scale).collect()
}

pub(crate) fn axpy(x: &[f64], h: f64, d: &[f64]) -> State {
    x.iter().zip(d).map(|(a, b)| a + h * b).collect()
}

fn start_direction<O: NoiseOracle + ?Sized>(
    oracle: &O,
    x: &[f64],
    t: f64,
    d_override: Option<&[f64]>,
) -> Result<State> {
    match d_override {
        Some(d) => {
            if d.len() != x.len() {
                return Err(Error::DimensionMismatch {
                    expected: x.len(),
                    got: d.len(),
                });
            }
            Ok(d.to_vec())
        }
        None => oracle.noise(x, t),
    }
}

/// Rectangle rule. Returns the new state and the direction used.
pub fn euler_step<O: NoiseOracle + ?Sized>(
    oracle: &O,
    x: &[f64],
    t_from: f64,
    t_to: f64,
    d_override: Option<&[f64]>,
) -> Result<(State, State)> {
    let d = start_direction(oracle, x, t_from, d_override)?;
    Ok((axpy(x, t_to - t_from, &d), d))
}

/// Trapezoidal rule with an Euler predictor.
pub fn heun_step<O: NoiseOracle + ?Sized>(
    oracle: &O,
    x: &[f64],
    t_from: f64,
    t_to: f64,
    d_override: Option<&[f64]>,
) -> Result<State> {
    let h = t_to - t_from;
    let d = start_direction(oracle, x, t_from, d_override)?;
    let predicted = axpy(x, h, &d);
    let d_end = oracle.noise(&predicted, t_to)?;
    Ok(x
        .iter()
        .zip(d.iter().zip(&d_end))
        .map(|(xi, (a, b))| xi + (h / 2.0) * (a + b))
        .collect())
}

/// Midpoint rule at the geometric mean `sqrt(t_from * t_to)`.
pub fn dpm2_step<O: NoiseOracle + ?Sized>(
    oracle: &O,
    x: &[f64],
    t_from: f64,
    t_to: f64,
    d_override: Option<&[f64]>,
) -> Result<State> {
    let d = start_direction(oracle, x, t_from, d_override)?;
    let s = libm::sqrt(t_to * t_from);
    let x_mid = axpy(x, s - t_from, &d);
    let d_mid = oracle.noise(&x_mid, s)?;
    Ok(axpy(x, t_to - t_from, &d_mid))
}

/// Past directions, most recent first, at most three kept.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HistoryBuffer {
    entries: VecDeque<State>,
}

impl HistoryBuffer {
    pub const CAPACITY: usize = 3;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, d: State) {
        self.entries.push_front(d);
        self.entries.truncate(Self::CAPACITY);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &State> {
        self.entries.iter()
    }
}

/// Adams–Bashforth rows `(numerators, denominator)` for 0..=3 past entries,
/// applied to `(current, most recent, ...)`.
pub const IPNDM_COEFFS: [(&[i64], i64); 4] = [
    (&[1], 1),
    (&[3, -1], 2),
    (&[23, -16, 5], 12),
    (&[55, -59, 37, -9], 24),
];

/// Multistep direction `d'` from the current direction and the history.
pub fn ipndm_combine(current: &[f64], history: &HistoryBuffer) -> Result<State> {
    let (nums, den) = IPNDM_COEFFS[history.len().min(3)];
    let den = den as f64;
    let mut out: State = current.iter().map(|v| nums[0] as f64 * v).collect();
    for (c, past) in nums[1..].iter().zip(history.iter()) {
        if past.len() != out.len() {
            return Err(Error::DimensionMismatch {
                expected: out.len(),
                got: past.len(),
            });
        }
        for (o, p) in out.iter_mut().zip(past) {
            *o += *c as f64 * p;
        }
    }
    for o in &mut out {
        *o /= den;
    }
    Ok(out)
}

/// iPNDM step. Returns the new state and the current direction, which the
/// caller pushes into the history.
pub fn ipndm_step<O: NoiseOracle + ?Sized>(
    oracle: &O,
    x: &[f64],
    t_from: f64,
    t_to: f64,
    history: &HistoryBuffer,
    d_override: Option<&[f64]>,
) -> Result<(State, State)> {
    let d = start_direction(oracle, x, t_from, d_override)?;
    let combined = ipndm_combine(&d, history)?;
    Ok((axpy(x, t_to - t_from, &combined), d))
}

/// Runs a baseline solver from `x_init` at `t_N` down to `t_0`.
///
/// With `afs`, the first step's start direction comes from
/// [`afs_direction`], saving one evaluation.
pub fn run_sampler<O: NoiseOracle + ?Sized>(
    kind: SolverKind,
    oracle: &O,
    schedule: &TimeSchedule,
    x_init: &[f64],
    afs: Option<AfsVariant>,
) -> Result<Trajectory> {
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
    for (i, (_, t_from, t_to)) in schedule.intervals().enumerate() {
        let afs_d = match (i, afs) {
            (0, Some(v)) => Some(afs_direction(&x, t_from, v)),
            _ => None,
        };
        let over = afs_d.as_deref();
        x = match kind {
            SolverKind::Ddim => euler_step(&counter, &x, t_from, t_to, over)?.0,
            SolverKind::Heun => heun_step(&counter, &x, t_from, t_to, over)?,
            SolverKind::Dpm2 => dpm2_step(&counter, &x, t_from, t_to, over)?,
            SolverKind::Ipndm => {
                let (next, d) = ipndm_step(&counter, &x, t_from, t_to, &history, over)?;
                history.push(d);
                next
            }
        };
        times.push(t_to);
        states.push(x.clone());
    }
    let nfe = counter.calls();
    Ok(Trajectory {
        times,
        states,
        nfe,
        para_nfe: nfe,
    })
}

/// Evaluations a baseline run issues for `steps` steps.
pub fn baseline_nfe(kind: SolverKind, steps: usize, afs: bool) -> usize {
    kind.evals_per_step() * steps - usize::from(afs && steps > 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{ConstantOracle, GaussianMixture};
    use crate::schedule::ScheduleKind;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_gaussian() -> GaussianMixture {
        GaussianMixture::single(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap()
    }

    #[test]
    fn euler_examples() {
        let m = unit_gaussian();
        let (x, d) = euler_step(&m, &[1.0, 0.0], 1.0, 0.5, None).unwrap();
        assert!((x[0] - 0.75).abs() < 1e-15 && x[1] == 0.0);
        assert_eq!(d, vec![0.5, 0.0]);
        let (same, _) = euler_step(&m, &[1.0, 2.0], 0.7, 0.7, None).unwrap();
        assert_eq!(same, vec![1.0, 2.0]);
        let zero = [0.0, 0.0];
        let (still, _) = euler_step(&m, &[1.0, 2.0], 1.0, 0.5, Some(&zero)).unwrap();
        assert_eq!(still, vec![1.0, 2.0]);
    }

    #[test]
    fn zero_length_steps_are_identity() {
        let m = GaussianMixture::default_2d();
        let x = [0.3, -0.8];
        assert_eq!(heun_step(&m, &x, 1.3, 1.3, None).unwrap(), x);
        assert_eq!(dpm2_step(&m, &x, 1.3, 1.3, None).unwrap(), x);
    }

    #[test]
    fn constant_field_makes_all_steps_agree() {
        let c = ConstantOracle(vec![0.37, -1.25]);
        let x = [2.0, 1.0];
        let (euler, _) = euler_step(&c, &x, 3.0, 1.5, None).unwrap();
        let heun = heun_step(&c, &x, 3.0, 1.5, None).unwrap();
        let dpm = dpm2_step(&c, &x, 3.0, 1.5, None).unwrap();
        let mut hist = HistoryBuffer::new();
        for _ in 0..3 {
            hist.push(c.0.clone());
        }
        let (ipndm, _) = ipndm_step(&c, &x, 3.0, 1.5, &hist, None).unwrap();
        for other in [&heun, &dpm, &ipndm] {
            for j in 0..2 {
                assert!((other[j] - euler[j]).abs() <= 1e-12 * euler[j].abs());
            }
        }
    }

    #[test]
    fn ipndm_rows_sum_to_one() {
        for (nums, den) in IPNDM_COEFFS {
            assert_eq!(nums.iter().sum::<i64>(), den);
        }
    }

    #[test]
    fn ipndm_without_history_is_euler() {
        let m = GaussianMixture::default_2d();
        let x = [0.4, 1.1];
        let (a, _) = euler_step(&m, &x, 2.0, 1.2, None).unwrap();
        let (b, _) = ipndm_step(&m, &x, 2.0, 1.2, &HistoryBuffer::new(), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ipndm_two_step_extrapolates_linear_field() {
        // d(t) = a + b t on a uniform grid; AB2 gives d' = (3 d_n - d_{n+1}) / 2
        // = a + b (t_n - (t_{n+1} - t_n) / 2), the linear extrapolant at the half step.
        struct Linear;
        impl NoiseOracle for Linear {
            fn dim(&self) -> usize {
                1
            }
            fn noise(&self, _x: &[f64], t: f64) -> Result<State> {
                Ok(vec![0.5 + 2.0 * t])
            }
        }
        let (t_prev, t_from, t_to) = (3.0, 2.5, 2.0);
        let mut hist = HistoryBuffer::new();
        hist.push(vec![0.5 + 2.0 * t_prev]);
        let (x_new, d) = ipndm_step(&Linear, &[1.0], t_from, t_to, &hist, None).unwrap();
        assert_eq!(d, vec![5.5]);
        let expected_dir = 0.5 + 2.0 * (t_from - (t_prev - t_from) / 2.0);
        let expected = 1.0 + (t_to - t_from) * expected_dir;
        assert!((x_new[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn history_keeps_three_most_recent() {
        let mut h = HistoryBuffer::new();
        for i in 0..5 {
            h.push(vec![i as f64]);
        }
        let v: Vec<f64> = h.iter().map(|d| d[0]).collect();
        assert_eq!(v, [4.0, 3.0, 2.0]);
    }

    #[test]
    fn afs_variants() {
        assert_eq!(afs_direction(&[8.0, 0.0], 80.0, AfsVariant::OverT), vec![0.1, 0.0]);
        assert_eq!(afs_direction(&[0.0, 0.0], 80.0, AfsVariant::Raw), vec![0.0, 0.0]);
        let m = unit_gaussian();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let x = [rng.random_range(-200.0..200.0), rng.random_range(-200.0..200.0)];
            let exact = m.noise_prediction(&x, 80.0).unwrap();
            let approx = afs_direction(&x, 80.0, AfsVariant::Scaled);
            for j in 0..2 {
                assert!((approx[j] - exact[j]).abs() <= 2e-4 * exact[j].abs());
            }
        }
    }

    #[test]
    fn nfe_accounting_matches_instrumented_calls() {
        let m = GaussianMixture::default_2d();
        for kind in SolverKind::ALL {
            for n in 1..6 {
                for afs in [None, Some(AfsVariant::Scaled)] {
                    let s = TimeSchedule::build(ScheduleKind::EDM, n, 0.002, 80.0).unwrap();
                    let counter = CountingOracle::new(&m);
                    let traj = run_sampler(kind, &counter, &s, &[10.0, -20.0], afs).unwrap();
                    assert_eq!(traj.nfe, counter.calls());
                    assert_eq!(traj.nfe, baseline_nfe(kind, n, afs.is_some()));
                    assert_eq!(traj.para_nfe, traj.nfe);
                    assert_eq!(traj.states.len(), n + 1);
                    assert_eq!(traj.times.len(), n + 1);
                }
            }
        }
        let s = TimeSchedule::build(ScheduleKind::EDM, 4, 0.002, 80.0).unwrap();
        let t = run_sampler(SolverKind::Ddim, &m, &s, &[1.0, 1.0], None).unwrap();
        assert_eq!(t.nfe, 4);
        let s = TimeSchedule::build(ScheduleKind::LogSnr, 3, 0.002, 80.0).unwrap();
        let t = run_sampler(SolverKind::Dpm2, &m, &s, &[1.0, 1.0], Some(AfsVariant::Scaled))
            .unwrap();
        assert_eq!((t.nfe, t.para_nfe), (5, 5));
    }

    #[test]
    fn fine_ddim_converges_to_closed_form() {
        let m = unit_gaussian();
        let x0 = [40.0, -25.0];
        let exact =
            crate::oracle::closed_form_flow(&[0.0, 0.0], &[1.0, 1.0], &x0, 80.0, 0.002).unwrap();
        // Euler's global error constant here is about 2.5, so 1e-3 needs
        // a few thousand steps.
        for (n, tol) in [(1024, 3e-3), (4096, 1e-3)] {
            let s = TimeSchedule::build(ScheduleKind::EDM, n, 0.002, 80.0).unwrap();
            let traj = run_sampler(SolverKind::Ddim, &m, &s, &x0, None).unwrap();
            for j in 0..2 {
                assert!((traj.endpoint()[j] - exact[j]).abs() <= tol * exact[j].abs());
            }
        }
    }

    fn log_log_slope(errors: &[f64], steps: &[usize]) -> f64 {
        let xs: Vec<f64> = steps.iter().map(|n| libm::log(*n as f64)).collect();
        let ys: Vec<f64> = errors.iter().map(|e| libm::log(*e)).collect();
        let mx = xs.iter().sum::<f64>() / xs.len() as f64;
        let my = ys.iter().sum::<f64>() / ys.len() as f64;
        let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        -num / den
    }

    #[test]
    fn convergence_orders() {
        let m = unit_gaussian();
        let steps = [8, 16, 32, 64];
        let x0 = [3.5, -2.0];
        let exact =
            crate::oracle::closed_form_flow(&[0.0, 0.0], &[1.0, 1.0], &x0, 5.0, 0.002).unwrap();
        for (kind, lo, hi) in [
            (SolverKind::Ddim, 0.85, 1.15),
            (SolverKind::Heun, 1.8, 2.2),
            (SolverKind::Dpm2, 1.8, 2.2),
        ] {
            let errors: Vec<f64> = steps
                .iter()
                .map(|n| {
                    let s = TimeSchedule::build(ScheduleKind::TimeUniform, *n, 0.002, 5.0).unwrap();
                    let traj = run_sampler(kind, &m, &s, &x0, None).unwrap();
                    crate::metrics::l2_distance(traj.endpoint(), &exact)
                })
                .collect();
            let slope = log_log_slope(&errors, &steps);
            assert!((lo..=hi).contains(&slope), "{kind:?} slope {slope}");
        }
    }
}

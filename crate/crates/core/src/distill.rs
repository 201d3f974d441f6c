//! Distilling EPD parameters from a many-step teacher.
//!
//! The teacher solver runs on the student schedule with `M` extra points per
//! interval and its states at the student nodes become targets. For each
//! node `n = N-1 .. 0` the student is rolled out to `t_n`, the batch loss
//! `L_n` is differentiated by central differences over every raw parameter
//! that can reach `x_{t_n}`, and Adam takes one step.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::epd::{run_epd_until, Bounds, EpdParams};
use crate::error::{Error, Result};
use crate::exec::{Executor, Sequential};
use crate::oracle::{sample_initial, NoiseOracle};
use crate::schedule::{ScheduleKind, ScheduleSpec, TimeSchedule};
use crate::solvers::{run_sampler, AfsVariant, SolverKind};
use crate::State;

/// Distance used at the final node `t_0`. Intermediate nodes always use
/// squared Euclidean distance.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "mode", rename_all = "snake_case"))]
pub enum FinalDistance {
    #[default]
    SquaredL2,
    /// `||A (x - y)||^2` with `A` given row by row.
    Linear { matrix: Vec<Vec<f64>> },
}

impl FinalDistance {
    fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            FinalDistance::SquaredL2 => squared_l2(x, y),
            FinalDistance::Linear { matrix } => matrix
                .iter()
                .map(|row| {
                    let v: f64 = row.iter().zip(x.iter().zip(y)).map(|(a, (p, q))| a * (p - q)).sum();
                    v * v
                })
                .sum(),
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        if let FinalDistance::Linear { matrix } = self {
            if matrix.is_empty() || matrix.iter().any(|r| r.len() != dim) {
                return Err(Error::InvalidConfig(format!(
                    "feature matrix rows must have length {dim}"
                )));
            }
        }
        Ok(())
    }
}

fn squared_l2(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    /// Teacher points inserted per student interval.
    pub m: usize,
    pub teacher: SolverKind,
    pub batch_size: usize,
    /// Size of the noise pool batches are drawn from.
    pub samples: usize,
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub fd_step: f64,
    pub seed: u64,
    pub bounds: Bounds,
    pub k: usize,
    pub schedule: ScheduleSpec,
    pub afs: Option<AfsVariant>,
    pub plugin: bool,
    pub final_distance: FinalDistance,
    /// Outer iterations without a relative improvement of
    /// `min_improvement` in the monitored `L_0` before stopping.
    pub patience: Option<usize>,
    pub min_improvement: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            m: 6,
            teacher: SolverKind::Dpm2,
            batch_size: 32,
            samples: 1024,
            iterations: 200,
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            fd_step: 1e-4,
            seed: 0,
            bounds: Bounds::default(),
            k: 2,
            schedule: ScheduleSpec::new(ScheduleKind::TimeUniform, 3),
            afs: Some(AfsVariant::Scaled),
            plugin: false,
            final_distance: FinalDistance::SquaredL2,
            patience: Some(10),
            min_improvement: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.batch_size == 0 || self.samples == 0 {
            return bad("batch size and sample count must be positive");
        }
        if self.batch_size > self.samples {
            return bad("batch size exceeds the sample count");
        }
        if self.k == 0 || self.schedule.steps == 0 {
            return bad("K and the step count must be positive");
        }
        if !(self.lr > 0.0) || !(self.fd_step > 0.0) || !(self.adam_eps > 0.0) {
            return bad("learning rate, fd step and Adam epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.patience == Some(0) {
            return bad("patience must be positive");
        }
        self.bounds.validate()
    }
}

/// Shared noises and the teacher's states at every student node.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSet {
    pub noises: Vec<State>,
    /// `references[i][n]` is sample `i` at `t_n`, `n = 0 ..= N`.
    pub references: Vec<Vec<State>>,
    pub solver: SolverKind,
    pub m: usize,
    /// Student node times `t_0 .. t_N`.
    pub node_times: Vec<f64>,
}

impl TeacherSet {
    pub fn len(&self) -> usize {
        self.noises.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noises.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.node_times.len() - 1
    }

    fn check_schedule(&self, schedule: &TimeSchedule) -> Result<()> {
        if self.node_times.as_slice() != schedule.times() {
            return Err(Error::Mismatch(
                "teacher references were built for a different schedule".into(),
            ));
        }
        Ok(())
    }
}

/// Runs the teacher from the given noises and keeps its student-node states.
pub fn teacher_references<O: NoiseOracle + ?Sized>(
    oracle: &O,
    schedule: &TimeSchedule,
    solver: SolverKind,
    m: usize,
    noises: Vec<State>,
) -> Result<TeacherSet> {
    let fine = schedule.refine(m);
    let n = schedule.steps();
    let references = noises
        .iter()
        .map(|z| {
            let traj = run_sampler(solver, oracle, &fine, z, None)?;
            // Visitation index of t_j on the fine grid is (N - j)(M + 1).
            Ok((0..=n)
                .map(|j| traj.states[(n - j) * (m + 1)].clone())
                .collect())
        })
        .collect::<Result<Vec<Vec<State>>>>()?;
    Ok(TeacherSet {
        noises,
        references,
        solver,
        m,
        node_times: schedule.times().to_vec(),
    })
}

/// Draws `config.samples` noises at `t_N` and builds their references.
pub fn generate_teacher_set<O, R>(
    oracle: &O,
    schedule: &TimeSchedule,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<TeacherSet>
where
    O: NoiseOracle + ?Sized,
    R: Rng + ?Sized,
{
    let noises = sample_initial(rng, schedule.t_max(), oracle.dim(), config.samples)?;
    teacher_references(oracle, schedule, config.teacher, config.m, noises)
}

/// Everything a student rollout needs besides the parameters.
pub struct LossContext<'a, O: ?Sized, E: ?Sized> {
    pub oracle: &'a O,
    pub executor: &'a E,
    pub schedule: &'a TimeSchedule,
    pub teacher: &'a TeacherSet,
    pub final_distance: &'a FinalDistance,
    pub plugin: bool,
}

impl<O, E> LossContext<'_, O, E>
where
    O: NoiseOracle + ?Sized,
    E: Executor + ?Sized,
{
    fn check(&self) -> Result<()> {
        self.teacher.check_schedule(self.schedule)?;
        self.final_distance.check(self.oracle.dim())
    }

    /// Batch-mean loss at node `n` for each candidate parameter set.
    ///
    /// Rollouts fan out over (candidate, sample) pairs; branches inside a
    /// rollout run sequentially. Sums run in sample order.
    pub fn node_losses(
        &self,
        candidates: &[EpdParams],
        node: usize,
        batch: &[usize],
    ) -> Result<Vec<f64>> {
        let per = batch.len();
        let task = |i: usize| -> Result<State> {
            let (c, b) = (i / per, i % per);
            let sample = batch[b];
            let traj = run_epd_until(
                &candidates[c],
                self.oracle,
                &Sequential,
                self.schedule,
                &self.teacher.noises[sample],
                self.plugin,
                node,
            )?;
            let target = &self.teacher.references[sample][node];
            let d = if node == 0 {
                self.final_distance.eval(traj.endpoint(), target)
            } else {
                squared_l2(traj.endpoint(), target)
            };
            Ok(vec![d])
        };
        let out = self.executor.fan_out(candidates.len() * per, &task)?;
        let losses: Vec<f64> = out
            .chunks(per)
            .map(|c| c.iter().map(|v| v[0]).sum::<f64>() / per as f64)
            .collect();
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFiniteLoss { node });
        }
        Ok(losses)
    }
}

/// `L_n` for `n = 0 .. N-1` (indexed by `n`) from full student rollouts.
pub fn rollout_and_losses<O, E>(
    params: &EpdParams,
    ctx: &LossContext<'_, O, E>,
    batch: &[usize],
) -> Result<Vec<f64>>
where
    O: NoiseOracle + ?Sized,
    E: Executor + ?Sized,
{
    ctx.check()?;
    let n_steps = ctx.schedule.steps();
    let per = batch.len();
    let task = |b: usize| -> Result<State> {
        let sample = batch[b];
        let traj = run_epd_until(
            params,
            ctx.oracle,
            &Sequential,
            ctx.schedule,
            &ctx.teacher.noises[sample],
            ctx.plugin,
            0,
        )?;
        // traj.states[i] sits at node N - i.
        Ok((0..n_steps)
            .map(|n| {
                let x = &traj.states[n_steps - n];
                let y = &ctx.teacher.references[sample][n];
                if n == 0 {
                    ctx.final_distance.eval(x, y)
                } else {
                    squared_l2(x, y)
                }
            })
            .collect())
    };
    let out = ctx.executor.fan_out(per, &task)?;
    let mut losses = vec![0.0; n_steps];
    for row in &out {
        for (l, v) in losses.iter_mut().zip(row) {
            *l += v;
        }
    }
    for (n, l) in losses.iter_mut().enumerate() {
        *l /= per as f64;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { node: n });
        }
    }
    Ok(losses)
}

/// Central-difference gradient of a loss over the coordinates in `active`;
/// every other entry is exactly zero.
///
/// `loss_many` receives all probe points at once, ordered
/// `theta + h e_i, theta - h e_i` for each active `i`, and returns their
/// losses in the same order.
pub fn fd_gradient<F>(loss_many: F, theta: &[f64], active: Range<usize>, h: f64) -> Result<Vec<f64>>
where
    F: FnOnce(&[Vec<f64>]) -> Result<Vec<f64>>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("fd step must be positive, got {h}")));
    }
    if active.end > theta.len() {
        return Err(Error::DimensionMismatch {
            expected: theta.len(),
            got: active.end,
        });
    }
    let mut probes = Vec::with_capacity(2 * active.len());
    for i in active.clone() {
        for sign in [1.0, -1.0] {
            let mut p = theta.to_vec();
            p[i] += sign * h;
            probes.push(p);
        }
    }
    let losses = loss_many(&probes)?;
    if losses.len() != probes.len() {
        return Err(Error::Mismatch(format!(
            "{} probe losses for {} probes",
            losses.len(),
            probes.len()
        )));
    }
    let mut grad = vec![0.0; theta.len()];
    for (j, i) in active.enumerate() {
        let (up, down) = (losses[2 * j], losses[2 * j + 1]);
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteLoss { node: i });
        }
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// [`fd_gradient`] for a loss evaluated one point at a time.
pub fn fd_gradient_scalar<F>(loss: F, theta: &[f64], active: Range<usize>, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    fd_gradient(|ps| ps.iter().map(|p| loss(p)).collect(), theta, active, h)
}

/// Adam with bias correction and per-coordinate step counts, so coordinates
/// that are updated less often still get correct bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: Vec<i32>,
}

impl Adam {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: vec![0; len],
        }
    }

    /// Updates `params[active]` in place from `grad[active]`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], active: Range<usize>) {
        for i in active {
            let g = grad[i];
            self.t[i] += 1;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / (1.0 - libm::pow(self.beta1, self.t[i] as f64));
            let v_hat = self.v[i] / (1.0 - libm::pow(self.beta2, self.t[i] as f64));
            params[i] -= self.lr * m_hat / (libm::sqrt(v_hat) + self.eps);
        }
    }
}

/// Source of elapsed wall time for training logs.
pub trait Clock {
    fn elapsed_ms(&self) -> f64;
}

/// Reports zero; keeps logs bit-reproducible.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn elapsed_ms(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub iteration: usize,
    pub node: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// `L_n` on the training batch, before that node's update.
    pub entries: Vec<LogEntry>,
    /// `L_0` on the fixed monitor batch; entry 0 precedes any update.
    pub monitor: Vec<f64>,
    pub iterations_run: usize,
    pub stopped_early: bool,
    pub wall_ms: f64,
    pub params: EpdParams,
}

impl TrainLog {
    pub fn initial_loss(&self) -> f64 {
        self.monitor[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.monitor.last().expect("monitor holds the initial loss")
    }
}

/// Algorithm: sample a noise pool and its teacher references once, then
/// per outer iteration draw a batch and, for `n = N-1 .. 0`, take one Adam
/// step on `L_n` over the parameters of steps `n .. N-1`. The student prefix
/// is recomputed after every update.
pub fn train<O, E, C>(
    config: &TrainConfig,
    oracle: &O,
    executor: &E,
    clock: &C,
) -> Result<(EpdParams, TrainLog)>
where
    O: NoiseOracle + ?Sized,
    E: Executor + ?Sized,
    C: Clock + ?Sized,
{
    config.validate()?;
    let schedule = config.schedule.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let teacher = generate_teacher_set(oracle, &schedule, config, &mut rng)?;
    let ctx = LossContext {
        oracle,
        executor,
        schedule: &schedule,
        teacher: &teacher,
        final_distance: &config.final_distance,
        plugin: config.plugin,
    };
    ctx.check()?;

    let mut params = EpdParams::initial(schedule.steps(), config.k, config.bounds)?;
    params.schedule = Some(schedule.kind());
    params.afs = config.afs;
    let mut theta = params.raw_flat().expect("initial parameters are raw");
    let mut adam = Adam::new(theta.len(), config.lr, config.beta1, config.beta2, config.adam_eps);

    let monitor_batch: Vec<usize> = (0..config.batch_size).collect();
    let monitor_loss = |p: &EpdParams| -> Result<f64> {
        Ok(ctx.node_losses(core::slice::from_ref(p), 0, &monitor_batch)?[0])
    };
    let mut monitor = vec![monitor_loss(&params)?];
    let mut best = monitor[0];
    let mut stale = 0;
    let mut entries = Vec::new();
    let mut stopped_early = false;
    let mut iterations_run = 0;

    let with_theta = |base: &EpdParams, t: &[f64]| -> Result<EpdParams> {
        let mut p = base.clone();
        p.set_raw_flat(t)?;
        Ok(p)
    };

    for iteration in 0..config.iterations {
        let batch = index::sample(&mut rng, config.samples, config.batch_size).into_vec();
        for node in (0..schedule.steps()).rev() {
            let active = params.step_range(node).start..theta.len();
            let loss = ctx.node_losses(core::slice::from_ref(&params), node, &batch)?[0];
            entries.push(LogEntry {
                iteration,
                node,
                loss,
                wall_ms: clock.elapsed_ms(),
            });
            let grad = fd_gradient(
                |probes| {
                    let candidates = probes
                        .iter()
                        .map(|t| with_theta(&params, t))
                        .collect::<Result<Vec<_>>>()?;
                    ctx.node_losses(&candidates, node, &batch)
                },
                &theta,
                active.clone(),
                config.fd_step,
            )
            .map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::Diverged {
                    iteration,
                    node,
                    loss: f64::NAN,
                },
                other => other,
            })?;
            adam.step(&mut theta, &grad, active);
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    iteration,
                    node,
                    loss,
                });
            }
            params.set_raw_flat(&theta)?;
        }
        iterations_run = iteration + 1;

        let l0 = monitor_loss(&params).map_err(|_| Error::Diverged {
            iteration,
            node: 0,
            loss: f64::NAN,
        })?;
        monitor.push(l0);
        if l0 < best * (1.0 - config.min_improvement) {
            best = l0;
            stale = 0;
        } else {
            stale += 1;
        }
        if config.patience.is_some_and(|p| stale >= p) {
            stopped_early = true;
            break;
        }
    }

    let log = TrainLog {
        entries,
        monitor,
        iterations_run,
        stopped_early,
        wall_ms: clock.elapsed_ms(),
        params: params.clone(),
    };
    Ok((params, log))
}

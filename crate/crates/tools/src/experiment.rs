//! The comparison grid (solvers x budgets x K) and parameter-file checks.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use epd_core::distill::{train, Clock, TrainConfig, TrainLog};
use epd_core::epd::{run_epd, EpdParams, StepValues, TABLE_SIMPLEX_TOL};
use epd_core::exec::Sequential;
use epd_core::metrics::{compute_trajectory_metrics, MetricsRow};
use epd_core::oracle::{sample_initial, GaussianMixture, NoiseOracle};
use epd_core::schedule::{ScheduleKind, ScheduleSpec, TimeSchedule};
use epd_core::solvers::{run_sampler, SolverKind, Trajectory};
use epd_core::State;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bench::{bench_step_latency, LatencyReport};
use crate::config::{ExperimentConfig, SolverSpec};
use crate::cost::WithCost;
use crate::error::Result;
use crate::io::{self, MetricsLine, ParamsMode};
use crate::pool::PoolExecutor;

/// Wall clock measured from construction.
#[derive(Debug, Clone, Copy)]
pub struct WallClock(Instant);

impl WallClock {
    pub fn start() -> Self {
        Self(Instant::now())
    }
}

impl Clock for WallClock {
    fn elapsed_ms(&self) -> f64 {
        self.0.elapsed().as_secs_f64() * 1e3
    }
}

/// Held-out starting noises for evaluation, fixed by `seed`.
pub fn eval_noises(seed: u64, t_max: f64, dim: usize, count: usize) -> Result<Vec<State>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_initial(&mut rng, t_max, dim, count)?)
}

/// The student schedule refined so it has at least `min_steps` steps.
pub fn reference_schedule(student: &TimeSchedule, min_steps: usize) -> TimeSchedule {
    let m = min_steps.div_ceil(student.steps()).saturating_sub(1);
    student.refine(m)
}

pub fn run_baseline(
    kind: SolverKind,
    oracle: &GaussianMixture,
    executor: &PoolExecutor,
    schedule: &TimeSchedule,
    noises: &[State],
    afs: Option<epd_core::solvers::AfsVariant>,
) -> Result<Vec<Trajectory>> {
    Ok(executor.map(noises.len(), |i| run_sampler(kind, oracle, schedule, &noises[i], afs))?)
}

/// EPD rollouts, one task per seed; branches of one seed run in order.
pub fn run_epd_batch(
    params: &EpdParams,
    plugin: bool,
    oracle: &GaussianMixture,
    executor: &PoolExecutor,
    schedule: &TimeSchedule,
    noises: &[State],
) -> Result<Vec<Trajectory>> {
    Ok(executor.map(noises.len(), |i| {
        run_epd(params, oracle, &Sequential, schedule, &noises[i], plugin)
    })?)
}

/// Everything one grid run produced.
#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub lines: Vec<MetricsLine>,
    pub train_logs: Vec<(String, TrainLog)>,
    pub latency: Option<LatencyReport>,
    pub files: Vec<PathBuf>,
}

impl ExperimentOutput {
    pub fn row(&self, solver: &str, k: usize, para_nfe: usize) -> Option<&MetricsRow> {
        self.lines.iter().find_map(|l| match l {
            MetricsLine::Done(r) if r.solver == solver && r.k == k && r.para_nfe == para_nfe => Some(r),
            _ => None,
        })
    }
}

fn row_label(solver: SolverSpec, k: Option<usize>, budget: usize) -> String {
    match k {
        Some(k) => format!("{}_k{k}_nfe{budget}", solver.name()),
        None => format!("{}_nfe{budget}", solver.name()),
    }
}

struct Grid<'a> {
    cfg: &'a ExperimentConfig,
    oracle: &'a GaussianMixture,
    executor: &'a PoolExecutor,
    noises: Vec<State>,
    out_dir: &'a Path,
    references: HashMap<(String, usize), Vec<Trajectory>>,
    out: ExperimentOutput,
}

impl Grid<'_> {
    fn schedule(&self, kind: ScheduleKind, steps: usize) -> Result<TimeSchedule> {
        let s = &self.cfg.schedules;
        Ok(TimeSchedule::build(kind, steps, s.t_min, s.t_max)?)
    }

    fn references(&mut self, kind: ScheduleKind, student: &TimeSchedule) -> Result<&[Trajectory]> {
        let key = (format!("{kind:?}"), student.steps());
        if !self.references.contains_key(&key) {
            let fine = reference_schedule(student, self.cfg.reference.steps);
            let refs = run_baseline(
                self.cfg.reference.solver,
                self.oracle,
                self.executor,
                &fine,
                &self.noises,
                None,
            )?;
            self.references.insert(key.clone(), refs);
        }
        Ok(&self.references[&key])
    }

    fn export(&mut self, label: &str, schedule: &TimeSchedule, trajs: &[Trajectory], refs: &[Trajectory]) -> Result<()> {
        let path = self.out_dir.join(format!("schedule_{label}.csv"));
        io::write_schedule_csv(&path, schedule)?;
        self.out.files.push(path);
        for seed in 0..self.cfg.export_trajectories.min(trajs.len()) {
            let path = self.out_dir.join(format!("traj_{label}_{seed}.csv"));
            io::write_trajectory_csv(&path, &trajs[seed])?;
            self.out.files.push(path);
            let path = self.out_dir.join(format!("traj_reference_{label}_{seed}.csv"));
            io::write_trajectory_csv(&path, &refs[seed])?;
            self.out.files.push(path);
        }
        Ok(())
    }

    fn finish_row(
        &mut self,
        solver: SolverSpec,
        k: Option<usize>,
        budget: usize,
        kind: ScheduleKind,
        schedule: &TimeSchedule,
        trajs: Vec<Trajectory>,
    ) -> Result<()> {
        let label = row_label(solver, k, budget);
        let refs = self.references(kind, schedule)?.to_vec();
        let row = compute_trajectory_metrics(solver.name(), k.unwrap_or(1), &trajs, &refs)?;
        if row.para_nfe != budget {
            return Err(crate::Error::Config(format!(
                "{label}: ran at depth {} instead of {budget}",
                row.para_nfe
            )));
        }
        self.export(&label, schedule, &trajs, &refs)?;
        self.out.lines.push(MetricsLine::Done(row));
        Ok(())
    }

    fn baseline_row(&mut self, solver: SolverSpec, kind: SolverKind, budget: usize, steps: usize) -> Result<()> {
        let sk = self.cfg.schedules.kind_for(solver);
        let schedule = self.schedule(sk, steps)?;
        let afs = self.cfg.afs.then_some(self.cfg.afs_variant);
        let trajs = run_baseline(kind, self.oracle, self.executor, &schedule, &self.noises, afs)?;
        self.finish_row(solver, None, budget, sk, &schedule, trajs)
    }

    fn learned_row(&mut self, solver: SolverSpec, k: usize, budget: usize, steps: usize) -> Result<()> {
        let sk = self.cfg.schedules.kind_for(solver);
        let s = &self.cfg.schedules;
        let plugin = solver == SolverSpec::EpdPlugin;
        let tc = TrainConfig {
            k,
            schedule: ScheduleSpec {
                kind: sk,
                steps,
                t_min: s.t_min,
                t_max: s.t_max,
            },
            afs: self.cfg.afs.then_some(self.cfg.afs_variant),
            plugin,
            ..self.cfg.train.clone()
        };
        let (params, log) = train(&tc, self.oracle, self.executor, &WallClock::start())?;
        let label = row_label(solver, Some(k), budget);
        let path = self.out_dir.join(format!("params_{label}.json"));
        io::save_params(&path, &params, plugin)?;
        self.out.files.push(path);
        let path = self.out_dir.join(format!("trainlog_{label}.csv"));
        io::write_trainlog_csv(&path, &log)?;
        self.out.files.push(path);
        self.out.train_logs.push((label, log));

        let schedule = tc.schedule.build()?;
        let trajs = run_epd_batch(&params, plugin, self.oracle, self.executor, &schedule, &self.noises)?;
        self.finish_row(solver, Some(k), budget, sk, &schedule, trajs)
    }
}

/// Runs every (solver, budget[, K]) cell, writes the per-cell files and
/// `metrics.csv` under `out_dir`. Budgets a solver cannot reach are recorded
/// as skipped lines. Metrics do not depend on the worker count.
pub fn run_experiment(cfg: &ExperimentConfig, executor: &PoolExecutor, out_dir: &Path) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let oracle = cfg.model.load(None)?;
    let noises = eval_noises(cfg.seed, cfg.schedules.t_max, oracle.dim(), cfg.eval_samples)?;
    let mut grid = Grid {
        cfg,
        oracle: &oracle,
        executor,
        noises,
        out_dir,
        references: HashMap::new(),
        out: ExperimentOutput::default(),
    };
    for &solver in &cfg.solvers {
        let ks: Vec<Option<usize>> = if solver.is_learned() {
            cfg.k_values.iter().copied().map(Some).collect()
        } else {
            vec![None]
        };
        for &budget in &cfg.budgets {
            for &k in &ks {
                let steps = match solver.steps_for_budget(budget, cfg.afs) {
                    Ok(n) => n,
                    Err(reason) => {
                        grid.out.lines.push(MetricsLine::Skipped {
                            solver: solver.name().to_string(),
                            k: k.unwrap_or(1),
                            para_nfe: budget,
                            reason,
                        });
                        continue;
                    }
                };
                match (solver.baseline(), k) {
                    (Some(kind), _) => grid.baseline_row(solver, kind, budget, steps)?,
                    (None, Some(k)) => grid.learned_row(solver, k, budget, steps)?,
                    (None, None) => unreachable!("learned rows always carry K"),
                }
            }
        }
    }
    let path = out_dir.join("metrics.csv");
    io::write_metrics_csv(&path, &grid.out.lines)?;
    grid.out.files.push(path);

    if cfg.bench.enabled {
        let costly = WithCost::new(
            oracle.clone(),
            Duration::from_secs_f64(cfg.bench.cost_ms / 1e3),
            cfg.bench.cost_mode,
        );
        let report = bench_step_latency(&costly, &cfg.bench.bench)?;
        let path = out_dir.join("latency.csv");
        io::write_latency_csv(&path, &report)?;
        grid.out.files.push(path);
        grid.out.latency = Some(report);
    }
    Ok(grid.out)
}

/// Result of checking one parameter file.
#[derive(Debug, Clone)]
pub struct FixtureCheck {
    pub path: PathBuf,
    pub table: Option<String>,
    /// `o_n` per step.
    pub offsets: Vec<f64>,
    pub violations: Vec<String>,
}

impl FixtureCheck {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct FixtureReport {
    pub files: Vec<FixtureCheck>,
}

impl FixtureReport {
    pub fn is_ok(&self) -> bool {
        self.files.iter().all(FixtureCheck::is_ok)
    }

    pub fn violations(&self) -> impl Iterator<Item = &String> {
        self.files.iter().flat_map(|f| &f.violations)
    }
}

/// Slack for values printed with a few decimals.
const RANGE_TOL: f64 = 1e-9;

fn within(v: f64, (lo, hi): (f64, f64), tol: f64) -> bool {
    v >= lo - tol && v <= hi + tol
}

/// Checks one file: branch counts, simplex (to 1e-4), `r` in `[0, 1]`,
/// `s` and `sigma` inside the file's bounds, and `o_n` inside the band
/// `sigma` allows. Every violation is listed, not just the first.
pub fn check_params_file(path: &Path) -> FixtureCheck {
    let mut check = FixtureCheck {
        path: path.to_path_buf(),
        table: None,
        offsets: Vec::new(),
        violations: Vec::new(),
    };
    let file = match io::load_params_file(path) {
        Ok(f) => f,
        Err(e) => {
            check.violations.push(format!("{}: {e}", path.display()));
            return check;
        }
    };
    check.table = file.source.as_ref().and_then(|s| s.table.clone());
    let name = check.table.clone().unwrap_or_else(|| path.display().to_string());
    let loc = |n: usize, k: Option<usize>| match k {
        Some(k) => format!("{name} step {n} branch {k}"),
        None => format!("{name} step {n}"),
    };
    let values = match file.values(path) {
        Ok(v) => v,
        Err(e) => {
            check.violations.push(format!("{name}: {e}"));
            return check;
        }
    };
    let (s_range, sig_range) = (file.bounds.s_range(), file.bounds.sig_range());
    if let (ParamsMode::Constrained, StepValues::Constrained(steps)) = (file.mode, &values) {
        for (n, row) in steps.iter().enumerate() {
            if row.len() != file.k {
                check
                    .violations
                    .push(format!("{}: {} branches, expected {}", loc(n, None), row.len(), file.k));
            }
            for (k, b) in row.iter().enumerate() {
                if !within(b.r, (0.0, 1.0), 0.0) {
                    check.violations.push(format!("{}: r={} outside [0, 1]", loc(n, Some(k)), b.r));
                }
                if !(b.lambda >= 0.0) {
                    check.violations.push(format!("{}: lambda={} negative", loc(n, Some(k)), b.lambda));
                }
                if !within(b.s, s_range, RANGE_TOL) {
                    check.violations.push(format!(
                        "{}: s={} outside [{}, {}]",
                        loc(n, Some(k)),
                        b.s,
                        s_range.0,
                        s_range.1
                    ));
                }
                if !within(b.sigma, sig_range, RANGE_TOL) {
                    check.violations.push(format!(
                        "{}: sigma={} outside [{}, {}]",
                        loc(n, Some(k)),
                        b.sigma,
                        sig_range.0,
                        sig_range.1
                    ));
                }
            }
            let sum: f64 = row.iter().map(|b| b.lambda).sum();
            if (sum - 1.0).abs() > TABLE_SIMPLEX_TOL {
                check
                    .violations
                    .push(format!("{}: lambda sums to {sum}", loc(n, None)));
            }
        }
    }
    match file.to_params(path) {
        Ok(params) => {
            let band = (sig_range.0 - 1.0, sig_range.1 - 1.0);
            for n in 0..params.steps() {
                let o = params.output_offset(n);
                if !within(o, band, TABLE_SIMPLEX_TOL) {
                    check.violations.push(format!(
                        "{}: o={o} outside [{}, {}]",
                        loc(n, None),
                        band.0,
                        band.1
                    ));
                }
                check.offsets.push(o);
            }
        }
        Err(e) => {
            if check.violations.is_empty() {
                check.violations.push(format!("{name}: {e}"));
            }
        }
    }
    check
}

/// Checks every path; directories contribute their JSON/TOML files.
pub fn validate_params_files(paths: &[PathBuf]) -> Result<FixtureReport> {
    let mut report = FixtureReport::default();
    for p in paths {
        if p.is_dir() {
            for f in io::list_structured_files(p)? {
                report.files.push(check_params_file(&f));
            }
        } else {
            report.files.push(check_params_file(p));
        }
    }
    Ok(report)
}

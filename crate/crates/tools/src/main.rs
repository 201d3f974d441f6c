use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use epd_core::distill::{generate_teacher_set, train, TrainConfig};
use epd_core::oracle::NoiseOracle;
use epd_core::schedule::{ScheduleKind, ScheduleSpec, TimeSchedule};
use epd_core::solvers::Trajectory;
use epd_tools::bench::{bench_step_latency, StepShape};
use epd_tools::config::{ExperimentConfig, SolverSpec};
use epd_tools::cost::{CostMode, WithCost};
use epd_tools::experiment::{
    eval_noises, run_baseline, run_epd_batch, run_experiment, validate_params_files, WallClock,
};
use epd_tools::io;
use epd_tools::pool::PoolExecutor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const BUDGET_HELP: &str = "\
Sequential-depth budgets (with the analytical first step, the default):
  ddim, ipndm         budget B -> B + 1 steps, any B
  heun, dpm2          budget B -> (B + 1) / 2 steps, B odd
  epd, epd_plugin     budget B -> (B + 1) / 2 steps, B odd
Without it (afs = false): single-evaluation solvers take B steps; the others
take B / 2 steps and need B even. Unreachable cells are listed as skipped in
metrics.csv.";

#[derive(Parser)]
#[command(name = "epd", version, about = "Parallel-direction ODE solvers on Gaussian mixtures", after_help = BUDGET_HELP)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML or JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the evaluation and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for oracle fan-out.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate teacher references on the training schedule.
    Teacher,
    /// Distil EPD parameters against the teacher.
    Train(TrainArgs),
    /// Run a trained parameter file or a baseline solver on held-out noises.
    Sample(SampleArgs),
    /// Run the full comparison grid and write metrics.csv.
    #[command(after_help = BUDGET_HELP)]
    Compare,
    /// Time one EPD step against K and the worker count.
    Bench(BenchArgs),
    /// Check parameter files (or directories of them) for consistency.
    ValidateParams(ValidateArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Parallel directions per step.
    #[arg(long)]
    k: Option<usize>,
    /// Sequential-depth budget; sets the step count.
    #[arg(long)]
    budget: Option<usize>,
    /// Train the plugin variant.
    #[arg(long)]
    plugin: bool,
}

#[derive(Args)]
struct SampleArgs {
    /// Trained parameter file.
    #[arg(long, conflicts_with = "solver")]
    params: Option<PathBuf>,
    /// Baseline solver (ddim, heun, dpm2, ipndm).
    #[arg(long, requires = "budget")]
    solver: Option<String>,
    #[arg(long)]
    budget: Option<usize>,
    /// Number of held-out noises (default: eval_samples from the config).
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    /// Added cost per evaluation in milliseconds.
    #[arg(long)]
    cost_ms: Option<f64>,
    /// spin (busy core) or block (sleep).
    #[arg(long)]
    cost_mode: Option<CostMode>,
    /// Time the full step rather than only the branch evaluations.
    #[arg(long)]
    full: bool,
    #[arg(long)]
    reps: Option<usize>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(required = true)]
    paths: Vec<PathBuf>,
}

struct Failure {
    kind: &'static str,
    message: String,
}

impl From<epd_tools::Error> for Failure {
    fn from(e: epd_tools::Error) -> Self {
        Self {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

impl From<epd_core::Error> for Failure {
    fn from(e: epd_core::Error) -> Self {
        epd_tools::Error::from(e).into()
    }
}

type CliResult<T> = Result<T, Failure>;

fn load_config(common: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(value: serde_json::Value) {
    println!("{value}");
}

fn train_config(cfg: &ExperimentConfig, args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut tc = cfg.train.clone();
    tc.afs = cfg.afs.then_some(cfg.afs_variant);
    tc.plugin = args.plugin;
    if let Some(k) = args.k {
        tc.k = k;
    }
    if let Some(b) = args.budget {
        let solver = if args.plugin { SolverSpec::EpdPlugin } else { SolverSpec::Epd };
        let steps = solver.steps_for_budget(b, cfg.afs).map_err(|m| Failure {
            kind: "config",
            message: m,
        })?;
        tc.schedule = ScheduleSpec {
            kind: cfg.schedules.kind_for(solver),
            steps,
            t_min: cfg.schedules.t_min,
            t_max: cfg.schedules.t_max,
        };
    }
    tc.validate()?;
    Ok(tc)
}

fn cmd_teacher(cfg: &ExperimentConfig) -> CliResult<()> {
    let oracle = cfg.model.load(None)?;
    let tc = &cfg.train;
    let schedule = tc.schedule.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let set = generate_teacher_set(&oracle, &schedule, tc, &mut rng)?;
    let path = cfg.out_dir.join("teacher.csv");
    let mut rows = Vec::new();
    for (i, refs) in set.references.iter().enumerate() {
        for (n, x) in refs.iter().enumerate() {
            rows.push((i, n, set.node_times[n], x.clone()));
        }
    }
    write_teacher_csv(&path, oracle.dim(), &rows)?;
    print_json(json!({
        "samples": set.len(),
        "steps": set.steps(),
        "teacher": set.solver.name(),
        "m": set.m,
        "file": path,
    }));
    Ok(())
}

fn write_teacher_csv(path: &Path, dim: usize, rows: &[(usize, usize, f64, Vec<f64>)]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| epd_tools::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let mut w = csv::Writer::from_path(path).map_err(epd_tools::Error::from)?;
    let mut header = vec!["sample".to_string(), "node".into(), "t".into()];
    header.extend((0..dim).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(epd_tools::Error::from)?;
    for (i, n, t, x) in rows {
        let mut rec = vec![i.to_string(), n.to_string(), format!("{t}")];
        rec.extend(x.iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(epd_tools::Error::from)?;
    }
    w.flush().map_err(|e| epd_tools::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, args: &TrainArgs) -> CliResult<()> {
    let oracle = cfg.model.load(None)?;
    let tc = train_config(cfg, args)?;
    let pool = PoolExecutor::new(cfg.workers)?;
    let (params, log) = train(&tc, &oracle, &pool, &WallClock::start())?;
    let params_path = cfg.out_dir.join("params.json");
    io::save_params(&params_path, &params, tc.plugin)?;
    let log_path = cfg.out_dir.join("trainlog.csv");
    io::write_trainlog_csv(&log_path, &log)?;
    print_json(json!({
        "k": params.k(),
        "steps": params.steps(),
        "iterations": log.iterations_run,
        "stopped_early": log.stopped_early,
        "initial_loss": log.initial_loss(),
        "final_loss": log.final_loss(),
        "params": params_path,
        "log": log_path,
    }));
    Ok(())
}

fn write_runs(cfg: &ExperimentConfig, label: &str, trajs: &[Trajectory]) -> CliResult<PathBuf> {
    let dim = trajs.first().map_or(0, |t| t.endpoint().len());
    let rows: Vec<(usize, usize, f64, Vec<f64>)> = trajs
        .iter()
        .enumerate()
        .map(|(i, t)| (i, 0, *t.times.last().unwrap_or(&0.0), t.endpoint().clone()))
        .collect();
    let path = cfg.out_dir.join(format!("endpoints_{label}.csv"));
    write_teacher_csv(&path, dim, &rows)?;
    for (i, t) in trajs.iter().take(cfg.export_trajectories).enumerate() {
        io::write_trajectory_csv(&cfg.out_dir.join(format!("traj_{label}_{i}.csv")), t)?;
    }
    Ok(path)
}

fn cmd_sample(cfg: &ExperimentConfig, args: &SampleArgs) -> CliResult<()> {
    let oracle = cfg.model.load(None)?;
    let pool = PoolExecutor::new(cfg.workers)?;
    let count = args.samples.unwrap_or(cfg.eval_samples);
    let noises = eval_noises(cfg.seed, cfg.schedules.t_max, oracle.dim(), count)?;
    let s = &cfg.schedules;
    let (label, trajs) = match (&args.params, &args.solver) {
        (Some(path), _) => {
            let (params, plugin) = io::load_params(path)?;
            let kind = params.schedule.unwrap_or(ScheduleKind::EDM);
            let schedule = TimeSchedule::build(kind, params.steps(), s.t_min, s.t_max)?;
            let label = if plugin { "epd_plugin" } else { "epd" };
            (label.to_string(), run_epd_batch(&params, plugin, &oracle, &pool, &schedule, &noises)?)
        }
        (None, Some(name)) => {
            let solver: SolverSpec = serde_json::from_value(json!(name)).map_err(|_| Failure {
                kind: "config",
                message: format!("unknown solver '{name}'"),
            })?;
            let kind = solver.baseline().ok_or_else(|| Failure {
                kind: "config",
                message: format!("{name} needs --params"),
            })?;
            let budget = args.budget.unwrap_or_default();
            let steps = solver.steps_for_budget(budget, cfg.afs).map_err(|m| Failure {
                kind: "config",
                message: m,
            })?;
            let schedule = TimeSchedule::build(s.kind_for(solver), steps, s.t_min, s.t_max)?;
            let afs = cfg.afs.then_some(cfg.afs_variant);
            (
                format!("{name}_nfe{budget}"),
                run_baseline(kind, &oracle, &pool, &schedule, &noises, afs)?,
            )
        }
        (None, None) => {
            return Err(Failure {
                kind: "config",
                message: "pass --params or --solver".into(),
            })
        }
    };
    let path = write_runs(cfg, &label, &trajs)?;
    print_json(json!({
        "label": label,
        "samples": trajs.len(),
        "nfe": trajs.first().map(|t| t.nfe),
        "para_nfe": trajs.first().map(|t| t.para_nfe),
        "file": path,
    }));
    Ok(())
}

fn cmd_compare(cfg: &ExperimentConfig) -> CliResult<()> {
    let pool = PoolExecutor::new(cfg.workers)?;
    let out = run_experiment(cfg, &pool, &cfg.out_dir)?;
    let done = out
        .lines
        .iter()
        .filter(|l| matches!(l, io::MetricsLine::Done(_)))
        .count();
    print_json(json!({
        "rows": done,
        "skipped": out.lines.len() - done,
        "metrics": cfg.out_dir.join("metrics.csv"),
    }));
    Ok(())
}

fn cmd_bench(cfg: &ExperimentConfig, args: &BenchArgs) -> CliResult<()> {
    let oracle = cfg.model.load(None)?;
    let mut bench = cfg.bench.bench.clone();
    if args.full {
        bench.shape = StepShape::Full;
    }
    if let Some(r) = args.reps {
        bench.reps = r;
    }
    let cost_ms = args.cost_ms.unwrap_or(cfg.bench.cost_ms);
    if !cost_ms.is_finite() || cost_ms < 0.0 {
        return Err(Failure {
            kind: "config",
            message: format!("cost must be a non-negative number of milliseconds, got {cost_ms}"),
        });
    }
    let mode = args.cost_mode.unwrap_or(cfg.bench.cost_mode);
    let costly = WithCost::new(oracle, Duration::from_secs_f64(cost_ms / 1e3), mode);
    let report = bench_step_latency(&costly, &bench)?;
    let path = cfg.out_dir.join("latency.csv");
    io::write_latency_csv(&path, &report)?;
    for row in &report.rows {
        print_json(json!({
            "K": row.k,
            "workers": row.workers,
            "mean_ms": row.mean_ms,
            "ci95_ms": row.ci95_ms,
            "reps": row.reps,
        }));
    }
    Ok(())
}

fn cmd_validate(args: &ValidateArgs) -> CliResult<()> {
    let report = validate_params_files(&args.paths)?;
    for f in &report.files {
        print_json(json!({
            "file": f.path,
            "table": f.table,
            "ok": f.is_ok(),
            "offsets": f.offsets,
            "violations": f.violations,
        }));
    }
    if report.is_ok() {
        Ok(())
    } else {
        Err(Failure {
            kind: "validation",
            message: report.violations().cloned().collect::<Vec<_>>().join("; "),
        })
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Command::ValidateParams(args) = &cli.command {
        return cmd_validate(args);
    }
    let cfg = load_config(&cli.common)?;
    match &cli.command {
        Command::Teacher => cmd_teacher(&cfg),
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Sample(a) => cmd_sample(&cfg, a),
        Command::Compare => cmd_compare(&cfg),
        Command::Bench(a) => cmd_bench(&cfg, a),
        Command::ValidateParams(_) => unreachable!(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({ "error": f.kind, "message": f.message }));
            ExitCode::FAILURE
        }
    }
}

//! File formats: mixtures, parameter files and CSV exports.
//!
//! Structured files are JSON or TOML, picked by extension. CSV numbers use
//! Rust's shortest round-trip formatting, so identical values always give
//! identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use epd_core::distill::TrainLog;
use epd_core::epd::{Bounds, BranchConstrained, BranchRaw, EpdParams, StepValues};
use epd_core::metrics::MetricsRow;
use epd_core::oracle::{GaussianMixture, MixtureSpec};
use epd_core::schedule::{ScheduleKind, TimeSchedule};
use epd_core::solvers::{AfsVariant, Trajectory};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bench::LatencyReport;
use crate::error::{Error, Result};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, message: impl ToString) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn is_toml(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "toml")
}

/// Reads JSON or TOML (by extension) into `T`.
pub fn read_structured<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    if is_toml(path) {
        toml::from_str(&text).map_err(|e| parse_err(path, e))
    } else {
        serde_json::from_str(&text).map_err(|e| parse_err(path, e))
    }
}

/// Writes JSON or TOML (by extension).
pub fn write_structured<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = if is_toml(path) {
        toml::to_string_pretty(value).map_err(|e| parse_err(path, e))?
    } else {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| parse_err(path, e))?;
        s.push('\n');
        s
    };
    ensure_parent(path)?;
    fs::write(path, text).map_err(io_err(path))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(())
}

pub fn load_mixture(path: &Path) -> Result<GaussianMixture> {
    let spec: MixtureSpec = read_structured(path)?;
    Ok(GaussianMixture::try_from(spec)?)
}

pub fn save_mixture(path: &Path, mixture: &GaussianMixture) -> Result<()> {
    write_structured(path, &mixture.spec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamsMode {
    Raw,
    Constrained,
}

/// Where a parameter set came from (free-form, used in reports).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamsSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub para_nfe: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fid: Option<f64>,
}

/// On-disk parameter file. `steps[n]` holds the branches of the step
/// `t_{n+1} -> t_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub k: usize,
    pub mode: ParamsMode,
    #[serde(default)]
    pub plugin: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub afs: Option<AfsVariant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleKind>,
    pub bounds: Bounds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<ParamsSource>,
    pub steps: serde_json::Value,
}

impl ParamsFile {
    pub fn from_params(params: &EpdParams, plugin: bool) -> Self {
        let (mode, steps) = match params.values() {
            StepValues::Raw(s) => (ParamsMode::Raw, serde_json::to_value(s)),
            StepValues::Constrained(s) => (ParamsMode::Constrained, serde_json::to_value(s)),
        };
        Self {
            k: params.k(),
            mode,
            plugin,
            afs: params.afs,
            schedule: params.schedule,
            bounds: params.bounds,
            source: None,
            steps: steps.expect("branch values serialise"),
        }
    }

    pub fn values(&self, path: &Path) -> Result<StepValues> {
        let v = self.steps.clone();
        Ok(match self.mode {
            ParamsMode::Raw => StepValues::Raw(
                serde_json::from_value::<Vec<Vec<BranchRaw>>>(v).map_err(|e| parse_err(path, e))?,
            ),
            ParamsMode::Constrained => StepValues::Constrained(
                serde_json::from_value::<Vec<Vec<BranchConstrained>>>(v)
                    .map_err(|e| parse_err(path, e))?,
            ),
        })
    }

    pub fn to_params(&self, path: &Path) -> Result<EpdParams> {
        Ok(EpdParams::new(self.k, self.bounds, self.values(path)?, self.schedule, self.afs)?)
    }
}

pub fn load_params_file(path: &Path) -> Result<ParamsFile> {
    read_structured(path)
}

/// Loads and validates a parameter file. Returns the parameters and the
/// plugin flag.
pub fn load_params(path: &Path) -> Result<(EpdParams, bool)> {
    let file = load_params_file(path)?;
    Ok((file.to_params(path)?, file.plugin))
}

pub fn save_params(path: &Path, params: &EpdParams, plugin: bool) -> Result<()> {
    write_structured(path, &ParamsFile::from_params(params, plugin))
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn create_csv(path: &Path) -> Result<csv::Writer<fs::File>> {
    ensure_parent(path)?;
    let file = fs::File::create(path).map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(file))
}

/// `step_index,t,x0,x1,...` in visitation order.
pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut w = create_csv(path)?;
    let dim = traj.states.first().map_or(0, Vec::len);
    let mut header = vec!["step_index".to_string(), "t".to_string()];
    header.extend((0..dim).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for (i, (t, x)) in traj.times.iter().zip(&traj.states).enumerate() {
        let mut rec = vec![i.to_string(), fmt(*t)];
        rec.extend(x.iter().map(|v| fmt(*v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a trajectory CSV back (evaluation counts are not stored).
pub fn read_trajectory_csv(path: &Path) -> Result<Trajectory> {
    let mut r = csv::Reader::from_path(path)?;
    let mut times = Vec::new();
    let mut states = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|e| parse_err(path, e)))
            .collect::<Result<_>>()?;
        times.push(vals[0]);
        states.push(vals[1..].to_vec());
    }
    Ok(Trajectory {
        times,
        states,
        nfe: 0,
        para_nfe: 0,
    })
}

/// `index,t` in increasing time.
pub fn write_schedule_csv(path: &Path, schedule: &TimeSchedule) -> Result<()> {
    let mut w = create_csv(path)?;
    w.write_record(["index", "t"])?;
    for (i, t) in schedule.times().iter().enumerate() {
        w.write_record([i.to_string(), fmt(*t)])?;
    }
    w.flush().map_err(io_err(path))
}

/// `iteration,node,loss,wall_ms`.
pub fn write_trainlog_csv(path: &Path, log: &TrainLog) -> Result<()> {
    let mut w = create_csv(path)?;
    w.write_record(["iteration", "node", "loss", "wall_ms"])?;
    for e in &log.entries {
        w.write_record([
            e.iteration.to_string(),
            e.node.to_string(),
            fmt(e.loss),
            fmt(e.wall_ms),
        ])?;
    }
    w.flush().map_err(io_err(path))
}

/// One metrics.csv line: a finished row or a budget that could not be run.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricsLine {
    Done(MetricsRow),
    Skipped {
        solver: String,
        k: usize,
        para_nfe: usize,
        reason: String,
    },
}

pub const METRICS_HEADER: [&str; 9] = [
    "solver",
    "k",
    "para_nfe",
    "nfe",
    "seeds",
    "endpoint_error",
    "node_times",
    "node_errors",
    "status",
];

fn join(v: &[f64]) -> String {
    v.iter().map(|x| fmt(*x)).collect::<Vec<_>>().join(";")
}

pub fn write_metrics_csv(path: &Path, lines: &[MetricsLine]) -> Result<()> {
    let mut w = create_csv(path)?;
    w.write_record(METRICS_HEADER)?;
    for line in lines {
        match line {
            MetricsLine::Done(r) => w.write_record([
                r.solver.clone(),
                r.k.to_string(),
                r.para_nfe.to_string(),
                r.nfe.to_string(),
                r.seeds.to_string(),
                fmt(r.endpoint_error),
                join(&r.node_times),
                join(&r.node_errors),
                "ok".to_string(),
            ])?,
            MetricsLine::Skipped {
                solver,
                k,
                para_nfe,
                reason,
            } => w.write_record([
                solver.clone(),
                k.to_string(),
                para_nfe.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                format!("skipped: {reason}"),
            ])?,
        }
    }
    w.flush().map_err(io_err(path))
}

pub fn write_latency_csv(path: &Path, report: &LatencyReport) -> Result<()> {
    let mut w = create_csv(path)?;
    for row in &report.rows {
        w.serialize(row)?;
    }
    if report.rows.is_empty() {
        w.write_record(["K", "workers", "mean_ms", "ci95_ms", "reps"])?;
    }
    w.flush().map_err(io_err(path))
}

/// Lists `*.json` / `*.toml` files in a directory, sorted by name.
pub fn list_structured_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json" || e == "toml"))
        .collect();
    out.sort();
    Ok(out)
}

//! Experiment configuration (TOML or JSON).

use std::path::{Path, PathBuf};

use epd_core::distill::TrainConfig;
use epd_core::oracle::{GaussianMixture, MixtureSpec};
use epd_core::schedule::{ScheduleKind, DEFAULT_T_MAX, DEFAULT_T_MIN};
use epd_core::solvers::{AfsVariant, SolverKind};
use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::cost::CostMode;
use crate::error::{Error, Result};
use crate::io;

/// A solver row in the comparison grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverSpec {
    Ddim,
    Heun,
    Dpm2,
    Ipndm,
    Epd,
    EpdPlugin,
}

impl SolverSpec {
    pub fn name(&self) -> &'static str {
        match self {
            SolverSpec::Ddim => "ddim",
            SolverSpec::Heun => "heun",
            SolverSpec::Dpm2 => "dpm2",
            SolverSpec::Ipndm => "ipndm",
            SolverSpec::Epd => "epd",
            SolverSpec::EpdPlugin => "epd_plugin",
        }
    }

    pub fn baseline(&self) -> Option<SolverKind> {
        match self {
            SolverSpec::Ddim => Some(SolverKind::Ddim),
            SolverSpec::Heun => Some(SolverKind::Heun),
            SolverSpec::Dpm2 => Some(SolverKind::Dpm2),
            SolverSpec::Ipndm => Some(SolverKind::Ipndm),
            SolverSpec::Epd | SolverSpec::EpdPlugin => None,
        }
    }

    pub fn is_learned(&self) -> bool {
        self.baseline().is_none()
    }

    /// Step count reaching sequential depth `budget`, if any.
    ///
    /// With AFS: DDIM/iPNDM take `budget + 1` steps; Heun, DPM-2, EPD and
    /// the plugin take `(budget + 1) / 2` and need an odd budget. Without
    /// AFS the single-evaluation solvers take `budget` steps and the others
    /// need an even budget.
    pub fn steps_for_budget(&self, budget: usize, afs: bool) -> std::result::Result<usize, String> {
        if budget == 0 {
            return Err("budget must be positive".into());
        }
        let single = matches!(self, SolverSpec::Ddim | SolverSpec::Ipndm);
        match (single, afs) {
            (true, true) => Ok(budget + 1),
            (true, false) => Ok(budget),
            (false, true) if !budget.is_multiple_of(2) => Ok(budget.div_ceil(2)),
            (false, false) if budget.is_multiple_of(2) => Ok(budget / 2),
            (false, true) => Err(format!("{} with AFS needs an odd budget, got {budget}", self.name())),
            (false, false) => Err(format!("{} without AFS needs an even budget, got {budget}", self.name())),
        }
    }
}

/// Where the model comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    File { file: PathBuf },
    Inline(MixtureSpec),
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Inline(GaussianMixture::default_2d().spec())
    }
}

impl ModelSpec {
    /// Relative file paths are resolved against `base`.
    pub fn load(&self, base: Option<&Path>) -> Result<GaussianMixture> {
        match self {
            ModelSpec::File { file } => {
                let path = match base {
                    Some(b) if file.is_relative() => b.join(file),
                    _ => file.clone(),
                };
                io::load_mixture(&path)
            }
            ModelSpec::Inline(spec) => Ok(GaussianMixture::try_from(spec.clone())?),
        }
    }
}

/// Schedule family per solver, plus shared endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulesConfig {
    pub t_min: f64,
    pub t_max: f64,
    pub ddim: ScheduleKind,
    pub heun: ScheduleKind,
    pub dpm2: ScheduleKind,
    pub ipndm: ScheduleKind,
    pub epd: ScheduleKind,
    pub epd_plugin: ScheduleKind,
}

impl Default for SchedulesConfig {
    fn default() -> Self {
        Self {
            t_min: DEFAULT_T_MIN,
            t_max: DEFAULT_T_MAX,
            ddim: ScheduleKind::EDM,
            heun: ScheduleKind::EDM,
            dpm2: ScheduleKind::LogSnr,
            ipndm: ScheduleKind::EDM,
            epd: ScheduleKind::EDM,
            epd_plugin: ScheduleKind::EDM,
        }
    }
}

impl SchedulesConfig {
    pub fn kind_for(&self, solver: SolverSpec) -> ScheduleKind {
        match solver {
            SolverSpec::Ddim => self.ddim,
            SolverSpec::Heun => self.heun,
            SolverSpec::Dpm2 => self.dpm2,
            SolverSpec::Ipndm => self.ipndm,
            SolverSpec::Epd => self.epd,
            SolverSpec::EpdPlugin => self.epd_plugin,
        }
    }
}

/// Ground-truth runs: `solver` on the student schedule refined to at least
/// `steps` steps, so every student node is also a reference node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceConfig {
    pub solver: SolverKind,
    pub steps: usize,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            solver: SolverKind::Heun,
            steps: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSection {
    pub enabled: bool,
    pub cost_ms: f64,
    pub cost_mode: CostMode,
    #[serde(flatten)]
    pub bench: BenchConfig,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            enabled: false,
            cost_ms: 10.0,
            cost_mode: CostMode::Spin,
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub schedules: SchedulesConfig,
    pub solvers: Vec<SolverSpec>,
    pub k_values: Vec<usize>,
    pub budgets: Vec<usize>,
    /// Analytical first step for every solver.
    pub afs: bool,
    pub afs_variant: AfsVariant,
    /// Seed for the held-out evaluation noises.
    pub seed: u64,
    pub eval_samples: usize,
    /// Seeds (by index) whose trajectories are exported as CSV.
    pub export_trajectories: usize,
    pub workers: usize,
    /// Fields left out fall back to [`experiment_train_defaults`], not to
    /// the library defaults.
    #[serde(deserialize_with = "train_overrides")]
    pub train: TrainConfig,
    pub reference: ReferenceConfig,
    pub bench: BenchSection,
    pub out_dir: PathBuf,
}

/// Training settings for the comparison grid: a larger step and a fixed
/// iteration count, since early stopping cut runs short before convergence.
pub fn experiment_train_defaults() -> TrainConfig {
    TrainConfig {
        lr: 0.05,
        iterations: 1000,
        patience: None,
        ..TrainConfig::default()
    }
}

fn train_overrides<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    use serde::de::Error as _;
    let given = serde_json::Value::deserialize(d)?;
    let serde_json::Value::Object(given) = given else {
        return Err(D::Error::custom("train must be a table"));
    };
    let mut merged = serde_json::to_value(experiment_train_defaults()).map_err(D::Error::custom)?;
    let target = merged.as_object_mut().expect("train config serialises to an object");
    for (k, v) in given {
        target.insert(k, v);
    }
    serde_json::from_value(merged).map_err(D::Error::custom)
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            schedules: SchedulesConfig::default(),
            solvers: vec![
                SolverSpec::Ddim,
                SolverSpec::Heun,
                SolverSpec::Dpm2,
                SolverSpec::Ipndm,
                SolverSpec::Epd,
                SolverSpec::EpdPlugin,
            ],
            k_values: vec![2],
            budgets: vec![3, 5, 7, 9],
            afs: true,
            afs_variant: AfsVariant::Scaled,
            seed: 2024,
            eval_samples: 256,
            export_trajectories: 2,
            workers: 1,
            train: experiment_train_defaults(),
            reference: ReferenceConfig::default(),
            bench: BenchSection::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = io::read_structured(path)?;
        if let (ModelSpec::File { file }, Some(dir)) = (&mut cfg.model, path.parent()) {
            if file.is_relative() {
                *file = dir.join(&*file);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.eval_samples == 0 {
            return bad("eval_samples must be positive".into());
        }
        if self.solvers.is_empty() || self.budgets.is_empty() {
            return bad("solvers and budgets must be nonempty".into());
        }
        if self.solvers.iter().any(SolverSpec::is_learned) && self.k_values.is_empty() {
            return bad("k_values must be nonempty when EPD rows are requested".into());
        }
        if self.k_values.contains(&0) {
            return bad("K must be positive".into());
        }
        if self.workers == 0 {
            return bad("workers must be positive".into());
        }
        if self.reference.steps == 0 {
            return bad("reference steps must be positive".into());
        }
        if !(self.schedules.t_min > 0.0) || !(self.schedules.t_max > self.schedules.t_min) {
            return bad(format!(
                "need 0 < t_min < t_max, got {} and {}",
                self.schedules.t_min, self.schedules.t_max
            ));
        }
        let mut train = self.train.clone();
        train.k = self.k_values.first().copied().unwrap_or(1);
        train.validate()?;
        Ok(())
    }
}

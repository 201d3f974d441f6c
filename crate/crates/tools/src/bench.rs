//! Per-step latency of the EPD step as a function of `K` and worker count.

use std::time::Instant;

use epd_core::epd::{derive_step_params, epd_step, Bounds, EpdParams, StepValues};
use epd_core::oracle::NoiseOracle;
use epd_core::solvers::{afs_direction, AfsVariant};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::pool::PoolExecutor;

/// Which step is timed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepShape {
    /// Start direction supplied (the analytical first step): only the `K`
    /// parallel branch evaluations remain.
    #[default]
    Branches,
    /// Start-point evaluation followed by the `K` branches.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub ks: Vec<usize>,
    pub workers: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
    pub shape: StepShape,
    pub t_from: f64,
    pub t_to: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 2, 3],
            workers: vec![1, 3],
            reps: 20,
            warmup: 3,
            shape: StepShape::Branches,
            t_from: 80.0,
            t_to: 9.7232,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    #[serde(rename = "K")]
    pub k: usize,
    pub workers: usize,
    pub mean_ms: f64,
    pub ci95_ms: f64,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRow>,
}

impl LatencyReport {
    pub fn get(&self, k: usize, workers: usize) -> Option<&LatencyRow> {
        self.rows.iter().find(|r| r.k == k && r.workers == workers)
    }

    /// `mean(k_num) / mean(k_den)` at a fixed worker count.
    pub fn ratio(&self, k_num: usize, k_den: usize, workers: usize) -> Option<f64> {
        Some(self.get(k_num, workers)?.mean_ms / self.get(k_den, workers)?.mean_ms)
    }
}

/// Sample mean and 95% Student-t confidence half-width.
pub fn mean_ci95(samples: &[f64]) -> Result<(f64, f64)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "a confidence interval needs at least 2 repetitions, got {n}"
        )));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok((mean, 0.0));
    }
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::Config(e.to_string()))?
        .inverse_cdf(0.975);
    Ok((mean, t * (var / n as f64).sqrt()))
}

/// Times one EPD step for every `(K, workers)` pair. Branch values come
/// from the default initialisation; timings vary between runs, the stepped
/// values do not.
pub fn bench_step_latency<O: NoiseOracle>(oracle: &O, config: &BenchConfig) -> Result<LatencyReport> {
    if config.reps < 2 {
        return Err(Error::Config(format!(
            "latency bench needs at least 2 repetitions, got {}",
            config.reps
        )));
    }
    if config.ks.contains(&0) || config.workers.contains(&0) {
        return Err(Error::Config("K and worker counts must be positive".into()));
    }
    let x: Vec<f64> = (0..oracle.dim())
        .map(|j| config.t_from * if j % 2 == 0 { 0.7 } else { -0.4 })
        .collect();
    let d0 = afs_direction(&x, config.t_from, AfsVariant::Scaled);
    let mut rows = Vec::new();
    for &workers in &config.workers {
        let pool = PoolExecutor::new(workers)?;
        for &k in &config.ks {
            let params = EpdParams::initial(1, k, Bounds::default())?;
            let StepValues::Raw(steps) = params.values() else {
                unreachable!("initial parameters are raw")
            };
            let branches = derive_step_params(&steps[0], &params.bounds, config.t_from, config.t_to)?;
            let over = match config.shape {
                StepShape::Branches => Some(d0.as_slice()),
                StepShape::Full => None,
            };
            let mut times = Vec::with_capacity(config.reps);
            for rep in 0..config.warmup + config.reps {
                let start = Instant::now();
                epd_step(oracle, &pool, &x, config.t_from, config.t_to, &branches, over)?;
                let ms = start.elapsed().as_secs_f64() * 1e3;
                if rep >= config.warmup {
                    times.push(ms);
                }
            }
            let (mean_ms, ci95_ms) = mean_ci95(&times)?;
            rows.push(LatencyRow {
                k,
                workers,
                mean_ms,
                ci95_ms,
                reps: config.reps,
            });
        }
    }
    Ok(LatencyReport { rows })
}

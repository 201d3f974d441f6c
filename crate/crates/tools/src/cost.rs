//! Synthetic per-evaluation cost, standing in for an expensive network call.

use std::time::{Duration, Instant};

use epd_core::oracle::NoiseOracle;
use epd_core::State;
use serde::{Deserialize, Serialize};

/// How the added cost is spent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// Busy-wait on the calling core, like a CPU-bound model.
    #[default]
    Spin,
    /// Sleep, like waiting on an accelerator. Overlaps even on one core.
    Block,
}

impl std::str::FromStr for CostMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spin" => Ok(CostMode::Spin),
            "block" => Ok(CostMode::Block),
            other => Err(format!("unknown cost mode '{other}' (expected spin or block)")),
        }
    }
}

/// Oracle wrapper that adds a fixed wall-clock cost to every evaluation.
/// Values are those of the inner oracle.
#[derive(Debug, Clone)]
pub struct WithCost<O> {
    inner: O,
    cost: Duration,
    mode: CostMode,
}

pub fn with_cost<O: NoiseOracle>(inner: O, cost: Duration) -> WithCost<O> {
    WithCost::new(inner, cost, CostMode::Spin)
}

impl<O> WithCost<O> {
    pub fn new(inner: O, cost: Duration, mode: CostMode) -> Self {
        Self { inner, cost, mode }
    }

    pub fn cost(&self) -> Duration {
        self.cost
    }

    pub fn mode(&self) -> CostMode {
        self.mode
    }

    fn wait(&self) {
        match self.mode {
            CostMode::Block => std::thread::sleep(self.cost),
            CostMode::Spin => {
                let start = Instant::now();
                while start.elapsed() < self.cost {
                    std::hint::spin_loop();
                }
            }
        }
    }
}

impl<O: NoiseOracle> NoiseOracle for WithCost<O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn noise(&self, x: &[f64], t: f64) -> epd_core::error::Result<State> {
        let out = self.inner.noise(x, t);
        self.wait();
        out
    }
}

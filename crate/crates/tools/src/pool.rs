//! Fixed-size rayon pool behind the core [`Executor`] trait.

use std::panic::{catch_unwind, AssertUnwindSafe};

use epd_core::exec::{Executor, Task};
use epd_core::{Error as CoreError, State};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Thread-pool executor. The pool is built once and reused for every
/// fan-out; results come back in task order whatever the worker count.
pub struct PoolExecutor {
    pool: rayon::ThreadPool,
    workers: usize,
}

impl PoolExecutor {
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .thread_name(|i| format!("epd-worker-{i}"))
            .build()
            .map_err(|e| Error::Pool(e.to_string()))?;
        Ok(Self { pool, workers })
    }
}

impl std::fmt::Debug for PoolExecutor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PoolExecutor").field("workers", &self.workers).finish()
    }
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "worker panicked".to_string()
    }
}

impl PoolExecutor {
    /// Runs `f(0) .. f(count - 1)` on the pool and returns the outputs in
    /// index order. A panic in `f(i)` becomes `EvalFailed { index: i }`; when
    /// several tasks fail, the lowest index is reported.
    pub fn map<T, F>(&self, count: usize, f: F) -> epd_core::error::Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> epd_core::error::Result<T> + Sync,
    {
        let guarded = |i: usize| match catch_unwind(AssertUnwindSafe(|| f(i))) {
            Ok(r) => r,
            Err(payload) => Err(CoreError::EvalFailed {
                index: i,
                message: panic_message(payload),
            }),
        };
        let results: Vec<epd_core::error::Result<T>> = if self.workers == 1 || count <= 1 {
            (0..count).map(guarded).collect()
        } else {
            self.pool.install(|| {
                (0..count)
                    .into_par_iter()
                    .with_max_len(1)
                    .map(guarded)
                    .collect()
            })
        };
        results.into_iter().collect()
    }
}

impl Executor for PoolExecutor {
    fn workers(&self) -> usize {
        self.workers
    }

    fn fan_out(&self, count: usize, task: &Task<'_>) -> epd_core::error::Result<Vec<State>> {
        self.map(count, task)
    }
}

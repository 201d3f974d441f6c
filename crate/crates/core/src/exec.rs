//! Fan-out/fan-in evaluation of independent oracle calls.
//!
//! An [`Executor`] runs a batch of independent tasks and hands the results
//! back in task order. Reductions over those results always happen on the
//! caller side in ascending index order, so values never depend on how many
//! workers ran the batch.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::oracle::NoiseOracle;
use crate::State;

/// One oracle evaluation inside a solver step.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRequest {
    pub state: State,
    pub time: f64,
    pub branch: usize,
}

/// A task body: maps a task index to its output vector.
pub type Task<'a> = dyn Fn(usize) -> Result<State> + Sync + 'a;

pub trait Executor: Sync {
    /// Number of workers available for one fan-out.
    fn workers(&self) -> usize;

    /// Runs `task(0) .. task(count - 1)` and returns the outputs in index
    /// order. A failing task fails the whole batch; the error carries the
    /// task index.
    fn fan_out(&self, count: usize, task: &Task<'_>) -> Result<Vec<State>>;
}

impl<E: Executor + ?Sized> Executor for &E {
    fn workers(&self) -> usize {
        (**self).workers()
    }

    fn fan_out(&self, count: usize, task: &Task<'_>) -> Result<Vec<State>> {
        (**self).fan_out(count, task)
    }
}

/// Runs every task on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn workers(&self) -> usize {
        1
    }

    fn fan_out(&self, count: usize, task: &Task<'_>) -> Result<Vec<State>> {
        (0..count).map(task).collect()
    }
}

/// Evaluates every request and returns the outputs in request order.
///
/// Failures are reported as [`Error::EvalFailed`] naming the request's
/// branch index.
pub fn par_map_eval<O, E>(executor: &E, oracle: &O, requests: &[EvalRequest]) -> Result<Vec<State>>
where
    O: NoiseOracle + ?Sized,
    E: Executor + ?Sized,
{
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let task = |i: usize| {
        let r = &requests[i];
        oracle.noise(&r.state, r.time).map_err(|e| Error::EvalFailed {
            index: i,
            message: e.to_string(),
        })
    };
    executor.fan_out(requests.len(), &task).map_err(|e| match e {
        Error::EvalFailed { index, message } if index < requests.len() => {
            let branch = requests[index].branch;
            Error::EvalFailed {
                index: branch,
                message,
            }
        }
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::GaussianMixture;
    use alloc::vec;

    #[test]
    fn sequential_preserves_order() {
        let m = GaussianMixture::default_2d();
        let reqs: Vec<_> = (0..5)
            .map(|i| EvalRequest {
                state: vec![i as f64, -(i as f64)],
                time: 0.5 + i as f64,
                branch: i,
            })
            .collect();
        let out = par_map_eval(&Sequential, &m, &reqs).unwrap();
        for (r, o) in reqs.iter().zip(&out) {
            assert_eq!(*o, m.noise_prediction(&r.state, r.time).unwrap());
        }
        assert!(par_map_eval(&Sequential, &m, &[]).unwrap().is_empty());
    }

    #[test]
    fn failure_names_branch() {
        let m = GaussianMixture::default_2d();
        let reqs = vec![
            EvalRequest {
                state: vec![0.0, 0.0],
                time: 1.0,
                branch: 0,
            },
            EvalRequest {
                state: vec![0.0, 0.0],
                time: -1.0,
                branch: 1,
            },
        ];
        match par_map_eval(&Sequential, &m, &reqs) {
            Err(Error::EvalFailed { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }
}

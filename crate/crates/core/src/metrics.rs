//! Trajectory error metrics against reference runs.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::solvers::Trajectory;

/// Relative tolerance for matching node times between trajectories.
const NODE_TOL: f64 = 1e-12;

/// Summary of one solver configuration over a set of seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub solver: String,
    pub k: usize,
    pub para_nfe: usize,
    pub nfe: usize,
    pub seeds: usize,
    /// Mean over seeds of `||x_{t_0} - x_ref_{t_0}||_2`.
    pub endpoint_error: f64,
    /// Mean error at each node the student shares with the reference, in the
    /// student's visitation order.
    pub node_times: Vec<f64>,
    pub node_errors: Vec<f64>,
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

fn same_time(a: f64, b: f64) -> bool {
    (a - b).abs() <= NODE_TOL * a.abs().max(b.abs())
}

/// Compares each trajectory with its reference (same seed, same order).
pub fn compute_trajectory_metrics(
    solver: &str,
    k: usize,
    trajectories: &[Trajectory],
    references: &[Trajectory],
) -> Result<MetricsRow> {
    if trajectories.len() != references.len() {
        return Err(Error::Mismatch(format!(
            "{} trajectories but {} references",
            trajectories.len(),
            references.len()
        )));
    }
    let first = trajectories
        .first()
        .ok_or_else(|| Error::Mismatch("no trajectories".into()))?;

    // Student node index -> reference node index, from the first pair.
    let mut pairs = Vec::new();
    let reference = &references[0];
    for (i, t) in first.times.iter().enumerate() {
        if let Some(j) = reference.times.iter().position(|r| same_time(*r, *t)) {
            pairs.push((i, j));
        }
    }
    let last_student = first.times.len() - 1;
    let last_reference = reference.times.len() - 1;
    if !pairs.contains(&(last_student, last_reference)) {
        return Err(Error::Mismatch(format!(
            "endpoint times differ: {} vs {}",
            first.times[last_student], reference.times[last_reference]
        )));
    }

    let mut node_errors = vec![0.0; pairs.len()];
    let mut endpoint = 0.0;
    for (traj, refr) in trajectories.iter().zip(references) {
        if traj.times.len() != first.times.len() || refr.times.len() != reference.times.len() {
            return Err(Error::Mismatch("node sets differ between seeds".into()));
        }
        for (e, (i, j)) in node_errors.iter_mut().zip(&pairs) {
            if !same_time(traj.times[*i], refr.times[*j]) {
                return Err(Error::Mismatch("node times differ between seeds".into()));
            }
            *e += l2_distance(&traj.states[*i], &refr.states[*j]);
        }
        endpoint += l2_distance(traj.endpoint(), refr.endpoint());
    }
    let n = trajectories.len() as f64;
    for e in &mut node_errors {
        *e /= n;
    }
    Ok(MetricsRow {
        solver: solver.into(),
        k,
        para_nfe: first.para_nfe,
        nfe: first.nfe,
        seeds: trajectories.len(),
        endpoint_error: endpoint / n,
        node_times: pairs.iter().map(|(i, _)| first.times[*i]).collect(),
        node_errors,
    })
}

//! Parallel ensemble execution with results in trajectory-index order.
//!
//! Work runs on the current rayon pool; wrap calls in
//! `ThreadPool::install` to choose the worker count. Output never depends on it.

use rayon::prelude::*;

use crate::error::Result;
use crate::rng::trajectory_seed;

/// Runs `job(index, seed)` for `index` in `start..start + n`. The first error
/// in index order is returned.
pub fn run_indexed<T, F>(base_seed: u64, start: usize, n: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, u64) -> Result<T> + Sync,
{
    let results: Vec<Result<T>> = (start..start + n)
        .into_par_iter()
        .map(|i| job(i, trajectory_seed(base_seed, i as u64)))
        .collect();
    results.into_iter().collect()
}

pub fn run_ensemble<T, F>(base_seed: u64, n: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, u64) -> Result<T> + Sync,
{
    run_indexed(base_seed, 0, n, job)
}

/// Runs jobs in index order, in parallel batches, keeping outputs for which
/// `keep` holds, until `wanted` are kept or `max_runs` jobs have run.
/// The kept set is the first `wanted` matches in index order.
pub fn collect_matching<T, F, P>(
    base_seed: u64,
    wanted: usize,
    max_runs: usize,
    batch: usize,
    job: F,
    keep: P,
) -> Result<(Vec<T>, usize)>
where
    T: Send,
    F: Fn(usize, u64) -> Result<T> + Sync,
    P: Fn(&T) -> bool,
{
    let mut kept = Vec::with_capacity(wanted);
    let mut next = 0;
    while kept.len() < wanted && next < max_runs {
        let n = batch.max(1).min(max_runs - next);
        for item in run_indexed(base_seed, next, n, &job)? {
            if kept.len() < wanted && keep(&item) {
                kept.push(item);
            }
        }
        next += n;
    }
    Ok((kept, next))
}

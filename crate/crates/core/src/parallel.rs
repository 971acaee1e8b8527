//! Thread budget for internal kernels.
//!
//! `DOODLERANK_THREADS` caps parallelism; `0` (or `1`) selects the sequential
//! deterministic mode. Every parallel kernel in this crate reduces partial
//! results in a fixed order, so outputs do not depend on the thread count,
//! but the sequential mode is the reference for reproducibility tests.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use rayon::prelude::*;

pub const THREADS_ENV: &str = "DOODLERANK_THREADS";

const UNSET: usize = usize::MAX;

static OVERRIDE: AtomicUsize = AtomicUsize::new(UNSET);
static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();

/// Effective thread count. `0` means sequential.
pub fn threads() -> usize {
    match OVERRIDE.load(Ordering::Relaxed) {
        UNSET => env_threads(),
        n => n,
    }
}

fn env_threads() -> usize {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse().unwrap_or(0),
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    }
}

/// Overrides the environment for the rest of the process.
pub fn set_threads(n: usize) {
    OVERRIDE.store(n, Ordering::Relaxed);
}

pub fn is_sequential() -> bool {
    threads() <= 1
}

fn pool() -> Option<&'static rayon::ThreadPool> {
    POOL.get_or_init(|| {
        let n = env_threads()
            .max(std::thread::available_parallelism().map_or(1, |n| n.get()))
            .max(2);
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .thread_name(|i| format!("doodlerank-{i}"))
            .build()
            .ok()
    })
    .as_ref()
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    if n <= 1 || is_sequential() {
        return (0..n).map(f).collect();
    }
    match pool() {
        Some(pool) => {
            let cap = threads();
            pool.install(|| {
                let min_len = n.div_ceil(cap).max(1);
                (0..n).into_par_iter().with_min_len(min_len).map(f).collect()
            })
        }
        None => (0..n).map(f).collect(),
    }
}

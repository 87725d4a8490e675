//! Data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature, [`Parallelism::Parallel`] runs on a
//! process-wide rayon pool sized by `VILORA_THREADS` (default: available
//! parallelism). Without the feature, or with [`Parallelism::Sequential`],
//! work runs in order on the calling thread. Results are always returned in
//! input order, and callers derive per-item RNG streams from the item index,
//! so both paths produce identical output.

#[cfg(feature = "parallel")]
use std::sync::OnceLock;

pub const THREADS_ENV: &str = "VILORA_THREADS";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

impl Parallelism {
    /// `Parallel` when the feature is compiled in, else `Sequential`.
    pub fn available() -> Self {
        if cfg!(feature = "parallel") {
            Parallelism::Parallel
        } else {
            Parallelism::Sequential
        }
    }
}

/// Worker count requested through `VILORA_THREADS`, if set and valid.
pub fn requested_threads() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

#[cfg(feature = "parallel")]
fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = requested_threads().unwrap_or_else(|| {
            std::thread::available_parallelism().map_or(1, usize::from)
        });
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .thread_name(|i| format!("vilora-worker-{i}"))
            .build()
            .expect("worker pool")
    })
}

/// Maps `f(index, item)` over `items`, preserving order.
pub fn map<T, R, F>(mode: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        Parallelism::Parallel => {
            use rayon::prelude::*;
            pool().install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect())
        }
        _ => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
    }
}

/// Maps over `0..n`, preserving order.
pub fn map_range<R, F>(mode: Parallelism, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    let idx: Vec<usize> = (0..n).collect();
    map(mode, &idx, |_, &i| f(i))
}

//! Worker-count control for the data-parallel kernels.
//!
//! Every parallel region writes into disjoint per-chain or per-vertex buffers
//! and reduces in a fixed order, so results do not depend on the worker count.

use rayon::ThreadPoolBuilder;

pub const WORKERS_ENV: &str = "DDCRF_WORKERS";

/// Worker count from `DDCRF_WORKERS`, if set to a positive integer.
pub fn workers_from_env() -> Option<usize> {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
}

/// Runs `f` on a dedicated pool of `workers` threads (`None` uses the global pool).
pub fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match workers {
        Some(n) => ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
            .install(f),
        None => f(),
    }
}

//! Worker-pool plumbing.
//!
//! Every public solver entry point runs inside a rayon pool sized from the
//! `HJBLAB_THREADS` environment variable (0 or unset = rayon default). All
//! parallel sections write to pre-allocated indexed slots and all statistical
//! reductions run sequentially in index order, so results are bitwise
//! independent of the worker count.

/// Number of worker threads requested via `HJBLAB_THREADS` (0 = automatic).
pub fn configured_threads() -> usize {
    std::env::var("HJBLAB_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .unwrap_or(0)
}

/// Run `f` inside a pool honoring `HJBLAB_THREADS`.
pub fn run_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    let n = configured_threads();
    if n == 0 {
        // Rayon's global default pool.
        return f();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .expect("thread pool")
        .install(f)
}

/// Compensated (Neumaier) sum in a fixed index order. Deterministic and
/// accurate to a few ulps even over 1e5-term accumulations.
pub fn ordered_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Sample mean and unbiased variance, accumulated in index order.
pub fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = ordered_sum(values) / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, ss / (n - 1) as f64)
}

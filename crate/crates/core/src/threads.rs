//! Thread-pool setup. All parallel sections run on one global rayon pool
//! whose size is read from `WIDTHFORGE_THREADS` once per process; results
//! must not depend on the pool size (parallel maps collect into indexed
//! vectors and reduce sequentially).

use std::sync::OnceLock;

static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

/// Returns the process-wide pool, building it on first use from
/// `WIDTHFORGE_THREADS` (unset or unparsable means rayon's default).
pub fn pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var("WIDTHFORGE_THREADS")
            .ok()
            .and_then(|s| s.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
        {
            builder = builder.num_threads(n);
        }
        builder.build().expect("thread pool")
    })
}

/// Parallel map over `0..count` with deterministic output order.
pub fn par_map<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    pool().install(|| (0..count).into_par_iter().map(|i| f(i)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_preserves_order() {
        let out = par_map(100, |i| i * i);
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, i * i);
        }
    }
}

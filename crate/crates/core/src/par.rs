//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these fan out over rayon's pool;
//! without it they run sequentially. Results always come back in index
//! order so reductions are deterministic either way.

/// Maps `f` over `0..n`, returning results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, returning results in order.
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    map_indexed(items.len(), |i| f(&items[i]))
}

/// Whether this build runs the parallel code paths.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Caps the global worker pool from the `OPL_THREADS` environment variable.
///
/// Returns the number of threads requested, if any. Calling this after the
/// pool has been initialised is harmless; the first configuration wins.
pub fn init_from_env() -> Option<usize> {
    let threads = std::env::var("OPL_THREADS").ok()?.trim().parse::<usize>().ok()?;
    if threads == 0 {
        return None;
    }
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    Some(threads)
}

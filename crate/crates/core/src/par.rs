//! Order-preserving map over index ranges, parallel when the `parallel`
//! feature is on. Results always come back in index order so reductions done
//! by the caller are independent of the thread count.

#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Runs `f` inside a pool capped at `DPULR_THREADS` threads when that variable
/// is set to a positive integer.
#[cfg(feature = "parallel")]
pub fn with_thread_cap<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match thread_cap() {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(e) => {
                log::warn!("could not build a {n}-thread pool ({e}); using the global pool");
                f()
            }
        },
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_thread_cap<T>(f: impl FnOnce() -> T) -> T {
    f()
}

#[cfg_attr(not(feature = "parallel"), allow(dead_code))]
fn thread_cap() -> Option<usize> {
    std::env::var("DPULR_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

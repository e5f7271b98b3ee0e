//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature, work is split over rayon's pool unless
//! parallelism has been switched off at runtime (`CSDN_THREADS=0` or
//! [`set_enabled`]). Every helper assigns each index to exactly one closure
//! call and returns results in index order, so outputs are bit-identical in
//! both modes.

use std::sync::atomic::{AtomicU8, Ordering};

const UNSET: u8 = 0;
const OFF: u8 = 1;
const ON: u8 = 2;

static MODE: AtomicU8 = AtomicU8::new(UNSET);

/// Environment variable capping internal parallelism; `0` means sequential.
pub const THREADS_ENV: &str = "CSDN_THREADS";

fn init_from_env() -> bool {
    let requested = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok());
    match requested {
        Some(0) => false,
        #[cfg(feature = "parallel")]
        Some(n) => {
            // Fails harmlessly if the global pool was already built.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            true
        }
        _ => cfg!(feature = "parallel"),
    }
}

/// Whether kernels currently fan out over threads.
pub fn enabled() -> bool {
    match MODE.load(Ordering::Relaxed) {
        OFF => false,
        ON => true,
        _ => {
            let on = init_from_env();
            let _ = MODE.compare_exchange(UNSET, if on { ON } else { OFF }, Ordering::Relaxed, Ordering::Relaxed);
            MODE.load(Ordering::Relaxed) == ON
        }
    }
}

/// Overrides the runtime mode. Has no effect on builds without `parallel`.
pub fn set_enabled(on: bool) {
    let on = on && cfg!(feature = "parallel");
    MODE.store(if on { ON } else { OFF }, Ordering::Relaxed);
}

/// Runs `f` with parallelism forced to `on`, restoring the previous mode.
pub fn with_mode<R>(on: bool, f: impl FnOnce() -> R) -> R {
    let prev = enabled();
    set_enabled(on);
    let out = f();
    set_enabled(prev);
    out
}

/// Number of worker threads kernels may use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    if enabled() {
        return rayon::current_num_threads();
    }
    1
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if n > 1 && enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Calls `f(i, chunk)` for each `chunk_len`-sized chunk of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if data.len() > chunk_len && enabled() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

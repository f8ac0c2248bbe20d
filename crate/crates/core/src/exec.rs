//! Execution mode for the data-parallel kernels.
//!
//! With the `parallel` feature (on by default) kernels split their output
//! index space across the rayon pool. Every output element is still produced
//! by exactly one task with a fixed accumulation order, so results are
//! bitwise identical between [`Exec::Sequential`] and [`Exec::Parallel`] and
//! independent of the thread count.

use std::sync::atomic::{AtomicU8, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Falls back to sequential execution when built without `parallel`.
    Parallel,
}

const UNSET: u8 = 0;
const SEQ: u8 = 1;
const PAR: u8 = 2;

static DEFAULT_EXEC: AtomicU8 = AtomicU8::new(UNSET);

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

impl Default for Exec {
    fn default() -> Self {
        match DEFAULT_EXEC.load(Ordering::Relaxed) {
            SEQ => Exec::Sequential,
            PAR => Exec::Parallel,
            _ if cfg!(feature = "parallel") => Exec::Parallel,
            _ => Exec::Sequential,
        }
    }
}

/// Overrides the process-wide default returned by `Exec::default()`.
pub fn set_default_exec(exec: Exec) {
    let v = match exec {
        Exec::Sequential => SEQ,
        Exec::Parallel => PAR,
    };
    DEFAULT_EXEC.store(v, Ordering::Relaxed);
}

/// Caps the global rayon pool at `threads` workers. Only the first call in a
/// process has an effect.
pub fn init_thread_pool(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

/// Reads `AFN_THREADS` and sizes the pool accordingly.
pub fn init_from_env() {
    if let Some(n) = std::env::var("AFN_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        init_thread_pool(n);
    }
}

/// Calls `f(index, chunk)` for every `chunk`-sized piece of `data`.
pub(crate) fn for_each_chunk<F>(exec: Exec, data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = exec;
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Maps `0..n` through `f`, preserving index order in the result.
pub(crate) fn map_indices<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers dispatch to rayon; without it (or
//! inside [`sequential`]) they run on the calling thread. Reductions always
//! fold fixed-size chunks and combine the partial results in chunk order, so
//! floating-point results are bit-identical for any worker count.

use std::cell::Cell;

/// Rows per reduction chunk. Part of the numeric contract: changing it changes
/// the summation order of every chunked reduction.
pub const CHUNK: usize = 256;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with every helper in this module forced onto the calling thread.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    let prev = FORCE_SEQUENTIAL.with(|c| c.replace(true));
    let out = f();
    FORCE_SEQUENTIAL.with(|c| c.set(prev));
    out
}

fn use_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.with(|c| c.get())
}

/// `(0..n).map(f).collect()`, order preserved.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if use_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = use_parallel;
    (0..n).map(f).collect()
}

/// Folds `0..n` in chunks of [`CHUNK`] and combines the per-chunk accumulators
/// left to right.
pub fn chunked_reduce<A, I, F, C>(n: usize, identity: I, fold: F, combine: C) -> A
where
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(&mut A, usize) + Sync + Send,
    C: Fn(&mut A, A),
{
    let chunks = n.div_ceil(CHUNK);
    let partials = map_indexed(chunks, |c| {
        let mut acc = identity();
        let end = ((c + 1) * CHUNK).min(n);
        for i in c * CHUNK..end {
            fold(&mut acc, i);
        }
        acc
    });
    let mut total = identity();
    for p in partials {
        combine(&mut total, p);
    }
    total
}

/// Number of worker threads the parallel helpers would use.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    if use_parallel() {
        return rayon::current_num_threads();
    }
    1
}

/// Caps the global worker pool. Returns false when the pool was already built
/// or the crate was compiled without the `parallel` feature.
pub fn init_threads(n: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        return rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().is_ok();
    }
    #[allow(unreachable_code)]
    {
        let _ = n;
        false
    }
}

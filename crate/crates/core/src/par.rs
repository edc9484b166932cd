//! Data-parallel helpers with a sequential fallback.
//!
//! Every kernel parallelizes over disjoint output slices only, with sequential
//! accumulation inside each slice, so results are bitwise identical for any
//! thread count. The `parallel` feature (default on) routes the loops through
//! rayon; without it the same bodies run on plain iterators.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runs `f(chunk_index, chunk)` over consecutive `chunk_len`-sized chunks of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, c) in data.chunks_mut(chunk_len).enumerate() {
            f(i, c);
        }
    }
}

/// Runs `f(chunk_index, a_chunk, b_chunk)` over two buffers chunked in lockstep.
pub fn for_each_chunk_pair_mut<A, B, F>(a: &mut [A], la: usize, b: &mut [B], lb: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync + Send,
{
    debug_assert!(la > 0 && lb > 0);
    #[cfg(feature = "parallel")]
    {
        a.par_chunks_mut(la)
            .zip(b.par_chunks_mut(lb))
            .enumerate()
            .for_each(|(i, (ca, cb))| f(i, ca, cb));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, (ca, cb)) in a.chunks_mut(la).zip(b.chunks_mut(lb)).enumerate() {
            f(i, ca, cb);
        }
    }
}

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Configures the global thread pool from the `WNET_THREADS` environment
/// variable (default 1). Safe to call more than once; only the first call
/// takes effect. No-op without the `parallel` feature.
pub fn init_threads_from_env() -> usize {
    let threads = std::env::var("WNET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1);
    init_threads(threads);
    threads
}

#[cfg(feature = "parallel")]
pub fn init_threads(threads: usize) {
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
}

#[cfg(not(feature = "parallel"))]
pub fn init_threads(_threads: usize) {}

//! Deterministic data-parallel helpers.
//!
//! Each helper splits work by index, computes every index independently,
//! and writes results to pre-assigned slots, so the summation order inside
//! any one output element never depends on thread count. The `*_seq`
//! variants are always available; the unsuffixed dispatchers use rayon when
//! the `parallel` feature is enabled and fall back to the sequential bodies
//! otherwise, with bit-identical results either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `0..n` through `f`, collecting results in index order, sequentially.
#[cfg_attr(feature = "parallel", allow(dead_code))]
pub(crate) fn map_indexed_seq<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Map `0..n` through `f`, collecting results in index order.
#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Map `0..n` through `f`, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    map_indexed_seq(n, f)
}

/// Apply `f(chunk_index, chunk)` to consecutive chunks of at most
/// `chunk_len` elements, sequentially.
pub(crate) fn for_each_chunk_seq<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
        f(i, chunk);
    }
}

/// Apply `f(chunk_index, chunk)` to consecutive chunks of at most
/// `chunk_len` elements.
#[cfg(feature = "parallel")]
pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    data.par_chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, chunk)| f(i, chunk));
}

/// Apply `f(chunk_index, chunk)` to consecutive chunks of at most
/// `chunk_len` elements.
#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    for_each_chunk_seq(data, chunk_len, f);
}

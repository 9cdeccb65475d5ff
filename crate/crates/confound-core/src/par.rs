//! Thin indirection over rayon so every data-parallel loop in the crate has
//! a sequential twin. With the `parallel` feature off, these compile to the
//! plain iterator versions with identical arithmetic and ordering, so
//! results are byte-for-byte the same either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to consecutive chunks of `data` (the last may be short),
/// passing the chunk index. Chunks are disjoint, so this parallelizes
/// without locks.
pub(crate) fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Collect `f(0), f(1), ..., f(n-1)` in index order.
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
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

//! Execution strategy for the data-parallel loops in this crate.
//!
//! Kernel recursions, Monte-Carlo estimators, Jacobian rows, and sweep cells
//! are all embarrassingly parallel over an index range. Call sites go through
//! [`map_indexed`] / [`for_each_indexed`], which fan out over the rayon
//! global pool when the `parallel` feature (on by default) is enabled and
//! degrade to a plain loop otherwise.
//!
//! The `*_seq` variants are compiled unconditionally so the two strategies
//! can be compared head-to-head (see `benches/exec_modes.rs`). Work items
//! must not share mutable state and must derive any randomness from their
//! index (see [`crate::rng`]); under that discipline both strategies produce
//! identical output.

/// Applies `f` to `0..n` and collects the results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indexed_seq(n, f)
    }
}

/// Sequential twin of [`map_indexed`]; always available for benchmarking.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Runs `f` on every index in `0..n` for its side effects on captured
/// `Sync` state (e.g. writing through disjoint slices).
pub fn for_each_indexed<F>(n: usize, f: F)
where
    F: Fn(usize) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().for_each(f);
    }
    #[cfg(not(feature = "parallel"))]
    {
        for_each_indexed_seq(n, f)
    }
}

/// Sequential twin of [`for_each_indexed`].
pub fn for_each_indexed_seq<F>(n: usize, f: F)
where
    F: Fn(usize),
{
    (0..n).for_each(f);
}

/// Applies `f` to disjoint mutable chunks of `data`, in parallel when
/// enabled. `f` receives the chunk index and the chunk itself.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk_len > 0, "chunk_len must be positive");
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for_each_chunk_seq(data, chunk_len, f);
    }
}

/// Sequential twin of [`for_each_chunk`].
pub fn for_each_chunk_seq<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    assert!(chunk_len > 0, "chunk_len must be positive");
    for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
        f(i, chunk);
    }
}

//! Data-parallel building blocks with a sequential fallback.
//!
//! With the `parallel` feature (default) the helpers dispatch to rayon;
//! without it they run plain sequential loops. Both paths produce results
//! in index order, and reductions over their output are performed by the
//! callers as fixed-order sequential folds, so values are bit-identical
//! across thread counts and between the two modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub(crate) fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Fill `data` split into equal `chunk`-sized pieces; `f(i, piece)` fills piece `i`.
#[cfg(feature = "parallel")]
pub(crate) fn fill_chunks<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    data.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, piece)| f(i, piece));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn fill_chunks<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]),
{
    for (i, piece) in data.chunks_mut(chunk).enumerate() {
        f(i, piece);
    }
}

/// Name of the active execution mode, used to label benchmark output.
pub fn mode() -> &'static str {
    #[cfg(feature = "parallel")]
    {
        "rayon"
    }
    #[cfg(not(feature = "parallel"))]
    {
        "seq"
    }
}

//! Index-space map used by every data-parallel loop in the crate.
//!
//! Results are always collected in index order and reduced sequentially by
//! the caller, so the parallel and sequential builds produce bit-identical
//! numbers.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
pub(crate) fn map_range<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..len).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_range<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..len).map(f).collect()
}

/// Like [`map_range`] but short-circuits on the first error in index order.
pub(crate) fn try_map_range<T, E, F>(len: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_range(len, f).into_iter().collect()
}

/// True when the crate was built with the `parallel` feature.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

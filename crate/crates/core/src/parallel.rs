//! Order-preserving map over independent work items.
//!
//! With the `parallel` feature the work fans out over the rayon pool;
//! without it the same closure runs sequentially. Results are always
//! returned in input order, so callers that reduce them in sequence get
//! bit-identical output either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
pub fn map_indexed<R, F>(count: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..count).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<R, F>(count: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..count).map(f).collect()
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

//! Per-sample fan-out.
//!
//! With the `parallel` feature the closures run on the rayon pool that is
//! current at the call site; without it they run in order on the calling
//! thread. Results always come back in index order, so reductions over them
//! are identical regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Evaluates `f(i)` for `i in 0..len` and collects the results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..len).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_indexed_sequential(len, f)
}

/// Always-sequential variant; used where timing must reflect one core.
pub fn map_indexed_sequential<T, F>(len: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..len).map(f).collect()
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

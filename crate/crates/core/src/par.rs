//! Order-preserving map over independent work items.
//!
//! With the `parallel` feature the rayon pool is used; without it (or when
//! the caller asks for sequential execution) items run in order on the
//! current thread. Results always come back in input order, so downstream
//! output is deterministic either way.

/// Map `f` over `items`, optionally in parallel.
pub fn map_maybe_parallel<T, U, F>(items: Vec<T>, parallel: bool, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel {
            use rayon::prelude::*;
            return items.into_par_iter().map(f).collect();
        }
    }
    let _ = parallel;
    items.into_iter().map(f).collect()
}

/// Map `f` over indices `0..n`, optionally in parallel.
pub fn map_indices<U, F>(n: usize, parallel: bool, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    map_maybe_parallel((0..n).collect(), parallel, f)
}

//! Data-parallel map helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) `run_indexed` fans out over a rayon
//! pool; without it the same call runs sequentially. Results always come back
//! in index order, so reductions over the returned `Vec` are deterministic
//! regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, returning results in index order.
#[cfg(feature = "parallel")]
pub fn run_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Map `f` over `0..n`, returning results in index order.
#[cfg(not(feature = "parallel"))]
pub fn run_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    run_indexed_seq(n, f)
}

/// Sequential counterpart of [`run_indexed`], always available so benchmarks
/// can compare the two paths in a single build.
pub fn run_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_in_order() {
        let a = run_indexed(100, |i| i * i);
        let b = run_indexed_seq(100, |i| i * i);
        assert_eq!(a, b);
    }
}

//! Replicate fan-out: rayon when the `parallel` feature is enabled, plain
//! iteration otherwise. Determinism does not depend on the backend because
//! every work item seeds its own RNG stream and results are collected in
//! index order.

#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Always-sequential variant, kept so benchmarks can compare the two paths
/// within one build.
pub(crate) fn map_indexed_serial<T: Send>(
    n: usize,
    f: impl Fn(usize) -> T + Sync + Send,
) -> Vec<T> {
    (0..n).map(f).collect()
}

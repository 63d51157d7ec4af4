//! Work fan-out helpers.
//!
//! Heavy inner loops (Monte Carlo sweeps, EM restarts, imputation chains,
//! blow-up grids) go through [`map_indexed`], which runs on rayon when the
//! `parallel` feature is enabled and falls back to a plain sequential loop
//! otherwise. Results come back in index order and every reduction in the
//! crate folds them sequentially, so numeric output is identical in both
//! modes and under any thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f` to `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    (0..n).into_par_iter().map(f).collect()
}

/// Applies `f` to `0..n`, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Always-sequential variant, kept for benchmark baselines.
pub fn map_indexed_seq<T, F: Fn(usize) -> T>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_in_order() {
        let f = |i: usize| (i as f64).sqrt() * 0.1 + i as f64;
        assert_eq!(map_indexed(257, f), map_indexed_seq(257, f));
    }
}

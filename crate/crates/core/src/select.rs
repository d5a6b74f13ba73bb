//! Deterministic top-k selection.
//!
//! Every argtop in the engine goes through here: highest value first, ties
//! resolved toward the lower index, result returned in ascending index order.

use std::cmp::Ordering;

/// Ranking order: descending value, then ascending index.
///
/// Adding `0.0` folds `-0.0` into `+0.0` so signed zeros tie.
#[inline]
fn rank_cmp<T: Copy + Into<f64>>(values: &[T], a: usize, b: usize) -> Ordering {
    let va = values[a].into() + 0.0;
    let vb = values[b].into() + 0.0;
    vb.total_cmp(&va).then(a.cmp(&b))
}

/// Indices of the `k` largest `values`, sorted ascending. `k` saturates at `values.len()`.
pub fn top_k<T: Copy + Into<f64>>(values: &[T], k: usize) -> Vec<usize> {
    top_k_of(values, (0..values.len()).collect(), k)
}

/// Top-`k` restricted to `candidates` (positions into `values`), sorted ascending.
pub fn top_k_of<T: Copy + Into<f64>>(values: &[T], mut candidates: Vec<usize>, k: usize) -> Vec<usize> {
    let k = k.min(candidates.len());
    if k == 0 {
        return Vec::new();
    }
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, |&a, &b| rank_cmp(values, a, b));
        candidates.truncate(k);
    }
    candidates.sort_unstable();
    candidates
}

/// Full ranking of `values`: position 0 holds the index of the best element.
pub fn ranking<T: Copy + Into<f64>>(values: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_unstable_by(|&a, &b| rank_cmp(values, a, b));
    idx
}

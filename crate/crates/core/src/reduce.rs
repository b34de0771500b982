//! Order-fixed reductions.
//!
//! Parallel evaluation collects per-pixel terms into vectors in index order;
//! these helpers then reduce them with a fixed binary-tree topology so the
//! result does not depend on how many worker threads produced the terms.

/// Pairwise (tree) sum with a fixed split point at `len / 2`.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let (lo, hi) = values.split_at(n / 2);
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}

/// Tree sum of fixed-size vectors, same topology as [`pairwise_sum`].
pub fn pairwise_sum_vec<const N: usize>(values: &[[f64; N]]) -> [f64; N] {
    match values.len() {
        0 => [0.0; N],
        1 => values[0],
        n => {
            let (lo, hi) = values.split_at(n / 2);
            let a = pairwise_sum_vec(lo);
            let b = pairwise_sum_vec(hi);
            std::array::from_fn(|k| a[k] + b[k])
        }
    }
}

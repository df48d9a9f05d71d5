//! Exact brute-force distance kernels.

use crate::feature::VectorSet;

const LANES: usize = 8;

/// Squared Euclidean distance. The lane split is fixed, so the result does
/// not depend on who calls it or from which thread.
#[inline]
pub fn sq_euclidean(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let (ca, cb) = (&a[i * LANES..(i + 1) * LANES], &b[i * LANES..(i + 1) * LANES]);
        for l in 0..LANES {
            let d = ca[l] - cb[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0f32;
    for i in chunks * LANES..a.len() {
        let d = a[i] - b[i];
        tail += d * d;
    }
    acc.iter().sum::<f32>() + tail
}

/// Nearest bank vector to `query`: `(index, squared distance)`, lowest index on ties.
/// Returns `None` for an empty bank.
pub fn nearest(query: &[f32], bank: &VectorSet) -> Option<(usize, f32)> {
    let mut best: Option<(usize, f32)> = None;
    for (i, row) in bank.rows().enumerate() {
        let d = sq_euclidean(query, row);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best
}

/// The `k` nearest bank vectors to `query`, closest first (ties by index).
pub fn k_nearest(query: &[f32], bank: &VectorSet, k: usize) -> Vec<(usize, f32)> {
    let mut all: Vec<(usize, f32)> = bank.rows().map(|row| sq_euclidean(query, row)).enumerate().collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

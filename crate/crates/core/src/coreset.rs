//! Greedy k-center (farthest-first) coreset subsampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feature::VectorSet;
use crate::nn::sq_euclidean;

/// Points per rayon task in the min-distance sweep.
const PAR_CHUNK: usize = 2048;

/// Stream constant mixed into the seed for the projection matrix, so the
/// start index and the projection never share random draws.
const PROJECTION_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoresetParams {
    pub target_size: usize,
    pub seed: u64,
    /// Compute distances in a seeded Gaussian random projection of this size.
    pub projection_dim: Option<usize>,
}

impl CoresetParams {
    pub fn new(target_size: usize, seed: u64) -> Self {
        Self { target_size, seed, projection_dim: None }
    }

    pub fn with_projection(mut self, dim: usize) -> Self {
        self.projection_dim = Some(dim);
        self
    }
}

/// Seeded start index for a set of `n` points.
pub fn start_index(n: usize, seed: u64) -> usize {
    ChaCha8Rng::seed_from_u64(seed).random_range(0..n)
}

/// Selects `min(k, n)` point indices by farthest-first traversal from a
/// seeded random start. With `n <= k` every index is returned in order.
pub fn coreset_subsample(points: &VectorSet, params: &CoresetParams) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::Empty("coreset input points"));
    }
    if params.target_size == 0 {
        return Err(Error::InvalidParameter("coreset target size must be at least 1".into()));
    }
    let n = points.len();
    if n <= params.target_size {
        return Ok((0..n).collect());
    }
    let start = start_index(n, params.seed);
    match params.projection_dim {
        None => Ok(farthest_first(points, params.target_size, start)),
        Some(p) => {
            if p == 0 || p >= points.dim() {
                return Err(Error::InvalidParameter(format!(
                    "projection dim {p} must be in 1..{}",
                    points.dim()
                )));
            }
            let projected = random_projection(points, p, params.seed ^ PROJECTION_STREAM);
            Ok(farthest_first(&projected, params.target_size, start))
        }
    }
}

/// Farthest-first traversal from `start`; ties go to the lowest index.
///
/// Panics if `start` is out of range.
pub fn farthest_first(points: &VectorSet, k: usize, start: usize) -> Vec<usize> {
    let n = points.len();
    assert!(start < n, "start index {start} out of range for {n} points");
    let k = k.min(n);
    let dim = points.dim();
    let mut centers = Vec::with_capacity(k);
    // Squared distance to the nearest chosen center; chosen points hold -1 so
    // exact duplicates of a center remain selectable.
    let mut min_dist = vec![f32::INFINITY; n];
    let mut current = start;
    loop {
        centers.push(current);
        min_dist[current] = -1.0;
        if centers.len() == k {
            break;
        }
        let center = points.row(current);
        let (next, _) = min_dist
            .par_chunks_mut(PAR_CHUNK)
            .enumerate()
            .map(|(chunk, dists)| {
                let base = chunk * PAR_CHUNK;
                let rows = points.as_slice()[base * dim..].chunks_exact(dim);
                let mut best = (usize::MAX, f32::NEG_INFINITY);
                for (off, (slot, row)) in dists.iter_mut().zip(rows).enumerate() {
                    let i = base + off;
                    if *slot >= 0.0 {
                        let d = sq_euclidean(row, center);
                        if d < *slot {
                            *slot = d;
                        }
                        if *slot > best.1 {
                            best = (i, *slot);
                        }
                    }
                }
                best
            })
            .reduce(|| (usize::MAX, f32::NEG_INFINITY), pick_farther);
        current = next;
    }
    centers
}

fn pick_farther(a: (usize, f32), b: (usize, f32)) -> (usize, f32) {
    if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
        b
    } else {
        a
    }
}

/// Largest distance from any point to its nearest center (Euclidean units).
pub fn coverage_radius(points: &VectorSet, centers: &[usize]) -> Result<f64> {
    if centers.is_empty() {
        return Err(Error::Empty("coverage centers"));
    }
    if let Some(&bad) = centers.iter().find(|&&c| c >= points.len()) {
        return Err(Error::InvalidParameter(format!("center index {bad} out of range")));
    }
    let worst = points
        .rows()
        .map(|p| {
            centers
                .iter()
                .map(|&c| sq_euclidean(p, points.row(c)))
                .fold(f32::INFINITY, f32::min)
        })
        .fold(0f32, f32::max);
    Ok((worst as f64).sqrt())
}

fn random_projection(points: &VectorSet, out_dim: usize, seed: u64) -> VectorSet {
    let d = points.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0 / (out_dim as f32).sqrt()).expect("valid std-dev");
    let matrix: Vec<f32> = (0..out_dim * d).map(|_| normal.sample(&mut rng)).collect();
    let data: Vec<f32> = points
        .rows()
        .flat_map(|p| {
            matrix
                .chunks_exact(d)
                .map(move |m| m.iter().zip(p).map(|(a, b)| a * b).sum::<f32>())
        })
        .collect();
    VectorSet::new(out_dim, data).expect("projection of finite points is finite")
}

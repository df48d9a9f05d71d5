//! Nearest-neighbor anomaly scoring, bank routing and heatmaps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{FeatureGrid, ImageGeometry};
use crate::memory::{MemoryBank, MemoryBankSet};
use crate::nn;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringParams {
    /// Neighbourhood size of the softmax reweighting; 0 keeps the plain max.
    pub reweight_neighbors: usize,
    /// Gaussian std-dev in pixels for heatmap smoothing; 0 disables it.
    pub smoothing_sigma: f64,
}

impl Default for ScoringParams {
    fn default() -> Self {
        Self { reweight_neighbors: 0, smoothing_sigma: 4.0 }
    }
}

impl ScoringParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.smoothing_sigma >= 0.0 && self.smoothing_sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "smoothing sigma must be finite and >= 0, got {}",
                self.smoothing_sigma
            )));
        }
        Ok(())
    }
}

/// Per-patch distances to the nearest bank vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchScores {
    pub grid_h: usize,
    pub grid_w: usize,
    pub scores: Vec<f32>,
    /// Index of the nearest bank vector for each patch.
    pub nearest: Vec<usize>,
}

impl PatchScores {
    /// `(patch index, score)` of the highest score, lowest index on ties.
    pub fn max(&self) -> (usize, f32) {
        let mut best = (0, self.scores[0]);
        for (i, &s) in self.scores.iter().enumerate().skip(1) {
            if s > best.1 {
                best = (i, s);
            }
        }
        best
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub img_h: usize,
    pub img_w: usize,
    pub values: Vec<f32>,
}

impl Heatmap {
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.img_w + x]
    }

    /// Min-max normalization to 0..=255 for visualization. A flat map becomes all zeros.
    pub fn to_u8(&self) -> Vec<u8> {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        self.values
            .iter()
            .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyResult {
    pub image_score: f64,
    /// Task index of the bank that produced the lowest image score.
    pub routed_task: usize,
    /// Position of that bank in the set.
    pub routed_bank: usize,
    /// Image score against every bank, in set order.
    pub bank_scores: Vec<f64>,
    pub patch_scores: Vec<f32>,
    pub grid_h: usize,
    pub grid_w: usize,
    #[serde(skip)]
    pub heatmap: Heatmap,
}

pub fn patch_scores(grid: &FeatureGrid, bank: &MemoryBank) -> Result<PatchScores> {
    if bank.is_empty() {
        return Err(Error::Empty("memory bank"));
    }
    if grid.dim() != bank.dim() {
        return Err(Error::DimMismatch { expected: bank.dim(), found: grid.dim() });
    }
    let (scores, nearest) = grid
        .patches
        .rows()
        .map(|p| {
            let (idx, sq) = nn::nearest(p, &bank.vectors).expect("bank is non-empty");
            (sq.sqrt(), idx)
        })
        .unzip();
    Ok(PatchScores { grid_h: grid.grid_h, grid_w: grid.grid_w, scores, nearest })
}

/// Image-level score: the largest patch score, optionally multiplied by the
/// softmax weight `1 - exp(d(q, m*)) / sum_{m in N_b(m*)} exp(d(q, m))` where
/// `q` is the max-scoring patch, `m*` its nearest bank vector and `N_b(m*)`
/// the `b` bank vectors nearest to `m*`.
pub fn image_score(scores: &PatchScores, grid: &FeatureGrid, bank: &MemoryBank, params: &ScoringParams) -> f64 {
    let (patch, max) = scores.max();
    let max = max as f64;
    if params.reweight_neighbors == 0 {
        return max;
    }
    let query = grid.patches.row(patch);
    let anchor = bank.vectors.row(scores.nearest[patch]);
    let support = nn::k_nearest(anchor, &bank.vectors, params.reweight_neighbors);
    let dists: Vec<f64> = support
        .iter()
        .map(|&(i, _)| (nn::sq_euclidean(query, bank.vectors.row(i)) as f64).sqrt())
        .collect();
    let top = dists.iter().copied().fold(max, f64::max);
    let denom: f64 = dists.iter().map(|d| (d - top).exp()).sum();
    let weight = 1.0 - (max - top).exp() / denom;
    weight.max(0.0) * max
}

/// Plain max of the patch scores.
pub fn max_patch_score(scores: &PatchScores) -> f64 {
    scores.max().1 as f64
}

/// Scores `grid` against one bank: patch scores plus image score.
pub fn score_against_bank(grid: &FeatureGrid, bank: &MemoryBank, params: &ScoringParams) -> Result<(PatchScores, f64)> {
    let ps = patch_scores(grid, bank)?;
    let s = image_score(&ps, grid, bank, params);
    Ok((ps, s))
}

/// Scores `grid` against every bank; the bank with the lowest image score
/// (lowest position on ties) supplies the final score and the heatmap.
pub fn route_and_score(
    grid: &FeatureGrid,
    set: &MemoryBankSet,
    geometry: ImageGeometry,
    params: &ScoringParams,
) -> Result<AnomalyResult> {
    if set.is_empty() {
        return Err(Error::Empty("memory bank set"));
    }
    let mut best: Option<(usize, PatchScores, f64)> = None;
    let mut bank_scores = Vec::with_capacity(set.len());
    for (pos, bank) in set.banks().iter().enumerate() {
        let (ps, s) = score_against_bank(grid, bank, params)?;
        bank_scores.push(s);
        if best.as_ref().is_none_or(|(_, _, bs)| s < *bs) {
            best = Some((pos, ps, s));
        }
    }
    let (pos, ps, s) = best.expect("set is non-empty");
    Ok(build_result(ps, s, set.banks()[pos].task_index, pos, bank_scores, geometry, params))
}

/// Scores `grid` against a single, caller-chosen bank.
pub fn score_with_bank(
    grid: &FeatureGrid,
    bank: &MemoryBank,
    geometry: ImageGeometry,
    params: &ScoringParams,
) -> Result<AnomalyResult> {
    let (ps, s) = score_against_bank(grid, bank, params)?;
    Ok(build_result(ps, s, bank.task_index, 0, vec![s], geometry, params))
}

fn build_result(
    ps: PatchScores,
    image_score: f64,
    routed_task: usize,
    routed_bank: usize,
    bank_scores: Vec<f64>,
    geometry: ImageGeometry,
    params: &ScoringParams,
) -> AnomalyResult {
    let heatmap = heatmap(&ps, geometry, params);
    AnomalyResult {
        image_score,
        routed_task,
        routed_bank,
        bank_scores,
        grid_h: ps.grid_h,
        grid_w: ps.grid_w,
        patch_scores: ps.scores,
        heatmap,
    }
}

/// Bilinear upsampling (pixel-center aligned, edge clamped) of the patch
/// scores to image resolution followed by a normalized Gaussian blur with
/// mirror boundaries, truncated at 4 sigma.
pub fn heatmap(scores: &PatchScores, geometry: ImageGeometry, params: &ScoringParams) -> Heatmap {
    let up = bilinear_upsample(&scores.scores, scores.grid_h, scores.grid_w, geometry.img_h, geometry.img_w);
    let values = if params.smoothing_sigma > 0.0 {
        gaussian_blur(&up, geometry.img_h, geometry.img_w, params.smoothing_sigma)
    } else {
        up
    };
    Heatmap {
        img_h: geometry.img_h,
        img_w: geometry.img_w,
        values: values.into_iter().map(|v| v.max(0.0) as f32).collect(),
    }
}

fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

pub(crate) fn bilinear_upsample(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let cols: Vec<_> = (0..out_w).map(|x| source_coord(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = source_coord(y, h, out_h);
        for &(x0, x1, fx) in &cols {
            let v00 = src[y0 * w + x0] as f64;
            let v01 = src[y0 * w + x1] as f64;
            let v10 = src[y1 * w + x0] as f64;
            let v11 = src[y1 * w + x1] as f64;
            let top = v00 + (v01 - v00) * fx;
            let bottom = v10 + (v11 - v10) * fx;
            out.push(top + (bottom - top) * fy);
        }
    }
    out
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma + 0.5) as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

pub(crate) fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0f64; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * row[reflect(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[reflect(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature::{Label, VectorSet};

    fn bank(task_index: usize, coords: &[f32], dim: usize) -> MemoryBank {
        MemoryBank { task_index, name: format!("t{task_index}"), vectors: VectorSet::new(dim, coords.to_vec()).unwrap() }
    }

    fn grid(coords: &[f32], dim: usize, h: usize, w: usize) -> FeatureGrid {
        FeatureGrid::new(1, h, w, Label::Normal, VectorSet::new(dim, coords.to_vec()).unwrap()).unwrap()
    }

    fn scores_grid(values: Vec<f32>, h: usize, w: usize) -> PatchScores {
        PatchScores { grid_h: h, grid_w: w, nearest: vec![0; values.len()], scores: values }
    }

    #[test]
    fn three_four_five() {
        let ps = patch_scores(&grid(&[3.0, 4.0], 2, 1, 1), &bank(0, &[0.0, 0.0], 2)).unwrap();
        assert_eq!(ps.scores, vec![5.0]);
    }

    #[test]
    fn patches_in_bank_score_zero() {
        let coords = [1.0, 2.0, -3.0, 0.5, 7.0, 7.0, 0.0, 0.0];
        let g = grid(&coords, 2, 2, 2);
        let b = bank(0, &coords, 2);
        let (ps, s) = score_against_bank(&g, &b, &ScoringParams::default()).unwrap();
        assert!(ps.scores.iter().all(|&v| v == 0.0));
        assert_eq!(s, 0.0);
    }

    #[test]
    fn patch_score_errors() {
        let g = grid(&[1.0, 2.0], 2, 1, 1);
        assert!(matches!(patch_scores(&g, &bank(0, &[], 2)), Err(Error::Empty(_))));
        assert!(matches!(patch_scores(&g, &bank(0, &[1.0, 2.0, 3.0], 3)), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn image_score_is_max_without_reweighting() {
        let g = grid(&[0.0, 0.0, 0.0], 1, 1, 3);
        let ps = scores_grid(vec![0.1, 0.9, 0.3], 1, 3);
        assert_eq!(image_score(&ps, &g, &bank(0, &[0.0], 1), &ScoringParams::default()), 0.9f32 as f64);
        let zeros = scores_grid(vec![0.0; 3], 1, 3);
        assert_eq!(max_patch_score(&zeros), 0.0);
    }

    #[test]
    fn reweighting_matches_hand_formula() {
        let b = bank(0, &[0.0, 0.0, 1.0, 0.0, 3.0, 0.0], 2);
        let g = grid(&[0.0, 2.0], 2, 1, 1);
        let params = ScoringParams { reweight_neighbors: 2, smoothing_sigma: 0.0 };
        let (_, s) = score_against_bank(&g, &b, &params).unwrap();
        // nearest is (0,0) at distance 2; its 2-neighbourhood is {(0,0), (1,0)}
        let d1 = 5f64.sqrt();
        let expected = (1.0 - 2f64.exp() / (2f64.exp() + d1.exp())) * 2.0;
        assert!((s - expected).abs() < 1e-6, "{s} vs {expected}");

        let params3 = ScoringParams { reweight_neighbors: 3, ..params };
        let (_, s3) = score_against_bank(&g, &b, &params3).unwrap();
        let d2 = 13f64.sqrt();
        let expected3 = (1.0 - 2f64.exp() / (2f64.exp() + d1.exp() + d2.exp())) * 2.0;
        assert!((s3 - expected3).abs() < 1e-6);
    }

    #[test]
    fn routing_picks_nearest_cluster_and_breaks_ties_low() {
        let a = bank(0, &[0.0, 0.0, 0.5, 0.0], 2);
        let b = bank(1, &[100.0, 0.0, 100.5, 0.0], 2);
        let set = MemoryBankSet::from_banks(10, 2, vec![a, b]).unwrap();
        let geo = ImageGeometry::new(4, 4).unwrap();
        let q = grid(&[100.1, 0.0, 100.4, 0.1], 2, 1, 2);
        let r = route_and_score(&q, &set, geo, &ScoringParams::default()).unwrap();
        assert_eq!(r.routed_task, 1);
        assert!(r.image_score < 0.2);
        assert!(r.bank_scores[0] > 99.0);

        let tie = grid(&[50.25, 0.0], 2, 1, 1);
        let r = route_and_score(&tie, &set, geo, &ScoringParams::default()).unwrap();
        assert_eq!(r.bank_scores[0], r.bank_scores[1]);
        assert_eq!(r.routed_task, 0);
    }

    #[test]
    fn single_bank_routing_matches_direct_composition() {
        let b = bank(0, &[0.0, 1.0, 2.0, 3.0], 1);
        let set = MemoryBankSet::from_banks(4, 1, vec![b.clone()]).unwrap();
        let g = grid(&[0.5, 9.0, -2.0, 2.2], 1, 2, 2);
        let geo = ImageGeometry::new(8, 8).unwrap();
        let params = ScoringParams::default();
        let r = route_and_score(&g, &set, geo, &params).unwrap();
        let (ps, s) = score_against_bank(&g, &b, &params).unwrap();
        assert_eq!(r.routed_task, 0);
        assert_eq!(r.image_score, s);
        assert_eq!(r.patch_scores, ps.scores);
        assert_eq!(r.heatmap, heatmap(&ps, geo, &params));
        let empty = MemoryBankSet::new(4, 1).unwrap();
        assert!(route_and_score(&g, &empty, geo, &params).is_err());
    }

    #[test]
    fn constant_scores_give_constant_heatmap() {
        let ps = scores_grid(vec![2.5; 12], 3, 4);
        for sigma in [0.0, 1.0, 4.0, 30.0] {
            let hm = heatmap(&ps, ImageGeometry::new(17, 23).unwrap(), &ScoringParams { reweight_neighbors: 0, smoothing_sigma: sigma });
            assert!(hm.values.iter().all(|&v| (v - 2.5).abs() < 1e-6));
        }
    }

    #[test]
    fn zero_sigma_is_plain_bilinear() {
        let ps = scores_grid(vec![0.0, 1.0, 2.0, 3.0], 2, 2);
        let geo = ImageGeometry::new(4, 4).unwrap();
        let hm = heatmap(&ps, geo, &ScoringParams { reweight_neighbors: 0, smoothing_sigma: 0.0 });
        // pixel centers map to source -0.25, 0.25, 0.75, 1.25 -> clamped weights 0, .25, .75, 1
        let axis = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                let expected = axis[x] * 1.0 + axis[y] * 2.0;
                assert!((hm.at(y, x) as f64 - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn kernel_sums_to_one() {
        for sigma in [0.5, 1.0, 4.0, 7.3] {
            let k = gaussian_kernel(sigma);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(k.len() % 2, 1);
        }
    }

    #[test]
    fn blur_preserves_mean_with_zero_border() {
        // a bump well inside a zero frame wider than the kernel radius
        let (h, w) = (60, 60);
        let mut img = vec![0f64; h * w];
        for y in 25..35 {
            for x in 22..31 {
                img[y * w + x] = (y * x) as f64 * 0.01;
            }
        }
        let out = gaussian_blur(&img, h, w, 2.0);
        let (a, b): (f64, f64) = (img.iter().sum(), out.iter().sum());
        assert!((a - b).abs() < 1e-9 * a.max(1.0));
    }

    #[test]
    fn hot_patch_argmax_in_footprint() {
        let (gh, gw) = (7, 5);
        let geo = ImageGeometry::new(56, 45).unwrap();
        for hot in [0, 8, 17, 34] {
            let mut v = vec![0.1f32; gh * gw];
            v[hot] = 5.0;
            let hm = heatmap(&scores_grid(v, gh, gw), geo, &ScoringParams::default());
            let (idx, _) = hm
                .values
                .iter()
                .enumerate()
                .fold((0, f32::MIN), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
            let (py, px) = (idx / geo.img_w, idx % geo.img_w);
            let (r, c) = (hot / gw, hot % gw);
            let (y0, y1) = (r * geo.img_h / gh, (r + 1) * geo.img_h / gh);
            let (x0, x1) = (c * geo.img_w / gw, (c + 1) * geo.img_w / gw);
            assert!((y0..y1).contains(&py) && (x0..x1).contains(&px), "hot {hot}: argmax at ({py},{px})");
        }
    }

    #[test]
    fn u8_normalization() {
        let hm = Heatmap { img_h: 1, img_w: 3, values: vec![1.0, 2.0, 3.0] };
        assert_eq!(hm.to_u8(), vec![0, 128, 255]);
        let flat = Heatmap { img_h: 1, img_w: 2, values: vec![4.0, 4.0] };
        assert_eq!(flat.to_u8(), vec![0, 0]);
    }
}

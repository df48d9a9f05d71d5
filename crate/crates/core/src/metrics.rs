//! Detection metrics (AUROC, best F1, average precision, AUPRO) and
//! continual-learning metrics (average forgetting, relative gap, memory).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::MemoryBankSet;

/// Parameter count of torchvision's `wide_resnet50_2`.
pub const WIDE_RESNET50_PARAMS: u64 = 68_883_240;

/// Default FPR integration limit for AUPRO.
pub const DEFAULT_FPR_LIMIT: f64 = 0.3;

const BYTES_PER_F32: f64 = 4.0;
const BYTES_PER_MB: f64 = 1e6;

fn check_inputs(scores: &[f64], labels: &[bool], metric: &'static str) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{metric}: {} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("metric scores"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score, stable on ties.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Walks tie groups from the highest score down, yielding
/// `(group score, next lower distinct score, cumulative tp, cumulative fp)`.
fn tie_groups<'a>(
    scores: &'a [f64],
    labels: &'a [bool],
    order: &'a [usize],
) -> impl Iterator<Item = (f64, Option<f64>, usize, usize)> + 'a {
    let (mut i, mut tp, mut fp) = (0usize, 0usize, 0usize);
    std::iter::from_fn(move || {
        if i >= order.len() {
            return None;
        }
        let value = scores[order[i]];
        while i < order.len() && scores[order[i]] == value {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let next = order.get(i).map(|&j| scores[j]);
        Some((value, next, tp, fp))
    })
}

/// Probability that a random positive outscores a random negative, ties ½.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels, "auroc")?;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass("auroc"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Mann-Whitney: rank sum of positives with midranks for ties.
    let mut rank_sum = 0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        let positives = order[i..j].iter().filter(|&&k| labels[k]).count();
        rank_sum += midrank * positives as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Best F1 over cut points at the midpoints between consecutive distinct
/// scores and ±∞, counting `score >= threshold` as positive. Returns
/// `(f1, threshold)`; among equal F1 values the highest threshold wins.
pub fn best_f1(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    let (pos, neg) = check_inputs(scores, labels, "best_f1")?;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass("best_f1"));
    }
    let order = descending(scores);
    let mut best = (0.0, f64::INFINITY);
    for (value, next, tp, fp) in tie_groups(scores, labels, &order) {
        let f1 = 2.0 * tp as f64 / (2 * tp + fp + (pos - tp)) as f64;
        if f1 > best.0 {
            let threshold = next.map_or(f64::NEG_INFINITY, |n| value / 2.0 + n / 2.0);
            best = (f1, threshold);
        }
    }
    Ok(best)
}

/// `Σ (R_i − R_{i−1}) · P_i` over descending distinct-score thresholds.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels, "average_precision")?;
    if pos == 0 {
        return Err(Error::SingleClass("average_precision"));
    }
    let order = descending(scores);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (_, _, tp, fp) in tie_groups(scores, labels, &order) {
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Pixel scores and ground truth of one image, row-major.
#[derive(Debug, Clone, Copy)]
pub struct ScoreMap<'a> {
    pub height: usize,
    pub width: usize,
    pub scores: &'a [f32],
    pub mask: &'a [u8],
}

/// Labels 4-connected foreground components. Returns per-pixel component
/// ids (`usize::MAX` for background) and the component sizes.
pub fn connected_components(mask: &[u8], height: usize, width: usize) -> (Vec<usize>, Vec<usize>) {
    let mut ids = vec![usize::MAX; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || ids[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        ids[start] = id;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (y, x) = (p / width, p % width);
            let mut visit = |q: usize| {
                if mask[q] != 0 && ids[q] == usize::MAX {
                    ids[q] = id;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
        }
        sizes.push(size);
    }
    (ids, sizes)
}

/// Area under the per-region-overlap curve against the global false
/// positive rate, integrated over `[0, fpr_limit]` and divided by `fpr_limit`.
pub fn aupro(maps: &[ScoreMap<'_>], fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::InvalidParameter(format!("fpr limit {fpr_limit} not in (0, 1]")));
    }
    // (score, component id or None for normal pixels)
    let mut pixels: Vec<(f32, Option<usize>)> = Vec::new();
    let mut region_sizes: Vec<usize> = Vec::new();
    for m in maps {
        let n = m.height * m.width;
        if m.scores.len() != n || m.mask.len() != n {
            return Err(Error::Shape(format!("score map of {}x{} has wrong length", m.height, m.width)));
        }
        if m.scores.iter().any(|s| s.is_nan()) {
            return Err(Error::NonFinite("pixel scores"));
        }
        let (ids, sizes) = connected_components(m.mask, m.height, m.width);
        let offset = region_sizes.len();
        region_sizes.extend(sizes);
        pixels.extend(
            m.scores
                .iter()
                .zip(ids)
                .map(|(&s, id)| (s, (id != usize::MAX).then(|| id + offset))),
        );
    }
    if region_sizes.is_empty() {
        return Err(Error::SingleClass("aupro"));
    }
    let normals = pixels.iter().filter(|p| p.1.is_none()).count();
    if normals == 0 {
        return Err(Error::SingleClass("aupro"));
    }

    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let regions = region_sizes.len() as f64;
    let mut curve = vec![(0.0, 0.0)];
    let (mut fp, mut pro) = (0usize, 0.0f64);
    let mut i = 0;
    while i < pixels.len() {
        let value = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == value {
            match pixels[i].1 {
                Some(c) => pro += 1.0 / (region_sizes[c] as f64 * regions),
                None => fp += 1,
            }
            i += 1;
        }
        curve.push((fp as f64 / normals as f64, pro));
    }
    Ok(integrate_to_limit(&curve, fpr_limit) / fpr_limit)
}

/// Trapezoidal area under a piecewise-linear curve of `(x, y)` points with
/// non-decreasing `x`, from the first point up to `limit`.
pub fn integrate_to_limit(curve: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_lim = y0 + (limit - x0) / (x1 - x0) * (y1 - y0);
            area += (limit - x0) * (y0 + y_lim) / 2.0;
            break;
        }
    }
    area
}

/// Lower-triangular performance matrix: entry `(k, t)` is the metric on task
/// `t` after training through task `k`, defined for `t <= k` (0-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RMatrix {
    pub metric: String,
    pub values: Vec<Vec<Option<f64>>>,
}

impl RMatrix {
    pub fn new(metric: impl Into<String>, tasks: usize) -> Self {
        Self { metric: metric.into(), values: (0..tasks).map(|k| vec![None; k + 1]).collect() }
    }

    pub fn tasks(&self) -> usize {
        self.values.len()
    }

    /// Panics if `t > k` or out of range.
    pub fn set(&mut self, k: usize, t: usize, value: f64) {
        assert!(t <= k, "R[{k}][{t}] is above the diagonal");
        self.values[k][t] = Some(value);
    }

    pub fn get(&self, k: usize, t: usize) -> Option<f64> {
        self.values.get(k).and_then(|row| row.get(t).copied().flatten())
    }

    pub fn require(&self, k: usize, t: usize) -> Result<f64> {
        self.get(k, t).ok_or(Error::MissingEntry { row: k, col: t })
    }

    /// Mean of row `k` over the tasks seen so far.
    pub fn row_mean(&self, k: usize) -> Result<f64> {
        let sum = (0..=k).map(|t| self.require(k, t)).sum::<Result<f64>>()?;
        Ok(sum / (k + 1) as f64)
    }

    /// Square sub-matrix over the given task indices (rows and columns).
    pub fn restrict(&self, tasks: &[usize]) -> RMatrix {
        let mut out = RMatrix::new(self.metric.clone(), tasks.len());
        for (k_new, &k) in tasks.iter().enumerate() {
            for (t_new, &t) in tasks.iter().enumerate().take(k_new + 1) {
                if let Some(v) = self.get(k, t) {
                    out.set(k_new, t_new, v);
                }
            }
        }
        out
    }
}

/// Average forgetting in percent:
/// `100/(T−1) · Σ_{t<T} (max_{k≤t} R[k][t] − R[T][t])` over the defined entries.
pub fn average_forgetting(r: &RMatrix) -> Result<f64> {
    let tasks = r.tasks();
    if tasks < 2 {
        return Err(Error::InvalidParameter(format!("forgetting needs at least 2 tasks, got {tasks}")));
    }
    for k in 0..tasks {
        for t in 0..=k {
            r.require(k, t)?;
        }
    }
    let last = tasks - 1;
    let mut total = 0.0;
    for t in 0..last {
        let best = (0..=t).filter_map(|k| r.get(k, t)).fold(f64::NEG_INFINITY, f64::max);
        total += best - r.require(last, t)?;
    }
    Ok(100.0 * total / last as f64)
}

/// `F1_joint − F1_cl`.
pub fn relative_gap(f1_joint: f64, f1_cl: f64) -> f64 {
    f1_joint - f1_cl
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub architecture_mb: f64,
    pub additional_mb: f64,
    pub total_vectors: u64,
    pub dim: u64,
    pub backbone_params: u64,
}

/// Megabytes (10^6 bytes) of f32 storage for the vectors and the backbone.
pub fn memory_report(total_vectors: u64, dim: u64, backbone_params: u64) -> MemoryReport {
    MemoryReport {
        architecture_mb: backbone_params as f64 * BYTES_PER_F32 / BYTES_PER_MB,
        additional_mb: total_vectors as f64 * dim as f64 * BYTES_PER_F32 / BYTES_PER_MB,
        total_vectors,
        dim,
        backbone_params,
    }
}

pub fn memory_report_for(set: &MemoryBankSet, backbone_params: u64) -> MemoryReport {
    memory_report(set.total_vectors() as u64, set.dim() as u64, backbone_params)
}

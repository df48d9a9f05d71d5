//! Brute-force reference implementations shared by the integration tests.
//!
//! Everything here is deliberately naive: f64 throughout, no sorting tricks,
//! direct enumeration wherever the input is small enough.

#![allow(dead_code)]

use patchcore_cl::feature::VectorSet;

pub fn euclid(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

/// Largest distance from any point to its closest center.
pub fn radius(points: &VectorSet, centers: &[usize]) -> f64 {
    points
        .rows()
        .map(|p| centers.iter().map(|&c| euclid(p, points.row(c))).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

fn combinations(n: usize, k: usize, start: usize, current: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
    if current.len() == k {
        visit(current);
        return;
    }
    for i in start..n {
        current.push(i);
        combinations(n, k, i + 1, current, visit);
        current.pop();
    }
}

/// Optimal k-center radius by trying every k-subset.
pub fn optimal_radius(points: &VectorSet, k: usize) -> f64 {
    let n = points.len();
    let k = k.min(n);
    let mut best = f64::INFINITY;
    combinations(n, k, 0, &mut Vec::new(), &mut |c| best = best.min(radius(points, c)));
    best
}

/// Textbook farthest-first traversal in f64, lowest index on ties.
pub fn reference_farthest_first(points: &VectorSet, k: usize, start: usize) -> Vec<usize> {
    let n = points.len();
    let mut chosen = vec![start];
    while chosen.len() < k.min(n) {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen.iter().map(|&c| euclid(points.row(i), points.row(c))).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        chosen.push(best.expect("n > chosen").0);
    }
    chosen
}

/// Nearest bank row by scanning, lowest index on ties.
pub fn brute_nearest(query: &[f32], bank: &VectorSet) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, row) in bank.rows().enumerate() {
        let d = euclid(query, row);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Fraction of (positive, negative) pairs ordered correctly, ties ½.
pub fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn distinct_desc(scores: &[f64]) -> Vec<f64> {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v.dedup();
    v
}

fn counts_at(scores: &[f64], labels: &[bool], threshold: f64) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            _ => {}
        }
    }
    (tp, fp, fneg)
}

/// Best F1 over every threshold "score >= observed value", plus predicting nothing.
pub fn sweep_best_f1(scores: &[f64], labels: &[bool]) -> f64 {
    let mut best: f64 = 0.0;
    for t in distinct_desc(scores) {
        let (tp, fp, fneg) = counts_at(scores, labels, t);
        if tp > 0.0 {
            best = best.max(2.0 * tp / (2.0 * tp + fp + fneg));
        }
    }
    best
}

/// Step-wise average precision, one step per distinct threshold.
pub fn sweep_average_precision(scores: &[f64], labels: &[bool]) -> f64 {
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in distinct_desc(scores) {
        let (tp, fp, _) = counts_at(scores, labels, t);
        let recall = tp / positives;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    ap
}

/// 4-connected component label for every foreground pixel via union-find.
pub fn union_find_components(mask: &[u8], h: usize, w: usize) -> Vec<Option<usize>> {
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut parent: Vec<usize> = (0..mask.len()).collect();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if mask[p] == 0 {
                continue;
            }
            for q in [(x + 1 < w).then(|| p + 1), (y + 1 < h).then(|| p + w)].into_iter().flatten() {
                if mask[q] != 0 {
                    let (a, b) = (find(&mut parent, p), find(&mut parent, q));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut roots: Vec<usize> = Vec::new();
    (0..mask.len())
        .map(|p| {
            (mask[p] != 0).then(|| {
                let r = find(&mut parent, p);
                match roots.iter().position(|&x| x == r) {
                    Some(i) => i,
                    None => {
                        roots.push(r);
                        roots.len() - 1
                    }
                }
            })
        })
        .collect()
}

/// Dense AUPRO: evaluates FPR and mean region overlap at every distinct
/// pixel score, then integrates the resulting curve up to `limit`.
pub fn dense_aupro(maps: &[(usize, usize, Vec<f32>, Vec<u8>)], limit: f64) -> f64 {
    // (score, Some((image, region)) or None)
    let mut pixels: Vec<(f64, Option<(usize, usize)>)> = Vec::new();
    let mut regions: Vec<(usize, usize)> = Vec::new();
    for (img, (h, w, scores, mask)) in maps.iter().enumerate() {
        let labels = union_find_components(mask, *h, *w);
        for (s, l) in scores.iter().zip(labels) {
            if let Some(r) = l {
                if !regions.contains(&(img, r)) {
                    regions.push((img, r));
                }
            }
            pixels.push((*s as f64, l.map(|r| (img, r))));
        }
    }
    let normals = pixels.iter().filter(|p| p.1.is_none()).count() as f64;
    let mut thresholds: Vec<f64> = pixels.iter().map(|p| p.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();

    let mut curve = vec![(0.0, 0.0)];
    for t in thresholds {
        let fpr = pixels.iter().filter(|p| p.1.is_none() && p.0 >= t).count() as f64 / normals;
        let pro = regions
            .iter()
            .map(|&reg| {
                let total = pixels.iter().filter(|p| p.1 == Some(reg)).count() as f64;
                let hit = pixels.iter().filter(|p| p.1 == Some(reg) && p.0 >= t).count() as f64;
                hit / total
            })
            .sum::<f64>()
            / regions.len() as f64;
        curve.push((fpr, pro));
    }

    // Clip the curve at `limit`, interpolating the crossing segment.
    let mut clipped = vec![curve[0]];
    for pair in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x1 <= limit {
            clipped.push((x1, y1));
        } else {
            if x0 < limit {
                clipped.push((limit, y0 + (y1 - y0) * (limit - x0) / (x1 - x0)));
            }
            break;
        }
    }
    let area: f64 = clipped.windows(2).map(|s| 0.5 * (s[1].0 - s[0].0) * (s[0].1 + s[1].1)).sum();
    area / limit
}

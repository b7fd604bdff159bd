//! Evaluation: region overlap J, boundary F-measure, PCK for keypoints,
//! the identity baseline, the tracking-vs-colorization odds ratio, and PCA
//! embedding visualization.

use crate::embednet::EmbeddingGrid;
use crate::error::{Error, Result};
use crate::io::{GrayImage, RgbImage};
use crate::numcore::Scalar;
use crate::tracker::{Decoded, KeypointPred, TrackResult, TrackTask};
use serde::Serialize;

/// Intersection-over-union of one category's binary masks. Both masks
/// empty counts as 1.
pub fn region_j(pred: &GrayImage, gt: &GrayImage, category: u8) -> Result<f64> {
    if pred.w != gt.w || pred.h != gt.h {
        return Err(Error::Dim(format!(
            "mask shapes disagree: {}x{} vs {}x{}",
            pred.w, pred.h, gt.w, gt.h
        )));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let (p, g) = (p == category, g == category);
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Boundary pixels of a category: mask pixels with a 4-neighbor outside
/// the category (outside the image counts as background).
fn boundary_pixels(mask: &GrayImage, category: u8) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..mask.h {
        for x in 0..mask.w {
            if mask.get(x, y) != category {
                continue;
            }
            let mut edge = false;
            if x == 0 || mask.get(x - 1, y) != category {
                edge = true;
            }
            if !edge && (x + 1 >= mask.w || mask.get(x + 1, y) != category) {
                edge = true;
            }
            if !edge && (y == 0 || mask.get(x, y - 1) != category) {
                edge = true;
            }
            if !edge && (y + 1 >= mask.h || mask.get(x, y + 1) != category) {
                edge = true;
            }
            if edge {
                out.push((x, y));
            }
        }
    }
    out
}

/// Boolean map of pixels within `radius` (euclidean) of any listed pixel.
fn dilate(points: &[(usize, usize)], w: usize, h: usize, radius: f64) -> Vec<bool> {
    let mut map = vec![false; w * h];
    let r = radius.max(0.0);
    let ri = r.floor() as isize;
    let r2 = r * r;
    for &(x, y) in points {
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                if (dx * dx + dy * dy) as f64 > r2 {
                    continue;
                }
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                    map[ny as usize * w + nx as usize] = true;
                }
            }
        }
    }
    map
}

/// Boundary F-measure with dilation-based matching at `tolerance_radius`.
/// Both boundaries empty: 1; exactly one empty: 0.
pub fn boundary_f(
    pred: &GrayImage,
    gt: &GrayImage,
    category: u8,
    tolerance_radius: f64,
) -> Result<f64> {
    if pred.w != gt.w || pred.h != gt.h {
        return Err(Error::Dim(format!(
            "mask shapes disagree: {}x{} vs {}x{}",
            pred.w, pred.h, gt.w, gt.h
        )));
    }
    if tolerance_radius < 0.0 {
        return Err(Error::Validation("tolerance radius must be >= 0".into()));
    }
    let pb = boundary_pixels(pred, category);
    let gb = boundary_pixels(gt, category);
    match (pb.is_empty(), gb.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let gt_dilated = dilate(&gb, pred.w, pred.h, tolerance_radius);
    let pred_dilated = dilate(&pb, pred.w, pred.h, tolerance_radius);
    let matched_p = pb.iter().filter(|&&(x, y)| gt_dilated[y * pred.w + x]).count();
    let matched_g = gb.iter().filter(|&&(x, y)| pred_dilated[y * pred.w + x]).count();
    let precision = matched_p as f64 / pb.len() as f64;
    let recall = matched_g as f64 / gb.len() as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// DAVIS-style default tolerance: ceil(0.0075 * image diagonal).
pub fn default_boundary_radius(w: usize, h: usize) -> f64 {
    (0.0075 * ((w * w + h * h) as f64).sqrt()).ceil()
}

/// Fraction of keypoints within `threshold * normalizer` of ground truth.
pub fn pck(
    pred: &[(f64, f64)],
    gt: &[(f64, f64)],
    normalizer: f64,
    threshold: f64,
) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Dim(format!(
            "keypoint counts disagree: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if !(normalizer > 0.0) {
        return Err(Error::Validation(format!(
            "normalizer must be > 0, got {normalizer}"
        )));
    }
    if pred.is_empty() {
        return Err(Error::Validation("no keypoints to score".into()));
    }
    let limit = threshold * normalizer;
    let ok = pred
        .iter()
        .zip(gt)
        .filter(|(&(px, py), &(gx, gy))| ((px - gx).powi(2) + (py - gy).powi(2)).sqrt() <= limit)
        .count();
    Ok(ok as f64 / pred.len() as f64)
}

/// Max side of the ground-truth keypoint bounding box (at least 1 pixel).
pub fn keypoint_bbox_normalizer(gt: &[(f64, f64)]) -> f64 {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in gt {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    (x1 - x0).max(y1 - y0).max(1.0)
}

/// The baseline that assumes a static video: every frame repeats the
/// first frame's labels.
pub fn identity_baseline(task: &TrackTask, num_frames: usize, grid_factor: usize) -> Result<TrackResult> {
    match task.kind {
        crate::tracker::TaskKind::Segment => {
            let mask = task
                .initial_mask
                .as_ref()
                .ok_or_else(|| Error::Validation("segment task needs a mask".into()))?;
            let grid = crate::tracker::encode_segments(mask, task.categories, grid_factor)?;
            let confidence: Vec<f32> = grid.confidence();
            Ok(TrackResult {
                soft: vec![grid; num_frames],
                decoded: Decoded::Masks(vec![mask.clone(); num_frames]),
                confidence: vec![confidence; num_frames],
            })
        }
        crate::tracker::TaskKind::Keypoint => {
            let full = task
                .initial_points
                .iter()
                .map(|&(x, y)| KeypointPred {
                    x,
                    y,
                    confidence: 1.0,
                })
                .collect::<Vec<_>>();
            let grid = crate::tracker::encode_keypoints(
                &task.initial_points,
                // The grid extent comes from the mask-free task; frames are
                // square at inference so infer from points' container later.
                grid_factor * 8,
                grid_factor * 8,
                grid_factor,
            );
            // Fall back to a minimal soft grid when points exceed the
            // assumed extent; identity predictions never read it.
            let soft = match grid {
                Ok(g) => vec![g; num_frames],
                Err(_) => Vec::new(),
            };
            Ok(TrackResult {
                soft,
                decoded: Decoded::Keypoints(vec![full.clone(); num_frames]),
                confidence: Vec::new(),
            })
        }
        crate::tracker::TaskKind::Color => {
            Err(Error::Validation("identity baseline covers segment/keypoint tasks".into()))
        }
    }
}

/// 2x2 failure contingency counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ContingencyTable {
    /// Tracking failed and colorization failed.
    pub both: u64,
    /// Tracking failed only.
    pub track_only: u64,
    /// Colorization failed only.
    pub color_only: u64,
    /// Neither failed.
    pub neither: u64,
}

impl ContingencyTable {
    pub fn add(&mut self, track_failed: bool, color_failed: bool) {
        match (track_failed, color_failed) {
            (true, true) => self.both += 1,
            (true, false) => self.track_only += 1,
            (false, true) => self.color_only += 1,
            (false, false) => self.neither += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.both + self.track_only + self.color_only + self.neither
    }
}

/// (n11 * n00) / (n10 * n01); Haldane +0.5 correction on every cell when
/// any cell is zero.
pub fn odds_ratio(t: &ContingencyTable) -> f64 {
    let cells = [t.both, t.track_only, t.color_only, t.neither];
    if cells.iter().any(|&c| c == 0) {
        let c = |v: u64| v as f64 + 0.5;
        (c(t.both) * c(t.neither)) / (c(t.track_only) * c(t.color_only))
    } else {
        (t.both as f64 * t.neither as f64) / (t.track_only as f64 * t.color_only as f64)
    }
}

/// Per-frame failure events to contingency counts. `track_scores` and
/// `color_scores` are aligned per frame; a frame fails when its score
/// drops below the threshold.
pub fn failure_table(
    track_scores: &[f64],
    color_scores: &[f64],
    j_fail_threshold: f64,
    color_fail_threshold: f64,
) -> Result<ContingencyTable> {
    if track_scores.len() != color_scores.len() {
        return Err(Error::Dim(format!(
            "misaligned per-frame scores: {} vs {}",
            track_scores.len(),
            color_scores.len()
        )));
    }
    let mut t = ContingencyTable::default();
    for (&j, &c) in track_scores.iter().zip(color_scores) {
        t.add(j < j_fail_threshold, c < color_fail_threshold);
    }
    Ok(t)
}

/// Top-1 agreement between predicted and ground-truth category grids.
pub fn color_top1_accuracy(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Dim(format!(
            "category grids disagree: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(pred.iter().zip(gt).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

// ---- PCA embedding visualization -------------------------------------

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major).
/// Returns (eigenvalues, eigenvectors as columns), descending.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let (app, aqq) = (m[p * n + p], m[q * n + q]);
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let evals: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    order.sort_by(|&a, &b| evals[b].partial_cmp(&evals[a]).unwrap());
    let sorted_vals: Vec<f64> = order.iter().map(|&i| evals[i]).collect();
    let mut sorted_vecs = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for k in 0..n {
            sorted_vecs[k * n + col] = v[k * n + src];
        }
    }
    (sorted_vals, sorted_vecs)
}

/// Project embeddings onto their top-3 principal components and render one
/// RGB image per frame; components rescale to [0, 255] over the whole
/// clip, with the degenerate (constant) case mapping to mid-gray 128.
pub fn pca_embed_viz<T: Scalar>(embeds: &EmbeddingGrid<T>) -> Result<Vec<RgbImage>> {
    let (t_len, gh, gw, d) = (
        embeds.frames(),
        embeds.grid_h(),
        embeds.grid_w(),
        embeds.dim(),
    );
    if d < 3 {
        return Err(Error::Validation(format!(
            "PCA visualization needs D >= 3, got {d}"
        )));
    }
    let n = t_len * gh * gw;
    let mut rows: Vec<f64> = embeds.values.data().iter().map(|v| v.to_f64()).collect();
    // Center.
    let mut mean = vec![0.0f64; d];
    for r in rows.chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    for r in rows.chunks_exact_mut(d) {
        for (v, &m) in r.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    // Covariance (biased).
    let mut cov = vec![0.0f64; d * d];
    for r in rows.chunks_exact(d) {
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += r[i] * r[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[i * d + j] = cov[j * d + i];
        }
    }
    for v in cov.iter_mut() {
        *v /= n as f64;
    }
    let (_vals, vecs) = symmetric_eigen(&cov, d);
    // Top-3 components with the deterministic sign convention: the
    // largest-magnitude coordinate is positive.
    let mut comps = vec![0.0f64; 3 * d];
    for c in 0..3 {
        let mut col: Vec<f64> = (0..d).map(|k| vecs[k * d + c]).collect();
        let mut big = 0;
        for k in 1..d {
            if col[k].abs() > col[big].abs() {
                big = k;
            }
        }
        if col[big] < 0.0 {
            col.iter_mut().for_each(|v| *v = -*v);
        }
        comps[c * d..(c + 1) * d].copy_from_slice(&col);
    }
    // Scores and global ranges.
    let mut scores = vec![0.0f64; n * 3];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for (p, r) in rows.chunks_exact(d).enumerate() {
        for c in 0..3 {
            let s: f64 = r.iter().zip(&comps[c * d..(c + 1) * d]).map(|(a, b)| a * b).sum();
            scores[p * 3 + c] = s;
            lo[c] = lo[c].min(s);
            hi[c] = hi[c].max(s);
        }
    }
    let mut out = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut img = RgbImage::new(gw, gh);
        for p in 0..gh * gw {
            let mut px = [0u8; 3];
            for c in 0..3 {
                let (l, h) = (lo[c], hi[c]);
                px[c] = if h - l < 1e-12 {
                    128
                } else {
                    (((scores[(t * gh * gw + p) * 3 + c] - l) / (h - l)) * 255.0).round() as u8
                };
            }
            img.data[p * 3..p * 3 + 3].copy_from_slice(&px);
        }
        out.push(img);
    }
    Ok(out)
}

// ---- video-level aggregation ------------------------------------------

/// Segment-tracking scores for one video: per-object means over frames
/// (frame 0, the given ground truth, is excluded), then object means.
#[derive(Clone, Debug, Serialize)]
pub struct SegmentEval {
    pub per_object_j: Vec<f64>,
    pub per_object_f: Vec<f64>,
    pub mean_j: f64,
    pub mean_f: f64,
    /// Mean-over-objects J per frame (index 0 unused, kept as 1.0).
    pub per_frame_j: Vec<f64>,
    /// (frame, category, j) rows for trajectory exports.
    #[serde(skip)]
    pub rows: Vec<(usize, u8, f64)>,
}

pub fn eval_segments(
    pred: &[GrayImage],
    gt: &[GrayImage],
    tolerance_radius: f64,
) -> Result<SegmentEval> {
    if pred.len() != gt.len() || pred.len() < 2 {
        return Err(Error::Dim(format!(
            "prediction/ground-truth frame counts disagree: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let categories = gt[0].data.iter().copied().max().unwrap_or(0);
    if categories == 0 {
        return Err(Error::Validation("ground truth has no foreground objects".into()));
    }
    let objects: Vec<u8> = (1..=categories).collect();
    let mut per_object_j = Vec::new();
    let mut per_object_f = Vec::new();
    let mut per_frame_j = vec![1.0f64; pred.len()];
    let mut per_frame_acc = vec![0.0f64; pred.len()];
    let mut rows = Vec::new();
    for &obj in &objects {
        let mut js = Vec::new();
        let mut fs = Vec::new();
        for t in 1..pred.len() {
            let j = region_j(&pred[t], &gt[t], obj)?;
            let f = boundary_f(&pred[t], &gt[t], obj, tolerance_radius)?;
            per_frame_acc[t] += j;
            rows.push((t, obj, j));
            js.push(j);
            fs.push(f);
        }
        per_object_j.push(js.iter().sum::<f64>() / js.len() as f64);
        per_object_f.push(fs.iter().sum::<f64>() / fs.len() as f64);
    }
    for t in 1..pred.len() {
        per_frame_j[t] = per_frame_acc[t] / objects.len() as f64;
    }
    let mean_j = per_object_j.iter().sum::<f64>() / per_object_j.len() as f64;
    let mean_f = per_object_f.iter().sum::<f64>() / per_object_f.len() as f64;
    Ok(SegmentEval {
        per_object_j,
        per_object_f,
        mean_j,
        mean_f,
        per_frame_j,
        rows,
    })
}

/// PCK per threshold for one video, frames after the first, normalized per
/// frame by the ground-truth keypoint bounding box.
pub fn eval_keypoints(
    pred: &[Vec<(f64, f64)>],
    gt: &[Vec<(f64, f64)>],
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    if pred.len() != gt.len() || pred.len() < 2 {
        return Err(Error::Dim(format!(
            "prediction/ground-truth frame counts disagree: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut sums = vec![0.0f64; thresholds.len()];
    for t in 1..pred.len() {
        let norm = keypoint_bbox_normalizer(&gt[t]);
        for (i, &x) in thresholds.iter().enumerate() {
            sums[i] += pck(&pred[t], &gt[t], norm, x)?;
        }
    }
    let frames = (pred.len() - 1) as f64;
    Ok(sums.into_iter().map(|s| s / frames).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask_from(rows: &[&str]) -> GrayImage {
        let h = rows.len();
        let w = rows[0].len();
        let mut img = GrayImage::new(w, h);
        for (y, r) in rows.iter().enumerate() {
            for (x, ch) in r.bytes().enumerate() {
                img.set(x, y, ch - b'0');
            }
        }
        img
    }

    #[test]
    fn j_identical_disjoint() {
        let a = mask_from(&["0110", "0110"]);
        assert_eq!(region_j(&a, &a, 1).unwrap(), 1.0);
        let b = mask_from(&["1001", "1001"]);
        assert_eq!(region_j(&a, &b, 1).unwrap(), 0.0);
    }

    #[test]
    fn j_both_empty_is_one() {
        let a = mask_from(&["0000"]);
        assert_eq!(region_j(&a, &a, 3).unwrap(), 1.0);
    }

    #[test]
    fn j_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let mut a = GrayImage::new(16, 16);
            let mut b = GrayImage::new(16, 16);
            for v in a.data.iter_mut() {
                *v = rng.random_range(0..3);
            }
            for v in b.data.iter_mut() {
                *v = rng.random_range(0..3);
            }
            for cat in 0..3 {
                let got = region_j(&a, &b, cat).unwrap();
                let mut inter = 0.0;
                let mut uni = 0.0;
                for i in 0..256 {
                    let (pa, pb) = (a.data[i] == cat, b.data[i] == cat);
                    if pa && pb {
                        inter += 1.0;
                    }
                    if pa || pb {
                        uni += 1.0;
                    }
                }
                let want = if uni == 0.0 { 1.0 } else { inter / uni };
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn j_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut a = GrayImage::new(8, 8);
            let mut b = GrayImage::new(8, 8);
            for v in a.data.iter_mut() {
                *v = rng.random_range(0..2);
            }
            for v in b.data.iter_mut() {
                *v = rng.random_range(0..2);
            }
            assert_eq!(region_j(&a, &b, 1).unwrap(), region_j(&b, &a, 1).unwrap());
        }
    }

    #[test]
    fn boundary_identical_is_one_any_radius() {
        let a = mask_from(&["00000", "01110", "01110", "01110", "00000"]);
        for r in [0.0, 1.0, 3.0] {
            assert_eq!(boundary_f(&a, &a, 1, r).unwrap(), 1.0);
        }
    }

    #[test]
    fn boundary_shift_tolerance_semantics() {
        let mut a = GrayImage::new(12, 12);
        let mut b = GrayImage::new(12, 12);
        for y in 3..8 {
            for x in 3..8 {
                a.set(x, y, 1);
                b.set(x + 1, y, 1);
            }
        }
        assert_eq!(boundary_f(&a, &b, 1, 1.0).unwrap(), 1.0);
        assert!(boundary_f(&a, &b, 1, 0.0).unwrap() < 1.0);
    }

    #[test]
    fn boundary_one_empty_is_zero() {
        let a = mask_from(&["0110"]);
        let empty = mask_from(&["0000"]);
        assert_eq!(boundary_f(&a, &empty, 1, 2.0).unwrap(), 0.0);
        assert_eq!(boundary_f(&empty, &a, 1, 2.0).unwrap(), 0.0);
        assert_eq!(boundary_f(&empty, &empty, 1, 2.0).unwrap(), 1.0);
    }

    /// All-pairs nearest-distance oracle for boundary precision/recall.
    fn boundary_oracle(pred: &GrayImage, gt: &GrayImage, cat: u8, r: f64) -> f64 {
        let pb = boundary_pixels(pred, cat);
        let gb = boundary_pixels(gt, cat);
        match (pb.is_empty(), gb.is_empty()) {
            (true, true) => return 1.0,
            (true, false) | (false, true) => return 0.0,
            _ => {}
        }
        let dist = |a: &(usize, usize), b: &(usize, usize)| {
            (((a.0 as f64 - b.0 as f64).powi(2) + (a.1 as f64 - b.1 as f64).powi(2)) as f64).sqrt()
        };
        let p = pb
            .iter()
            .filter(|pp| gb.iter().any(|gp| dist(pp, gp) <= r))
            .count() as f64
            / pb.len() as f64;
        let rec = gb
            .iter()
            .filter(|gp| pb.iter().any(|pp| dist(pp, gp) <= r))
            .count() as f64
            / gb.len() as f64;
        if p + rec == 0.0 {
            0.0
        } else {
            2.0 * p * rec / (p + rec)
        }
    }

    #[test]
    fn boundary_matches_all_pairs_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let mut a = GrayImage::new(16, 16);
            let mut b = GrayImage::new(16, 16);
            // Blobby random masks.
            for _ in 0..3 {
                let (cx, cy, r) = (
                    rng.random_range(2..14i32) as isize,
                    rng.random_range(2..14i32) as isize,
                    rng.random_range(1..4i32) as isize,
                );
                for y in 0..16isize {
                    for x in 0..16isize {
                        if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                            a.set(x as usize, y as usize, 1);
                        }
                    }
                }
                let (cx, cy) = (
                    (cx + rng.random_range(-2..3i32) as isize).clamp(0, 15),
                    (cy + rng.random_range(-2..3i32) as isize).clamp(0, 15),
                );
                for y in 0..16isize {
                    for x in 0..16isize {
                        if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                            b.set(x as usize, y as usize, 1);
                        }
                    }
                }
            }
            for r in [0.0, 1.0, 2.0] {
                let got = boundary_f(&a, &b, 1, r).unwrap();
                let want = boundary_oracle(&a, &b, 1, r);
                assert!((got - want).abs() < 1e-12, "radius {r}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn boundary_translation_invariance() {
        let mut a = GrayImage::new(20, 20);
        let mut b = GrayImage::new(20, 20);
        for y in 4..9 {
            for x in 4..10 {
                a.set(x, y, 1);
            }
        }
        for y in 5..10 {
            for x in 6..12 {
                b.set(x, y, 1);
            }
        }
        let f0 = boundary_f(&a, &b, 1, 1.5).unwrap();
        // Translate both masks by (3, 4).
        let mut a2 = GrayImage::new(20, 20);
        let mut b2 = GrayImage::new(20, 20);
        for y in 0..20 {
            for x in 0..20 {
                if a.get(x, y) == 1 {
                    a2.set(x + 3, y + 4, 1);
                }
                if b.get(x, y) == 1 {
                    b2.set(x + 3, y + 4, 1);
                }
            }
        }
        let f1 = boundary_f(&a2, &b2, 1, 1.5).unwrap();
        assert!((f0 - f1).abs() < 1e-12);
    }

    #[test]
    fn pck_trivials_and_threshold_semantics() {
        let gt = vec![(10.0, 10.0), (20.0, 30.0), (5.0, 40.0)];
        for x in [0.1, 0.2, 0.5] {
            assert_eq!(pck(&gt, &gt, 30.0, x).unwrap(), 1.0);
        }
        // Everything off by exactly 0.15 * normalizer.
        let norm = 20.0;
        let off: Vec<(f64, f64)> = gt.iter().map(|&(x, y)| (x + 0.15 * norm, y)).collect();
        assert_eq!(pck(&off, &gt, norm, 0.1).unwrap(), 0.0);
        assert_eq!(pck(&off, &gt, norm, 0.2).unwrap(), 1.0);
    }

    #[test]
    fn pck_matches_distance_loop_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let gt: Vec<(f64, f64)> = (0..8)
            .map(|_| (rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)))
            .collect();
        let pred: Vec<(f64, f64)> = gt
            .iter()
            .map(|&(x, y)| (x + rng.random_range(-6.0..6.0), y + rng.random_range(-6.0..6.0)))
            .collect();
        let norm = keypoint_bbox_normalizer(&gt);
        let mut prev = 0.0;
        for x in [0.1, 0.2, 0.3, 0.4, 0.5] {
            let got = pck(&pred, &gt, norm, x).unwrap();
            let want = pred
                .iter()
                .zip(&gt)
                .filter(|(&(px, py), &(gx, gy))| {
                    ((px - gx).powi(2) + (py - gy).powi(2)).sqrt() <= x * norm
                })
                .count() as f64
                / 8.0;
            assert_eq!(got, want);
            assert!(got >= prev);
            prev = got;
        }
    }

    #[test]
    fn identity_baseline_repeats_initial_labels() {
        let mut mask = GrayImage::new(16, 16);
        for y in 4..10 {
            for x in 4..10 {
                mask.set(x, y, 1);
            }
        }
        let task = crate::tracker::TrackTask::segment(mask.clone()).unwrap();
        let out = identity_baseline(&task, 5, 4).unwrap();
        for t in 0..5 {
            assert_eq!(out.masks()[t], mask);
            assert_eq!(region_j(&out.masks()[t], &mask, 1).unwrap(), 1.0);
        }
    }

    #[test]
    fn identity_pck_on_static_points_is_one() {
        let pts = vec![(8.0, 8.0), (20.0, 14.0)];
        let task = crate::tracker::TrackTask::keypoints(pts.clone()).unwrap();
        let out = identity_baseline(&task, 4, 8).unwrap();
        let gt = vec![pts.clone(); 4];
        let pred: Vec<Vec<(f64, f64)>> = out
            .keypoints()
            .iter()
            .map(|f| f.iter().map(|k| (k.x, k.y)).collect())
            .collect();
        for x in [0.1, 0.3, 0.5] {
            let scores = eval_keypoints(&pred, &gt, &[x]).unwrap();
            assert_eq!(scores[0], 1.0);
        }
    }

    #[test]
    fn odds_ratio_examples() {
        let independent = ContingencyTable {
            both: 25,
            track_only: 25,
            color_only: 25,
            neither: 25,
        };
        assert_eq!(odds_ratio(&independent), 1.0);

        let associated = ContingencyTable {
            both: 30,
            track_only: 10,
            color_only: 15,
            neither: 45,
        };
        assert_eq!(odds_ratio(&associated), 9.0);

        let perfect = ContingencyTable {
            both: 20,
            track_only: 0,
            color_only: 0,
            neither: 20,
        };
        let or = odds_ratio(&perfect);
        assert!(or.is_finite() && or > 1.0);
    }

    #[test]
    fn odds_ratio_label_swap_reciprocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let t = ContingencyTable {
                both: rng.random_range(1..50),
                track_only: rng.random_range(1..50),
                color_only: rng.random_range(1..50),
                neither: rng.random_range(1..50),
            };
            let swapped = ContingencyTable {
                both: t.track_only,
                track_only: t.both,
                color_only: t.neither,
                neither: t.color_only,
            };
            let prod = odds_ratio(&t) * odds_ratio(&swapped);
            assert!((prod - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn failure_table_all_success() {
        let t = failure_table(&[0.9, 0.8, 0.7], &[0.9, 0.95, 0.8], 0.5, 0.5).unwrap();
        assert_eq!(
            t,
            ContingencyTable {
                both: 0,
                track_only: 0,
                color_only: 0,
                neither: 3
            }
        );
        // Zero thresholds: nothing can fail.
        let t = failure_table(&[0.0, 0.1], &[0.0, 0.3], 0.0, 0.0).unwrap();
        assert_eq!(t.total(), t.neither);
    }

    fn random_grid(t: usize, g: usize, d: usize, seed: u64) -> EmbeddingGrid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EmbeddingGrid {
            values: crate::numcore::Tensor::from_fn(&[t, g, g, d], |_| rng.random_range(-1.0..1.0)),
            frame_indices: (0..t).collect(),
        }
    }

    #[test]
    fn pca_rank3_embeddings_reconstruct_losslessly() {
        // Embeddings spanning an exact 3D subspace of D = 6.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let basis: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..6).map(|k| ((i * 6 + k) as f64 * 0.7).sin()).collect())
            .collect();
        let (t, g) = (2, 4);
        let values = crate::numcore::Tensor::from_fn(&[t, g, g, 6], |flat| {
            let p = flat / 6;
            let k = flat % 6;
            let mut s = 0.0;
            let mut r = ChaCha8Rng::seed_from_u64(p as u64);
            for b in basis.iter() {
                s += r.random_range(-1.0..1.0) * b[k];
            }
            let _ = &mut rng;
            s
        });
        let grid = EmbeddingGrid {
            values,
            frame_indices: vec![0, 1],
        };
        // Covariance has rank 3: eigenvalues beyond the third are ~0.
        let rows: Vec<f64> = grid.values.data().to_vec();
        let n = t * g * g;
        let d = 6;
        let mut mean = vec![0.0; d];
        for r in rows.chunks_exact(d) {
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let mut cov = vec![0.0; d * d];
        for r in rows.chunks_exact(d) {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (r[i] - mean[i]) * (r[j] - mean[j]) / n as f64;
                }
            }
        }
        let (vals, _) = symmetric_eigen(&cov, d);
        assert!(vals[3].abs() < 1e-8, "4th eigenvalue {}", vals[3]);
        // And the visualization runs.
        let imgs = pca_embed_viz(&grid).unwrap();
        assert_eq!(imgs.len(), 2);
    }

    #[test]
    fn pca_constant_embeddings_render_mid_gray() {
        let grid = EmbeddingGrid {
            values: crate::numcore::Tensor::full(&[1, 2, 2, 4], 0.7f64),
            frame_indices: vec![0],
        };
        let imgs = pca_embed_viz(&grid).unwrap();
        assert!(imgs[0].data.iter().all(|&v| v == 128));
    }

    #[test]
    fn pca_rejects_small_dim() {
        let grid = random_grid(1, 2, 2, 0);
        assert!(pca_embed_viz(&grid).is_err());
    }

    #[test]
    fn pca_components_are_orthonormal_and_match_nalgebra() {
        let grid = random_grid(2, 4, 8, 9);
        let (t, g, d) = (2usize, 4usize, 8usize);
        let n = t * g * g;
        let rows: Vec<f64> = grid.values.data().to_vec();
        let mut mean = vec![0.0; d];
        for r in rows.chunks_exact(d) {
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let mut cov = vec![0.0; d * d];
        for r in rows.chunks_exact(d) {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (r[i] - mean[i]) * (r[j] - mean[j]) / n as f64;
                }
            }
        }
        let (vals, vecs) = symmetric_eigen(&cov, d);
        // Orthonormality.
        for a in 0..d {
            for b in 0..d {
                let dot: f64 = (0..d).map(|k| vecs[k * d + a] * vecs[k * d + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-8, "columns {a},{b}: {dot}");
            }
        }
        // Eigenvalues match a dense solver.
        let m = nalgebra::DMatrix::from_row_slice(d, d, &cov);
        let mut reference: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().cloned().collect();
        reference.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (got, want) in vals.iter().zip(&reference).take(3) {
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn eval_segments_static_identity_is_one() {
        let mut mask = GrayImage::new(16, 16);
        for y in 2..9 {
            for x in 3..11 {
                mask.set(x, y, 1);
            }
        }
        let frames = vec![mask.clone(); 6];
        let ev = eval_segments(&frames, &frames, 1.0).unwrap();
        assert_eq!(ev.mean_j, 1.0);
        assert_eq!(ev.mean_f, 1.0);
    }
}

//! Color space conversion and the k-means quantizer that turns continuous
//! ab values into the discrete categories used as training targets.

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// sRGB -> XYZ matrix (D65). The white point is taken as the exact row sums
// so that neutral grays map to a = b = 0 identically.
const M: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];
const WHITE: [f64; 3] = [
    M[0][0] + M[0][1] + M[0][2],
    M[1][0] + M[1][1] + M[1][2],
    M[2][0] + M[2][1] + M[2][2],
];

fn srgb_decode(u: f64) -> f64 {
    if u <= 0.04045 {
        u / 12.92
    } else {
        ((u + 0.055) / 1.055).powf(2.4)
    }
}

fn srgb_encode(u: f64) -> f64 {
    if u <= 0.0031308 {
        12.92 * u
    } else {
        1.055 * u.powf(1.0 / 2.4) - 0.055
    }
}

/// Exact inverse of `M`, so the round trip is limited only by f64
/// arithmetic rather than published rounded coefficients.
fn xyz_to_rgb_matrix() -> &'static [[f64; 3]; 3] {
    static INV: std::sync::OnceLock<[[f64; 3]; 3]> = std::sync::OnceLock::new();
    INV.get_or_init(|| {
        let m = &M;
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        let mut inv = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let (a, b) = ((i + 1) % 3, (i + 2) % 3);
                let (c, d) = ((j + 1) % 3, (j + 2) % 3);
                // Transposed cofactor.
                inv[j][i] = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) / det;
            }
        }
        inv
    })
}

const DELTA: f64 = 6.0 / 29.0;

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// One sRGB pixel (0..=255 per channel) to CIELAB.
pub fn rgb_to_lab_pixel(rgb: [u8; 3]) -> [f64; 3] {
    let lin = [
        srgb_decode(rgb[0] as f64 / 255.0),
        srgb_decode(rgb[1] as f64 / 255.0),
        srgb_decode(rgb[2] as f64 / 255.0),
    ];
    let mut xyz = [0.0; 3];
    for (i, row) in M.iter().enumerate() {
        xyz[i] = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
    }
    let fx = lab_f(xyz[0] / WHITE[0]);
    let fy = lab_f(xyz[1] / WHITE[1]);
    let fz = lab_f(xyz[2] / WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// CIELAB back to 8-bit sRGB; out-of-gamut values clamp.
pub fn lab_to_rgb_pixel(lab: [f64; 3]) -> [u8; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        WHITE[0] * lab_f_inv(fx),
        WHITE[1] * lab_f_inv(fy),
        WHITE[2] * lab_f_inv(fz),
    ];
    let inv = xyz_to_rgb_matrix();
    let mut out = [0u8; 3];
    for (i, row) in inv.iter().enumerate() {
        let lin = row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2];
        let v = srgb_encode(lin.clamp(0.0, 1.0)) * 255.0;
        out[i] = v.round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// sRGB image (row-major, 3 bytes/pixel) to a Lab image (3 floats/pixel).
pub fn rgb_to_lab(rgb: &[u8]) -> Vec<f64> {
    rgb.chunks_exact(3)
        .flat_map(|p| rgb_to_lab_pixel([p[0], p[1], p[2]]))
        .collect()
}

pub fn lab_to_rgb(lab: &[f64]) -> Vec<u8> {
    lab.chunks_exact(3)
        .flat_map(|p| lab_to_rgb_pixel([p[0], p[1], p[2]]))
        .collect()
}

/// Exact inverse of `lab_to_rgb_pixel` without the gamut clamp; used to
/// check round trips in tests.
pub fn lab_to_rgb_unclamped(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        WHITE[0] * lab_f_inv(fx),
        WHITE[1] * lab_f_inv(fy),
        WHITE[2] * lab_f_inv(fz),
    ];
    let inv = xyz_to_rgb_matrix();
    let mut out = [0.0; 3];
    for (i, row) in inv.iter().enumerate() {
        let lin = row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2];
        out[i] = srgb_encode(lin.clamp(0.0, 1.0)) * 255.0;
    }
    out
}

/// The fitted ab-space cluster centroids defining the color categories.
#[derive(Clone, Debug)]
pub struct Palette {
    centroids: Vec<[f64; 2]>,
    pub seed: u64,
    pub sample_count: usize,
    pub final_objective: f64,
}

impl Palette {
    pub fn from_centroids(centroids: Vec<[f64; 2]>, seed: u64) -> Result<Self> {
        if centroids.len() < 2 {
            return Err(Error::Validation(format!(
                "palette needs K >= 2 centroids, got {}",
                centroids.len()
            )));
        }
        for i in 0..centroids.len() {
            for j in i + 1..centroids.len() {
                if centroids[i] == centroids[j] {
                    return Err(Error::Validation(format!(
                        "palette centroids {i} and {j} are identical"
                    )));
                }
            }
        }
        Ok(Palette {
            centroids,
            seed,
            sample_count: 0,
            final_objective: 0.0,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn centroids(&self) -> &[[f64; 2]] {
        &self.centroids
    }

    /// Index of the nearest centroid under squared Euclidean distance;
    /// ties resolve to the lowest index.
    pub fn nearest(&self, ab: [f64; 2]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.centroids.iter().enumerate() {
            let d = (ab[0] - c[0]).powi(2) + (ab[1] - c[1]).powi(2);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Per-frame grid of palette indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedFrame {
    pub h: usize,
    pub w: usize,
    pub indices: Vec<u8>,
    pub source_h: usize,
    pub source_w: usize,
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Lloyd's algorithm with k-means++ seeding. The objective is
/// non-increasing per iteration; empty clusters are re-seeded to the point
/// farthest from its assigned centroid.
pub fn fit_palette(samples: &[[f64; 2]], k: usize, seed: u64, max_iters: usize) -> Result<Palette> {
    if k < 2 {
        return Err(Error::Validation(format!("k must be >= 2, got {k}")));
    }
    let mut distinct: Vec<[f64; 2]> = Vec::new();
    for &s in samples {
        if !distinct.contains(&s) {
            distinct.push(s);
            if distinct.len() >= k {
                break;
            }
        }
    }
    if distinct.len() < k {
        return Err(Error::Validation(format!(
            "k-means needs at least {k} distinct samples, found {}",
            distinct.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // k-means++ seeding.
    let mut centroids: Vec<[f64; 2]> = Vec::with_capacity(k);
    centroids.push(samples[rng.random_range(0..samples.len())]);
    let mut d2: Vec<f64> = samples.iter().map(|&s| sq_dist(s, centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All mass on existing centroids; fall back to any
            // not-yet-chosen distinct point.
            *distinct
                .iter()
                .find(|p| !centroids.contains(p))
                .expect("enough distinct points")
        } else {
            let mut r = rng.random_range(0.0..total);
            let mut pick = samples.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            samples[pick]
        };
        centroids.push(next);
        for (i, &s) in samples.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(s, next));
        }
    }

    let mut assign = vec![0usize; samples.len()];
    let mut objective = f64::INFINITY;
    for _ in 0..max_iters {
        // Assignment step.
        let mut changed = false;
        let mut obj = 0.0;
        for (i, &s) in samples.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, &cent) in centroids.iter().enumerate() {
                let d = sq_dist(s, cent);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            obj += best_d;
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        objective = obj;
        if !changed {
            break;
        }
        // Update step.
        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (i, &s) in samples.iter().enumerate() {
            sums[assign[i]][0] += s[0];
            sums[assign[i]][1] += s[1];
            counts[assign[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
            } else {
                // Re-seed an empty cluster to the point farthest from its
                // current centroid.
                let far = samples
                    .iter()
                    .enumerate()
                    .max_by(|a, b| {
                        sq_dist(*a.1, centroids[assign[a.0]])
                            .partial_cmp(&sq_dist(*b.1, centroids[assign[b.0]]))
                            .unwrap()
                    })
                    .map(|(_, &s)| s)
                    .unwrap();
                centroids[c] = far;
            }
        }
    }

    // Deduplicate exact collisions (possible with duplicated samples) by
    // nudging onto distinct sample points.
    for i in 0..k {
        for j in i + 1..k {
            if centroids[i] == centroids[j] {
                if let Some(&p) = distinct.iter().find(|p| !centroids.contains(p)) {
                    centroids[j] = p;
                }
            }
        }
    }

    let mut palette = Palette::from_centroids(centroids, seed)?;
    palette.sample_count = samples.len();
    palette.final_objective = objective;
    Ok(palette)
}

/// Per-iteration objective trace of Lloyd's algorithm on the same seeding;
/// exposed for the monotonicity property tests.
pub fn lloyd_objective_trace(samples: &[[f64; 2]], k: usize, seed: u64, iters: usize) -> Vec<f64> {
    let mut trace = Vec::new();
    for it in 1..=iters {
        if let Ok(p) = fit_palette(samples, k, seed, it) {
            trace.push(p.final_objective);
        }
    }
    trace
}

/// Assign every position of an `h x w` ab image (2 floats per position,
/// row-major) to its nearest centroid.
pub fn quantize(ab: &[f64], h: usize, w: usize, palette: &Palette) -> QuantizedFrame {
    assert_eq!(ab.len(), h * w * 2);
    let indices = ab
        .chunks_exact(2)
        .map(|p| palette.nearest([p[0], p[1]]) as u8)
        .collect();
    QuantizedFrame {
        h,
        w,
        indices,
        source_h: h,
        source_w: w,
    }
}

/// Hard decode: centroid lookup per index.
pub fn decode_hard(qf: &QuantizedFrame, palette: &Palette) -> Vec<f64> {
    let mut out = Vec::with_capacity(qf.indices.len() * 2);
    for &i in &qf.indices {
        let c = palette.centroids()[i as usize];
        out.push(c[0]);
        out.push(c[1]);
    }
    out
}

/// Soft decode: expectation over centroids per position. `dist` is
/// positions x K, rows summing to 1 within 1e-4.
pub fn decode_soft(dist: &[f64], k: usize, palette: &Palette) -> Result<Vec<f64>> {
    if k != palette.k() {
        return Err(Error::Dim(format!(
            "distribution has {k} categories but palette has {}",
            palette.k()
        )));
    }
    let mut out = Vec::with_capacity(dist.len() / k * 2);
    for row in dist.chunks_exact(k) {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::Validation(format!(
                "soft color distribution sums to {sum}, expected 1 within 1e-4"
            )));
        }
        let mut a = 0.0;
        let mut b = 0.0;
        for (p, c) in row.iter().zip(palette.centroids()) {
            a += p * c[0];
            b += p * c[1];
        }
        out.push(a);
        out.push(b);
    }
    Ok(out)
}

/// Block-average an `h x w` ab image down to `th x tw`.
pub fn downsample_ab(ab: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Result<Vec<f64>> {
    if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 {
        return Err(Error::Validation(format!(
            "downsample target {th}x{tw} must divide source {h}x{w}"
        )));
    }
    let (bh, bw) = (h / th, w / tw);
    let norm = (bh * bw) as f64;
    let mut out = vec![0.0f64; th * tw * 2];
    for ty in 0..th {
        for tx in 0..tw {
            let mut acc = [0.0f64; 2];
            for dy in 0..bh {
                for dx in 0..bw {
                    let p = ((ty * bh + dy) * w + tx * bw + dx) * 2;
                    acc[0] += ab[p];
                    acc[1] += ab[p + 1];
                }
            }
            out[(ty * tw + tx) * 2] = acc[0] / norm;
            out[(ty * tw + tx) * 2 + 1] = acc[1] / norm;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn black_maps_to_origin() {
        let lab = rgb_to_lab_pixel([0, 0, 0]);
        assert!(lab.iter().all(|v| v.abs() < 1e-12), "{lab:?}");
    }

    #[test]
    fn white_is_the_white_point() {
        let lab = rgb_to_lab_pixel([255, 255, 255]);
        assert!((lab[0] - 100.0).abs() < 1e-9);
        assert!(lab[1].abs() < 1e-6 && lab[2].abs() < 1e-6, "{lab:?}");
    }

    #[test]
    fn mid_gray_matches_direct_formula() {
        let lab = rgb_to_lab_pixel([119, 119, 119]);
        assert!(lab[1].abs() < 1e-9 && lab[2].abs() < 1e-9);
        // Direct CIELAB evaluation: L = 116 f(Y/Yn) - 16 with Y/Yn equal to
        // the linearized gray level.
        let y = srgb_decode(119.0 / 255.0);
        let want = 116.0 * lab_f(y) - 16.0;
        assert!((lab[0] - want).abs() < 1e-9);
    }

    #[test]
    fn round_trip_all_gray_levels_exact() {
        for g in 0..=255u8 {
            let lab = rgb_to_lab_pixel([g, g, g]);
            assert_eq!(lab_to_rgb_pixel(lab), [g, g, g]);
            let back = lab_to_rgb_unclamped(lab);
            for (b, o) in back.iter().zip([g, g, g]) {
                assert!((b - o as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn round_trip_random_colors_under_1e6() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let rgb = [rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()];
            let lab = rgb_to_lab_pixel(rgb);
            let back = lab_to_rgb_unclamped(lab);
            for (b, o) in back.iter().zip(rgb) {
                assert!((b - o as f64).abs() < 1e-6, "{rgb:?} -> {lab:?} -> {back:?}");
            }
            assert_eq!(lab_to_rgb_pixel(lab), rgb);
        }
    }

    #[test]
    fn pure_white_lab_decodes_to_255() {
        assert_eq!(lab_to_rgb_pixel([100.0, 0.0, 0.0]), [255, 255, 255]);
    }

    #[test]
    fn extreme_chroma_clamps_without_overflow() {
        let rgb = lab_to_rgb_pixel([50.0, 200.0, 0.0]);
        assert!(rgb.iter().all(|&v| v <= 255));
    }

    #[test]
    fn k_points_k_clusters_is_exact() {
        let pts = vec![[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]];
        let p = fit_palette(&pts, 4, 3, 50).unwrap();
        assert!(p.final_objective < 1e-18);
        for pt in &pts {
            assert!(p
                .centroids()
                .iter()
                .any(|c| sq_dist(*c, *pt) < 1e-18));
        }
    }

    #[test]
    fn two_blobs_recover_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pts = Vec::new();
        let mut mean_a = [0.0f64; 2];
        let mut mean_b = [0.0f64; 2];
        for _ in 0..50 {
            let p = [-40.0 + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            mean_a[0] += p[0] / 50.0;
            mean_a[1] += p[1] / 50.0;
            pts.push(p);
        }
        for _ in 0..50 {
            let p = [40.0 + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            mean_b[0] += p[0] / 50.0;
            mean_b[1] += p[1] / 50.0;
            pts.push(p);
        }
        let p = fit_palette(&pts, 2, 11, 100).unwrap();
        let mut got: Vec<[f64; 2]> = p.centroids().to_vec();
        got.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert!(sq_dist(got[0], mean_a) < 1e-18);
        assert!(sq_dist(got[1], mean_b) < 1e-18);
    }

    /// Plain Lloyd with random-point initialization; the restart oracle.
    fn lloyd_oracle(samples: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> f64 {
        let mut centroids: Vec<[f64; 2]> = (0..k)
            .map(|_| samples[rng.random_range(0..samples.len())])
            .collect();
        let mut assign = vec![0usize; samples.len()];
        let mut obj = f64::INFINITY;
        for _ in 0..100 {
            let mut new_obj = 0.0;
            for (i, &s) in samples.iter().enumerate() {
                let mut best = 0;
                let mut bd = f64::INFINITY;
                for (c, &cent) in centroids.iter().enumerate() {
                    let d = sq_dist(s, cent);
                    if d < bd {
                        bd = d;
                        best = c;
                    }
                }
                assign[i] = best;
                new_obj += bd;
            }
            if (new_obj - obj).abs() < 1e-15 {
                break;
            }
            obj = new_obj;
            let mut sums = vec![[0.0f64; 2]; k];
            let mut counts = vec![0usize; k];
            for (i, &s) in samples.iter().enumerate() {
                sums[assign[i]][0] += s[0];
                sums[assign[i]][1] += s[1];
                counts[assign[i]] += 1;
            }
            for c in 0..k {
                if counts[c] > 0 {
                    centroids[c] = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
                }
            }
        }
        obj
    }

    #[test]
    fn objective_not_worse_than_restart_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pts: Vec<[f64; 2]> = (0..30)
            .map(|_| [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)])
            .collect();
        let ours = fit_palette(&pts, 3, 17, 200).unwrap().final_objective;
        let mut best = f64::INFINITY;
        for _ in 0..50 {
            best = best.min(lloyd_oracle(&pts, 3, &mut rng));
        }
        assert!(ours <= best + 1e-9, "{ours} vs restart best {best}");
    }

    #[test]
    fn objective_monotone_per_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for case in 0..20 {
            let n = rng.random_range(10..60);
            let pts: Vec<[f64; 2]> = (0..n)
                .map(|_| [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)])
                .collect();
            let trace = lloyd_objective_trace(&pts, 4.min(n / 2).max(2), case, 12);
            for w in trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "objective increased: {trace:?}");
            }
        }
    }

    #[test]
    fn fitting_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<[f64; 2]> = (0..100)
            .map(|_| [rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0)])
            .collect();
        let a = fit_palette(&pts, 5, 42, 60).unwrap();
        let b = fit_palette(&pts, 5, 42, 60).unwrap();
        assert_eq!(a.centroids(), b.centroids());
    }

    #[test]
    fn too_few_samples_is_error() {
        let pts = vec![[0.0, 0.0], [1.0, 1.0]];
        assert!(fit_palette(&pts, 3, 0, 10).is_err());
    }

    fn test_palette() -> Palette {
        let centroids: Vec<[f64; 2]> = (0..16)
            .map(|i| {
                let ang = i as f64 / 16.0 * std::f64::consts::TAU;
                [40.0 * ang.cos(), 40.0 * ang.sin()]
            })
            .collect();
        Palette::from_centroids(centroids, 0).unwrap()
    }

    #[test]
    fn quantize_constant_image() {
        let p = test_palette();
        let c7 = p.centroids()[7];
        let ab: Vec<f64> = (0..6).flat_map(|_| [c7[0], c7[1]]).collect();
        let qf = quantize(&ab, 2, 3, &p);
        assert!(qf.indices.iter().all(|&i| i == 7));
    }

    #[test]
    fn quantize_tie_breaks_to_lowest_index() {
        let p = Palette::from_centroids(
            vec![
                [50.0, 50.0],
                [-50.0, 50.0],
                [0.0, 0.0],
                [-50.0, -50.0],
                [50.0, -50.0],
                [60.0, 0.0],
                [-60.0, 0.0],
                [0.0, 60.0],
                [0.0, -60.0],
                [2.0, 0.0],
            ],
            0,
        )
        .unwrap();
        // (1, 0) is the exact midpoint of centroids 2 and 9; all other
        // centroids are far away. The lower index must win.
        let qf = quantize(&[1.0, 0.0], 1, 1, &p);
        assert_eq!(qf.indices[0], 2);
    }

    #[test]
    fn quantize_matches_exhaustive_scan() {
        let p = test_palette();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ab: Vec<f64> = (0..64 * 2).map(|_| rng.random_range(-60.0..60.0)).collect();
        let qf = quantize(&ab, 8, 8, &p);
        for (pos, pair) in ab.chunks_exact(2).enumerate() {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (i, c) in p.centroids().iter().enumerate() {
                let d = sq_dist([pair[0], pair[1]], *c);
                if d < bd {
                    bd = d;
                    best = i;
                }
            }
            assert_eq!(qf.indices[pos] as usize, best);
        }
    }

    #[test]
    fn decode_one_hot_and_uniform() {
        let p = test_palette();
        let k = p.k();
        let mut onehot = vec![0.0; k];
        onehot[5] = 1.0;
        let ab = decode_soft(&onehot, k, &p).unwrap();
        assert_eq!(&ab, &p.centroids()[5]);

        let uniform = vec![1.0 / k as f64; k];
        let ab = decode_soft(&uniform, k, &p).unwrap();
        let mean = p.centroids().iter().fold([0.0, 0.0], |acc, c| {
            [acc[0] + c[0] / k as f64, acc[1] + c[1] / k as f64]
        });
        assert!((ab[0] - mean[0]).abs() < 1e-12 && (ab[1] - mean[1]).abs() < 1e-12);
    }

    #[test]
    fn quantize_decode_idempotent() {
        let p = test_palette();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let ab: Vec<f64> = (0..32).map(|_| rng.random_range(-60.0..60.0)).collect();
        let q1 = quantize(&ab, 4, 4, &p);
        let dec = decode_hard(&q1, &p);
        let q2 = quantize(&dec, 4, 4, &p);
        assert_eq!(q1.indices, q2.indices);
    }

    #[test]
    fn downsample_constant_and_mean() {
        let ab = vec![3.0; 4 * 4 * 2];
        let out = downsample_ab(&ab, 4, 4, 2, 2).unwrap();
        assert!(out.iter().all(|&v| (v - 3.0).abs() < 1e-12));

        let ab = vec![0.0, 0.0, 0.0, 0.0, 10.0, 10.0, 10.0, 10.0];
        let out = downsample_ab(&ab, 2, 2, 1, 1).unwrap();
        assert_eq!(out, vec![5.0, 5.0]);
    }

    #[test]
    fn downsample_matches_block_mean_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let ab: Vec<f64> = (0..8 * 8 * 2).map(|_| rng.random_range(-50.0..50.0)).collect();
        let out = downsample_ab(&ab, 8, 8, 4, 4).unwrap();
        for ty in 0..4 {
            for tx in 0..4 {
                for ch in 0..2 {
                    let mut s = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            s += ab[(((ty * 2 + dy) * 8) + tx * 2 + dx) * 2 + ch];
                        }
                    }
                    assert!((out[(ty * 4 + tx) * 2 + ch] - s / 4.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn downsample_rejects_non_divisible() {
        assert!(downsample_ab(&[0.0; 6 * 6 * 2], 6, 6, 4, 4).is_err());
    }
}

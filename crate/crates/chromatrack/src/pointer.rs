//! The pointer: a row-stochastic similarity matrix between target and
//! reference grid positions, and label propagation through it. Training
//! copies colors with it; inference re-uses it unchanged to carry segment
//! masks and keypoints.

use crate::error::{Error, Result};
use crate::numcore::{kernels, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointerConfig {
    /// Softmax temperature: 1.0 during training, sharper (0.5) at
    /// inference.
    pub temperature: f64,
}

impl Default for PointerConfig {
    fn default() -> Self {
        PointerConfig { temperature: 1.0 }
    }
}

impl PointerConfig {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Validation(format!(
                "temperature must be positive and finite, got {temperature}"
            )));
        }
        Ok(PointerConfig { temperature })
    }
}

/// Row-stochastic attention from target positions (rows) to all reference
/// positions of all reference frames (columns).
#[derive(Clone, Debug)]
pub struct SimilarityMatrix<T: Scalar> {
    pub weights: Tensor<T>,
    pub temperature: f64,
    pub target_frame: usize,
    pub reference_frames: Vec<usize>,
}

impl<T: Scalar> SimilarityMatrix<T> {
    pub fn target_positions(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn reference_positions(&self) -> usize {
        self.weights.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelKind {
    Color,
    Segment,
    Keypoint,
}

/// Per-position distribution over `d` categories on the embedding grid.
/// Color and segment grids are distributions per position; keypoint
/// channels are independent unit-mass maps.
#[derive(Clone, Debug)]
pub struct LabelGrid<T: Scalar> {
    pub h: usize,
    pub w: usize,
    pub categories: usize,
    pub kind: LabelKind,
    /// `(h*w) x categories`, row-major by grid position.
    pub data: Tensor<T>,
}

impl<T: Scalar> LabelGrid<T> {
    pub fn new(h: usize, w: usize, categories: usize, kind: LabelKind, data: Tensor<T>) -> Result<Self> {
        if data.shape() != [h * w, categories] {
            return Err(Error::Dim(format!(
                "label grid data must be [{}, {categories}], got {:?}",
                h * w,
                data.shape()
            )));
        }
        for &v in data.data() {
            let f = v.to_f64();
            if !(0.0 - 1e-6..=1.0 + 1e-6).contains(&f) {
                return Err(Error::Validation(format!(
                    "label grid entries must lie in [0, 1], found {f}"
                )));
            }
        }
        if matches!(kind, LabelKind::Color | LabelKind::Segment) {
            for (p, row) in data.data().chunks_exact(categories).enumerate() {
                let sum: f64 = row.iter().map(|v| v.to_f64()).sum();
                if (sum - 1.0).abs() > 1e-4 {
                    return Err(Error::Validation(format!(
                        "label distribution at position {p} sums to {sum}, expected 1"
                    )));
                }
            }
        }
        Ok(LabelGrid {
            h,
            w,
            categories,
            kind,
            data,
        })
    }

    pub fn one_hot(h: usize, w: usize, categories: usize, kind: LabelKind, indices: &[usize]) -> Result<Self> {
        if indices.len() != h * w {
            return Err(Error::Dim(format!(
                "expected {} indices, got {}",
                h * w,
                indices.len()
            )));
        }
        let mut data = Tensor::zeros(&[h * w, categories]);
        for (p, &c) in indices.iter().enumerate() {
            if c >= categories {
                return Err(Error::Validation(format!(
                    "category index {c} out of range {categories}"
                )));
            }
            data.data_mut()[p * categories + c] = T::one();
        }
        LabelGrid::new(h, w, categories, kind, data)
    }

    /// Per-position argmax (ties to the lowest category).
    pub fn argmax(&self) -> Vec<usize> {
        self.data
            .data()
            .chunks_exact(self.categories)
            .map(|row| {
                let mut best = 0;
                let mut bv = row[0];
                for (i, &v) in row.iter().enumerate().skip(1) {
                    if v > bv {
                        bv = v;
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Per-position maximum probability.
    pub fn confidence(&self) -> Vec<T> {
        self.data
            .data()
            .chunks_exact(self.categories)
            .map(|row| {
                let mut bv = row[0];
                for &v in &row[1..] {
                    bv = bv.maximum(v);
                }
                bv
            })
            .collect()
    }
}

fn rows_from_grid<T: Scalar>(grid: &Tensor<T>) -> Result<(usize, Tensor<T>)> {
    // H' x W' x D -> (H'*W') x D; the grid layout is already row-major.
    let s = grid.shape();
    if s.len() != 3 {
        return Err(Error::Dim(format!(
            "expected H' x W' x D embedding grid, got {s:?}"
        )));
    }
    let rows = s[0] * s[1];
    Ok((s[2], grid.clone().reshaped(&[rows, s[2]])?))
}

/// Eq. 2 on the tape: one softmax over all reference positions jointly.
/// `target_rows` is `Rt x D`; `ref_rows` is `Rr x D`.
pub fn similarity_tape<T: Scalar>(
    tape: &mut Tape<T>,
    target_rows: Var,
    ref_rows: Var,
    temperature: f64,
) -> Result<Var> {
    let logits = tape.matmul(target_rows, ref_rows, true)?;
    let scaled = tape.scale(logits, T::from_f64(1.0 / temperature));
    tape.softmax_rows(scaled)
}

/// Similarity between a target frame grid (`H' x W' x D`) and reference
/// grids (`N x H' x W' x D`, flattened jointly).
pub fn similarity<T: Scalar>(
    target: &Tensor<T>,
    references: &Tensor<T>,
    cfg: &PointerConfig,
) -> Result<SimilarityMatrix<T>> {
    PointerConfig::new(cfg.temperature)?;
    let (d, target_rows) = rows_from_grid(target)?;
    let rs = references.shape().to_vec();
    if rs.len() != 4 {
        return Err(Error::Dim(format!(
            "references must be N x H' x W' x D, got {rs:?}"
        )));
    }
    if rs[3] != d {
        return Err(Error::Dim(format!(
            "embedding dimension mismatch: target D={d}, references D={}",
            rs[3]
        )));
    }
    let ref_rows = references
        .clone()
        .reshaped(&[rs[0] * rs[1] * rs[2], d])?;
    let mut tape = Tape::new();
    let t = tape.constant(target_rows);
    let r = tape.constant(ref_rows);
    let a = similarity_tape(&mut tape, t, r, cfg.temperature)?;
    Ok(SimilarityMatrix {
        weights: tape.val(a).clone(),
        temperature: cfg.temperature,
        target_frame: 0,
        reference_frames: Vec::new(),
    })
}

/// Eq. 1: propagate reference label distributions through the pointer.
pub fn propagate<T: Scalar>(
    a: &SimilarityMatrix<T>,
    reference_labels: &[&LabelGrid<T>],
) -> Result<LabelGrid<T>> {
    if reference_labels.is_empty() {
        return Err(Error::Validation("propagate needs at least one reference".into()));
    }
    let (h, w, d, kind) = (
        reference_labels[0].h,
        reference_labels[0].w,
        reference_labels[0].categories,
        reference_labels[0].kind,
    );
    let mut total_rows = 0;
    for lg in reference_labels {
        if lg.categories != d || lg.kind != kind {
            return Err(Error::Dim(format!(
                "reference label grids disagree: {d} categories of {kind:?} vs {} of {:?}",
                lg.categories, lg.kind
            )));
        }
        total_rows += lg.h * lg.w;
    }
    if total_rows != a.reference_positions() {
        return Err(Error::Dim(format!(
            "similarity matrix has {} reference columns but labels supply {total_rows} positions",
            a.reference_positions()
        )));
    }
    let mut stacked = Vec::with_capacity(total_rows * d);
    for lg in reference_labels {
        stacked.extend_from_slice(lg.data.data());
    }
    let labels = Tensor::new(&[total_rows, d], stacked)?;
    let out = kernels::matmul(&a.weights, &labels, false)?;
    // Propagation is convex, so outputs stay valid distributions; clamp
    // away the last-ulp drift before revalidating.
    let one = T::one();
    let out = out.map(|v| {
        let v = v.maximum(T::zero());
        if v > one {
            one
        } else {
            v
        }
    });
    LabelGrid::new(h, w, d, kind, out)
}

/// Hardened pointer: per target position, the reference position with the
/// largest weight (ties to the lowest index).
pub fn argmax_pointer<T: Scalar>(a: &SimilarityMatrix<T>) -> Vec<usize> {
    let cols = a.reference_positions();
    a.weights
        .data()
        .chunks_exact(cols)
        .map(|row| {
            let mut best = 0;
            let mut bv = row[0];
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > bv {
                    bv = v;
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_from(data: Vec<f64>, h: usize, w: usize, d: usize) -> Tensor<f64> {
        Tensor::new(&[h, w, d], data).unwrap()
    }

    fn refs_from(data: Vec<f64>, n: usize, h: usize, w: usize, d: usize) -> Tensor<f64> {
        Tensor::new(&[n, h, w, d], data).unwrap()
    }

    #[test]
    fn identical_embeddings_give_uniform_rows() {
        let target = grid_from(vec![0.3; 2 * 2 * 3], 2, 2, 3);
        let refs = refs_from(vec![0.3; 2 * 2 * 2 * 3], 2, 2, 2, 3);
        let a = similarity(&target, &refs, &PointerConfig { temperature: 1.0 }).unwrap();
        for &v in a.weights.data() {
            assert!((v - 1.0 / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sharp_temperature_recovers_permutation() {
        // Orthogonal one-hot embeddings; target row p matches reference
        // position perm[p].
        let (h, w) = (2, 2);
        let d = h * w;
        let perm = [2usize, 0, 3, 1];
        let mut tdata = vec![0.0; h * w * d];
        let mut rdata = vec![0.0; h * w * d];
        for p in 0..h * w {
            tdata[p * d + perm[p]] = 1.0;
            rdata[p * d + p] = 1.0;
        }
        let a = similarity(
            &grid_from(tdata, h, w, d),
            &refs_from(rdata, 1, h, w, d),
            &PointerConfig { temperature: 0.01 },
        )
        .unwrap();
        for p in 0..h * w {
            for i in 0..h * w {
                let want = if i == perm[p] { 1.0 } else { 0.0 };
                assert!(
                    (a.weights.at(&[p, i]) - want).abs() < 1e-6,
                    "A[{p},{i}] = {}",
                    a.weights.at(&[p, i])
                );
            }
        }
        assert_eq!(argmax_pointer(&a), perm.to_vec());
    }

    #[test]
    fn similarity_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (h, w, d, n) = (3, 3, 4, 2);
        let target: Vec<f64> = (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let refs: Vec<f64> = (0..n * h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let temp = 0.7;
        let a = similarity(
            &grid_from(target.clone(), h, w, d),
            &refs_from(refs.clone(), n, h, w, d),
            &PointerConfig { temperature: temp },
        )
        .unwrap();
        let rr = n * h * w;
        for j in 0..h * w {
            let mut logits = vec![0.0f64; rr];
            for i in 0..rr {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += target[j * d + c] * refs[i * d + c];
                }
                logits[i] = dot / temp;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            for i in 0..rr {
                assert!(
                    (a.weights.at(&[j, i]) - exps[i] / s).abs() < 1e-10,
                    "mismatch at ({j},{i})"
                );
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let target = grid_from(vec![0.0; 4 * 3], 2, 2, 3);
        let refs = refs_from(vec![0.0; 4 * 4], 1, 2, 2, 4);
        assert!(similarity(&target, &refs, &PointerConfig::default()).is_err());
    }

    fn identity_similarity(n: usize) -> SimilarityMatrix<f64> {
        SimilarityMatrix {
            weights: Tensor::from_fn(&[n, n], |f| if f / n == f % n { 1.0 } else { 0.0 }),
            temperature: 1.0,
            target_frame: 1,
            reference_frames: vec![0],
        }
    }

    #[test]
    fn propagate_through_identity_copies_labels() {
        let labels = LabelGrid::<f64>::one_hot(2, 2, 3, LabelKind::Segment, &[0, 1, 2, 1]).unwrap();
        let a = identity_similarity(4);
        let out = propagate(&a, &[&labels]).unwrap();
        assert_eq!(out.data.data(), labels.data.data());
        assert_eq!(out.kind, LabelKind::Segment);
    }

    #[test]
    fn uniform_pointer_preserves_consensus() {
        let labels = LabelGrid::<f64>::one_hot(2, 2, 5, LabelKind::Segment, &[3, 3, 3, 3]).unwrap();
        let a = SimilarityMatrix {
            weights: Tensor::full(&[4, 4], 0.25),
            temperature: 1.0,
            target_frame: 1,
            reference_frames: vec![0],
        };
        let out = propagate(&a, &[&labels]).unwrap();
        for p in 0..4 {
            assert!((out.data.at(&[p, 3]) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn propagate_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let (rt, h, w, d) = (4, 2, 2, 3);
        let rr = 2 * h * w;
        // Random row-stochastic matrix.
        let mut aw = Tensor::<f64>::from_fn(&[rt, rr], |_| rng.random_range(0.01..1.0));
        for r in 0..rt {
            let row = &mut aw.data_mut()[r * rr..(r + 1) * rr];
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let a = SimilarityMatrix {
            weights: aw.clone(),
            temperature: 1.0,
            target_frame: 2,
            reference_frames: vec![0, 1],
        };
        let mk = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut data = Tensor::<f64>::from_fn(&[h * w, d], |_| rng.random_range(0.0..1.0));
            for r in 0..h * w {
                let row = &mut data.data_mut()[r * d..(r + 1) * d];
                let s: f64 = row.iter().sum();
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
            LabelGrid::new(h, w, d, LabelKind::Color, data).unwrap()
        };
        let l0 = mk(7);
        let l1 = mk(8);
        let out = propagate(&a, &[&l0, &l1]).unwrap();
        let stacked: Vec<&LabelGrid<f64>> = vec![&l0, &l1];
        for j in 0..rt {
            for c in 0..d {
                let mut s = 0.0;
                for i in 0..rr {
                    let lg = stacked[i / (h * w)];
                    s += aw.at(&[j, i]) * lg.data.at(&[i % (h * w), c]);
                }
                assert!((out.data.at(&[j, c]) - s).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn propagate_rejects_column_mismatch() {
        let labels = LabelGrid::<f64>::one_hot(2, 2, 3, LabelKind::Segment, &[0; 4]).unwrap();
        let a = identity_similarity(8);
        assert!(propagate(&a, &[&labels]).is_err());
    }

    #[test]
    fn argmax_tie_breaks_to_lowest() {
        let a = SimilarityMatrix {
            weights: Tensor::<f64>::full(&[2, 4], 0.25),
            temperature: 1.0,
            target_frame: 1,
            reference_frames: vec![0],
        };
        assert_eq!(argmax_pointer(&a), vec![0, 0]);
    }

    #[test]
    fn argmax_matches_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let aw = Tensor::<f64>::from_fn(&[6, 9], |_| rng.random_range(0.0..1.0));
        let a = SimilarityMatrix {
            weights: aw.clone(),
            temperature: 1.0,
            target_frame: 1,
            reference_frames: vec![0],
        };
        let got = argmax_pointer(&a);
        for (r, &g) in got.iter().enumerate() {
            for i in 0..9 {
                assert!(aw.at(&[r, i]) <= aw.at(&[r, g]));
            }
        }
    }

    // -- invariants over random instances ---------------------------------

    fn random_instance(
        rng: &mut ChaCha8Rng,
    ) -> (Tensor<f64>, Tensor<f64>) {
        let (h, w) = (rng.random_range(2..4), rng.random_range(2..4));
        let d = rng.random_range(2..6);
        let n = rng.random_range(1..4);
        let scale = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let target = Tensor::from_fn(&[h, w, d], |_| rng.random_range(-scale..scale));
        let refs = Tensor::from_fn(&[n, h, w, d], |_| rng.random_range(-scale..scale));
        (target, refs)
    }

    #[test]
    fn rows_are_stochastic_for_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for _ in 0..200 {
            let (t, r) = random_instance(&mut rng);
            let temp = [0.25, 0.5, 1.0, 2.0][rng.random_range(0..4)];
            let a = similarity(&t, &r, &PointerConfig { temperature: temp }).unwrap();
            let cols = a.reference_positions();
            for row in a.weights.data().chunks_exact(cols) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
                assert!(row.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
            }
        }
    }

    #[test]
    fn temperature_preserves_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        for _ in 0..50 {
            let (t, r) = random_instance(&mut rng);
            let base = argmax_pointer(
                &similarity(&t, &r, &PointerConfig { temperature: 0.25 }).unwrap(),
            );
            for temp in [0.5, 1.0, 2.0] {
                let a = similarity(&t, &r, &PointerConfig { temperature: temp }).unwrap();
                assert_eq!(argmax_pointer(&a), base, "temperature {temp}");
            }
        }
    }

    #[test]
    fn sharpness_grows_as_temperature_drops() {
        let mut rng = ChaCha8Rng::seed_from_u64(300);
        for _ in 0..50 {
            let (t, r) = random_instance(&mut rng);
            let max_of = |temp: f64| {
                let a = similarity(&t, &r, &PointerConfig { temperature: temp }).unwrap();
                let cols = a.reference_positions();
                a.weights
                    .data()
                    .chunks_exact(cols)
                    .map(|row| row.iter().cloned().fold(0.0, f64::max))
                    .collect::<Vec<f64>>()
            };
            let m1 = max_of(1.0);
            let m05 = max_of(0.5);
            let m025 = max_of(0.25);
            for ((a, b), c) in m1.iter().zip(&m05).zip(&m025) {
                assert!(b >= &(a - 1e-9));
                assert!(c >= &(b - 1e-9));
            }
        }
    }

    #[test]
    fn propagation_outputs_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(400);
        for _ in 0..100 {
            let (t, r) = random_instance(&mut rng);
            let n = r.shape()[0];
            let (h, w) = (r.shape()[1], r.shape()[2]);
            let d = rng.random_range(2..5);
            let a = similarity(&t, &r, &PointerConfig { temperature: 0.5 }).unwrap();
            let grids: Vec<LabelGrid<f64>> = (0..n)
                .map(|_| {
                    let idx: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..d)).collect();
                    LabelGrid::one_hot(h, w, d, LabelKind::Segment, &idx).unwrap()
                })
                .collect();
            let refs: Vec<&LabelGrid<f64>> = grids.iter().collect();
            let out = propagate(&a, &refs).unwrap();
            for row in out.data.data().chunks_exact(d) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    /// Two regions share a color but have distinct embeddings; the pointer
    /// must pull from the matching region, not the same-colored other one.
    #[test]
    fn same_color_regions_stay_separable() {
        let (h, w, d) = (2, 2, 4);
        // Reference: positions 0,1 carry embedding e0; positions 2,3 carry e1.
        let e0 = [1.0, 0.0, 0.0, 0.0];
        let e1 = [0.0, 1.0, 0.0, 0.0];
        let mut rdata = Vec::new();
        for p in 0..4 {
            rdata.extend_from_slice(if p < 2 { &e0 } else { &e1 });
        }
        // Target: every position matches region 0's embedding.
        let mut tdata = Vec::new();
        for _ in 0..4 {
            tdata.extend_from_slice(&e0);
        }
        let a = similarity(
            &grid_from(tdata, h, w, d),
            &refs_from(rdata, 1, h, w, d),
            &PointerConfig { temperature: 0.1 },
        )
        .unwrap();
        for j in 0..4 {
            let from_region0: f64 = (0..2).map(|i| a.weights.at(&[j, i])).sum();
            assert!(
                from_region0 >= 0.99,
                "target {j} drew only {from_region0} from its region"
            );
        }
    }
}

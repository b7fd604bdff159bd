//! Inference-time label propagation: given first-frame labels, carry
//! segment masks, keypoints, or colors through a video with the trained
//! pointer over a sliding window of previous frames.

use crate::chroma::{self, Palette};
use crate::embednet::{self, NetworkConfig, Parameters};
use crate::error::{Error, Result};
use crate::io::{GrayImage, RgbImage};
use crate::numcore::Tensor;
use crate::pointer::{self, LabelGrid, LabelKind, PointerConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsample {
    Bilinear,
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// Number of previous frames kept as references.
    pub window: usize,
    /// Inference softmax temperature.
    pub temperature: f64,
    /// How grid label distributions become pixel labels.
    pub upsample: Upsample,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            window: 3,
            temperature: 0.5,
            upsample: Upsample::Bilinear,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self, net: &NetworkConfig) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Validation("window must be >= 1".into()));
        }
        if self.window > net.num_frames - 1 {
            return Err(Error::Validation(format!(
                "window {} exceeds the network's {} reference slots",
                self.window,
                net.num_frames - 1
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Validation(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Segment,
    Keypoint,
    Color,
}

/// What to track: full-resolution first-frame annotation plus category
/// count.
#[derive(Clone, Debug)]
pub struct TrackTask {
    pub kind: TaskKind,
    pub initial_mask: Option<GrayImage>,
    pub initial_points: Vec<(f64, f64)>,
    pub categories: usize,
}

impl TrackTask {
    pub fn segment(mask: GrayImage) -> Result<Self> {
        let max = mask.data.iter().copied().max().unwrap_or(0) as usize;
        Ok(TrackTask {
            kind: TaskKind::Segment,
            categories: max + 1,
            initial_mask: Some(mask),
            initial_points: Vec::new(),
        })
    }

    pub fn keypoints(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Validation("keypoint task needs at least one point".into()));
        }
        Ok(TrackTask {
            kind: TaskKind::Keypoint,
            categories: points.len(),
            initial_mask: None,
            initial_points: points,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeypointPred {
    pub x: f64,
    pub y: f64,
    pub confidence: f32,
}

#[derive(Clone, Debug)]
pub enum Decoded {
    Masks(Vec<GrayImage>),
    Keypoints(Vec<Vec<KeypointPred>>),
}

#[derive(Clone, Debug)]
pub struct TrackResult {
    pub soft: Vec<LabelGrid<f32>>,
    pub decoded: Decoded,
    /// Per frame, per grid position: maximum label probability.
    pub confidence: Vec<Vec<f32>>,
}

impl TrackResult {
    pub fn masks(&self) -> &[GrayImage] {
        match &self.decoded {
            Decoded::Masks(m) => m,
            Decoded::Keypoints(_) => panic!("keypoint result has no masks"),
        }
    }

    pub fn keypoints(&self) -> &[Vec<KeypointPred>] {
        match &self.decoded {
            Decoded::Keypoints(k) => k,
            Decoded::Masks(_) => panic!("segment result has no keypoints"),
        }
    }
}

/// Majority-vote downsample of an instance map onto the grid, then one-hot.
/// Ties go to the lowest category.
pub fn encode_segments(mask: &GrayImage, categories: usize, grid_factor: usize) -> Result<LabelGrid<f32>> {
    if mask.w % grid_factor != 0 || mask.h % grid_factor != 0 {
        return Err(Error::Validation(format!(
            "mask {}x{} not divisible by grid factor {grid_factor}",
            mask.w, mask.h
        )));
    }
    let (gw, gh) = (mask.w / grid_factor, mask.h / grid_factor);
    let mut indices = Vec::with_capacity(gw * gh);
    let mut counts = vec![0usize; categories];
    for cy in 0..gh {
        for cx in 0..gw {
            counts.iter_mut().for_each(|c| *c = 0);
            for dy in 0..grid_factor {
                for dx in 0..grid_factor {
                    let v = mask.get(cx * grid_factor + dx, cy * grid_factor + dy) as usize;
                    if v >= categories {
                        return Err(Error::Validation(format!(
                            "mask value {v} out of range for {categories} categories"
                        )));
                    }
                    counts[v] += 1;
                }
            }
            let mut best = 0;
            for (c, &n) in counts.iter().enumerate() {
                if n > counts[best] {
                    best = c;
                }
            }
            indices.push(best);
        }
    }
    LabelGrid::one_hot(gh, gw, categories, LabelKind::Segment, &indices)
}

/// Keypoints to independent channel maps: channel k is 1 in the grid cell
/// containing point k.
pub fn encode_keypoints(
    points: &[(f64, f64)],
    full_w: usize,
    full_h: usize,
    grid_factor: usize,
) -> Result<LabelGrid<f32>> {
    let (gw, gh) = (full_w / grid_factor, full_h / grid_factor);
    let d = points.len();
    let mut data = Tensor::zeros(&[gw * gh, d]);
    for (k, &(x, y)) in points.iter().enumerate() {
        if x < 0.0 || y < 0.0 || x >= full_w as f64 || y >= full_h as f64 {
            return Err(Error::Validation(format!(
                "keypoint {k} at ({x}, {y}) is outside the {full_w}x{full_h} frame"
            )));
        }
        let (cx, cy) = ((x as usize) / grid_factor, (y as usize) / grid_factor);
        data.data_mut()[(cy * gw + cx) * d + k] = 1.0;
    }
    LabelGrid::new(gh, gw, d, LabelKind::Keypoint, data)
}

/// Bilinear upsample of per-position channel data (`gh x gw x ch`,
/// position-major) to `out_h x out_w`. Pixel centers map to grid
/// coordinates via (p + 0.5) / factor - 0.5.
fn upsample_bilinear(
    data: &[f32],
    gh: usize,
    gw: usize,
    ch: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; out_h * out_w * ch];
    let sy = gh as f64 / out_h as f64;
    let sx = gw as f64 / out_w as f64;
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (gh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(gh - 1);
        let wy = (fy - y0 as f64) as f32;
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (gw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(gw - 1);
            let wx = (fx - x0 as f64) as f32;
            let base = (y * out_w + x) * ch;
            for c in 0..ch {
                let v00 = data[(y0 * gw + x0) * ch + c];
                let v01 = data[(y0 * gw + x1) * ch + c];
                let v10 = data[(y1 * gw + x0) * ch + c];
                let v11 = data[(y1 * gw + x1) * ch + c];
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                out[base + c] = top + (bot - top) * wy;
            }
        }
    }
    out
}

fn upsample_nearest(
    data: &[f32],
    gh: usize,
    gw: usize,
    ch: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; out_h * out_w * ch];
    for y in 0..out_h {
        let gy = (y * gh / out_h).min(gh - 1);
        for x in 0..out_w {
            let gx = (x * gw / out_w).min(gw - 1);
            let src = (gy * gw + gx) * ch;
            let dst = (y * out_w + x) * ch;
            out[dst..dst + ch].copy_from_slice(&data[src..src + ch]);
        }
    }
    out
}

fn upsample(
    mode: Upsample,
    data: &[f32],
    gh: usize,
    gw: usize,
    ch: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    match mode {
        Upsample::Bilinear => upsample_bilinear(data, gh, gw, ch, out_h, out_w),
        Upsample::Nearest => upsample_nearest(data, gh, gw, ch, out_h, out_w),
    }
}

/// Upsample soft segment distributions to full resolution and take the
/// per-pixel argmax (ties to the lowest category).
///
/// Hard decode assigns every pixel its containing cell's distribution
/// (nearest upsampling). Bilinear interpolation of one-hot channels would
/// erode convex corners (the corner weight wx*wy dips below 0.5), breaking
/// the exact decode(encode(m)) = m round trip for cell-constant masks;
/// bilinear stays in use for continuous fields such as colorization ab.
pub fn decode_segments(soft: &LabelGrid<f32>, full_h: usize, full_w: usize) -> GrayImage {
    let up = upsample_nearest(
        soft.data.data(),
        soft.h,
        soft.w,
        soft.categories,
        full_h,
        full_w,
    );
    let mut img = GrayImage::new(full_w, full_h);
    for (p, probs) in up.chunks_exact(soft.categories).enumerate() {
        let mut best = 0;
        for (c, &v) in probs.iter().enumerate() {
            if v > probs[best] {
                best = c;
            }
        }
        img.data[p] = best as u8;
    }
    img
}

/// Per-channel argmax cell, reported at the cell center in pixels. An
/// all-zero channel keeps the previous coordinate with confidence 0.
pub fn decode_keypoints(
    soft: &LabelGrid<f32>,
    grid_factor: usize,
    previous: Option<&[KeypointPred]>,
) -> Vec<KeypointPred> {
    let (gh, gw, d) = (soft.h, soft.w, soft.categories);
    let mut out = Vec::with_capacity(d);
    for k in 0..d {
        let mut best = 0usize;
        let mut bv = f32::NEG_INFINITY;
        for p in 0..gh * gw {
            let v = soft.data.data()[p * d + k];
            if v > bv {
                bv = v;
                best = p;
            }
        }
        if bv <= 0.0 {
            let prev = previous.and_then(|pr| pr.get(k));
            out.push(KeypointPred {
                x: prev.map(|p| p.x).unwrap_or(0.0),
                y: prev.map(|p| p.y).unwrap_or(0.0),
                confidence: 0.0,
            });
            continue;
        }
        let (cy, cx) = (best / gw, best % gw);
        out.push(KeypointPred {
            x: (cx * grid_factor + grid_factor / 2) as f64,
            y: (cy * grid_factor + grid_factor / 2) as f64,
            confidence: bv,
        });
    }
    out
}

fn validate_frames(frames: &[Vec<f32>], net: &NetworkConfig) -> Result<()> {
    if frames.len() < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 frames, got {}",
            frames.len()
        )));
    }
    let hw = net.input_size * net.input_size;
    for (t, f) in frames.iter().enumerate() {
        if f.len() != hw {
            return Err(Error::Validation(format!(
                "frame {t} has {} pixels, expected {hw} ({}x{})",
                f.len(),
                net.input_size,
                net.input_size
            )));
        }
    }
    Ok(())
}

/// The shared recursion behind segment tracking, keypoint tracking and
/// colorization: propagate `initial` through every frame using a window of
/// min(N, t) previous frames as references.
pub fn propagate_sequence(
    params: &Parameters<f32>,
    frames: &[Vec<f32>],
    initial: LabelGrid<f32>,
    cfg: &TrackerConfig,
    net: &NetworkConfig,
) -> Result<Vec<LabelGrid<f32>>> {
    validate_frames(frames, net)?;
    cfg.validate(net)?;
    let hw = net.input_size * net.input_size;
    let t_len = net.num_frames;
    let mut labels: Vec<LabelGrid<f32>> = vec![initial];
    for t in 1..frames.len() {
        let w = cfg.window.min(t);
        let first_real_slot = t_len - 1 - w;
        let mut clip = Tensor::zeros(&[t_len, net.input_size, net.input_size]);
        for slot in 0..t_len {
            // Slots before the window repeat the oldest reference.
            let src = if slot < first_real_slot {
                t - w
            } else if slot < t_len - 1 {
                t - w + (slot - first_real_slot)
            } else {
                t
            };
            clip.data_mut()[slot * hw..(slot + 1) * hw].copy_from_slice(&frames[src]);
        }
        let grid = embednet::forward(params, &clip, net)?;
        let target = grid.frame(t_len - 1);
        let refs = grid.frame_range(first_real_slot, t_len - 1);
        let mut a = pointer::similarity(
            &target,
            &refs,
            &PointerConfig {
                temperature: cfg.temperature,
            },
        )?;
        a.target_frame = t;
        a.reference_frames = (t - w..t).collect();
        let window_labels: Vec<&LabelGrid<f32>> = labels[t - w..t].iter().collect();
        labels.push(pointer::propagate(&a, &window_labels)?);
    }
    Ok(labels)
}

/// Track segment masks or keypoints through a gray video.
pub fn track(
    params: &Parameters<f32>,
    frames: &[Vec<f32>],
    task: &TrackTask,
    cfg: &TrackerConfig,
    net: &NetworkConfig,
) -> Result<TrackResult> {
    let gf = net.grid_factor;
    let full = net.input_size;
    match task.kind {
        TaskKind::Segment => {
            let mask = task
                .initial_mask
                .as_ref()
                .ok_or_else(|| Error::Validation("segment task needs an initial mask".into()))?;
            if mask.w != full || mask.h != full {
                return Err(Error::Validation(format!(
                    "initial mask {}x{} does not match frames {full}x{full}",
                    mask.w, mask.h
                )));
            }
            let initial = encode_segments(mask, task.categories, gf)?;
            let soft = propagate_sequence(params, frames, initial, cfg, net)?;
            let mut masks = Vec::with_capacity(soft.len());
            masks.push(mask.clone()); // frame 0 output is the given labels
            for s in soft.iter().skip(1) {
                masks.push(decode_segments(s, full, full));
            }
            let confidence = soft.iter().map(|s| s.confidence()).collect();
            Ok(TrackResult {
                soft,
                decoded: Decoded::Masks(masks),
                confidence,
            })
        }
        TaskKind::Keypoint => {
            let initial = encode_keypoints(&task.initial_points, full, full, gf)?;
            let soft = propagate_sequence(params, frames, initial, cfg, net)?;
            let mut kps: Vec<Vec<KeypointPred>> = Vec::with_capacity(soft.len());
            kps.push(
                task.initial_points
                    .iter()
                    .map(|&(x, y)| KeypointPred {
                        x,
                        y,
                        confidence: 1.0,
                    })
                    .collect(),
            );
            for s in soft.iter().skip(1) {
                let prev = kps.last().map(|v| v.as_slice());
                kps.push(decode_keypoints(s, gf, prev));
            }
            let confidence = soft.iter().map(|s| s.confidence()).collect();
            Ok(TrackResult {
                soft,
                decoded: Decoded::Keypoints(kps),
                confidence,
            })
        }
        TaskKind::Color => Err(Error::Validation(
            "use colorize() for color propagation".into(),
        )),
    }
}

#[derive(Clone, Debug)]
pub struct ColorizeResult {
    pub frames: Vec<RgbImage>,
    pub soft: Vec<LabelGrid<f32>>,
    /// Per frame: argmax palette category per grid cell.
    pub hard_categories: Vec<Vec<u8>>,
}

/// Colorize a gray video by propagating the reference frame's quantized
/// colors, then recombining the decoded ab expectation with each frame's
/// own L channel.
pub fn colorize(
    params: &Parameters<f32>,
    frames: &[Vec<f32>],
    reference: &RgbImage,
    palette: &Palette,
    cfg: &TrackerConfig,
    net: &NetworkConfig,
) -> Result<ColorizeResult> {
    let full = net.input_size;
    if reference.w != full || reference.h != full {
        return Err(Error::Validation(format!(
            "reference frame {}x{} does not match network input {full}x{full}",
            reference.w, reference.h
        )));
    }
    let g = net.grid();
    let ab = crate::synth::ab_channels(reference);
    let pooled = chroma::downsample_ab(&ab, full, full, g, g)?;
    let qf = chroma::quantize(&pooled, g, g, palette);
    let indices: Vec<usize> = qf.indices.iter().map(|&i| i as usize).collect();
    let initial = LabelGrid::one_hot(g, g, palette.k(), LabelKind::Color, &indices)?;
    let soft = propagate_sequence(params, frames, initial, cfg, net)?;

    let mut out_frames = Vec::with_capacity(frames.len());
    let mut hard = Vec::with_capacity(frames.len());
    for (t, s) in soft.iter().enumerate() {
        hard.push(s.argmax().iter().map(|&c| c as u8).collect::<Vec<u8>>());
        // Expectation-decode the grid, upsample ab, reattach L.
        let dist: Vec<f64> = s.data.data().iter().map(|&v| v as f64).collect();
        let ab_grid = chroma::decode_soft(&dist, palette.k(), palette)?;
        let ab_grid32: Vec<f32> = ab_grid.iter().map(|&v| v as f32).collect();
        let ab_full = upsample(cfg.upsample, &ab_grid32, g, g, 2, full, full);
        let mut img = RgbImage::new(full, full);
        for p in 0..full * full {
            let l = (frames[t][p] as f64 + 1.0) * 50.0;
            let rgb = chroma::lab_to_rgb_pixel([
                l,
                ab_full[p * 2] as f64,
                ab_full[p * 2 + 1] as f64,
            ]);
            img.data[p * 3..p * 3 + 3].copy_from_slice(&rgb);
        }
        out_frames.push(img);
    }
    Ok(ColorizeResult {
        frames: out_frames,
        soft,
        hard_categories: hard,
    })
}

/// Gray channels of RGB frames, ready for the tracker.
pub fn gray_frames(frames: &[RgbImage]) -> Vec<Vec<f32>> {
    frames.iter().map(crate::synth::gray_channel).collect()
}

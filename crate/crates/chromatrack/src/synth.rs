//! Synthetic video generator: hard-edged colored shapes on solid or
//! drifting gradient backgrounds, with pixel-exact instance masks and
//! keypoints. Color is temporally coherent by construction, which is the
//! training signal.

use crate::chroma;
use crate::error::{Error, Result};
use crate::io::{GrayImage, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Rect { w: usize, h: usize },
    Circle { r: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Trajectory {
    Linear,
    /// Sinusoidal wobble on one axis added to the linear velocity.
    Sinusoidal { amplitude: f64, period: f64, axis: Axis },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    /// Fill color as sRGB; stays constant over the clip.
    pub rgb: [u8; 3],
    /// Center position at t = 0.
    pub start: (f64, f64),
    /// Linear velocity in pixels per frame.
    pub velocity: (f64, f64),
    pub trajectory: Trajectory,
    /// Higher depth renders in front.
    pub depth: usize,
}

impl ObjectSpec {
    pub fn center_at(&self, t: usize) -> (f64, f64) {
        let tf = t as f64;
        let (mut x, mut y) = (
            self.start.0 + self.velocity.0 * tf,
            self.start.1 + self.velocity.1 * tf,
        );
        if let Trajectory::Sinusoidal { amplitude, period, axis } = self.trajectory {
            let off = amplitude * (std::f64::consts::TAU * tf / period).sin();
            match axis {
                Axis::X => x += off,
                Axis::Y => y += off,
            }
        }
        (x, y)
    }

    fn half_extent(&self) -> (f64, f64) {
        match self.shape {
            Shape::Rect { w, h } => (w as f64 / 2.0, h as f64 / 2.0),
            Shape::Circle { r } => (r as f64, r as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Background {
    Solid { rgb: [u8; 3] },
    /// Vertical two-color gradient; `drift` shifts the phase per frame
    /// (the dynamic-background stressor).
    Gradient { top: [u8; 3], bottom: [u8; 3], drift: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub canvas: usize,
    pub background: Background,
    pub objects: Vec<ObjectSpec>,
    pub num_frames: usize,
    pub seed: u64,
    /// Metadata: the last object is an occluding bar.
    #[serde(default)]
    pub has_occluder: bool,
    /// Metadata: these two object indices share a color and cross paths.
    #[serde(default)]
    pub same_color_pair: Option<(usize, usize)>,
}

/// Rendered clip plus ground truth. Keypoints are stored per frame as a
/// flat list of (x, y), five per object (center then four extremes), in
/// object order.
#[derive(Clone, Debug)]
pub struct LabeledClip {
    pub frames: Vec<RgbImage>,
    pub masks: Vec<GrayImage>,
    pub keypoints: Vec<Vec<(f64, f64)>>,
    pub spec: SceneSpec,
}

pub const KEYPOINTS_PER_OBJECT: usize = 5;

fn validate(spec: &SceneSpec) -> Result<()> {
    if spec.canvas < 8 {
        return Err(Error::Validation(format!(
            "canvas {} too small",
            spec.canvas
        )));
    }
    if spec.num_frames == 0 {
        return Err(Error::Validation("num_frames must be >= 1".into()));
    }
    if spec.objects.len() > 254 {
        return Err(Error::Validation("too many objects for 8-bit masks".into()));
    }
    for (i, o) in spec.objects.iter().enumerate() {
        let degenerate = match o.shape {
            Shape::Rect { w, h } => w == 0 || h == 0,
            Shape::Circle { r } => r == 0,
        };
        if degenerate {
            return Err(Error::Validation(format!("object {i} has zero size")));
        }
    }
    // Partially-in-frame for >= 80% of frames, per object.
    let c = spec.canvas as f64;
    for (i, o) in spec.objects.iter().enumerate() {
        let (hx, hy) = o.half_extent();
        let visible = (0..spec.num_frames)
            .filter(|&t| {
                let (x, y) = o.center_at(t);
                x + hx > 0.0 && x - hx < c && y + hy > 0.0 && y - hy < c
            })
            .count();
        if (visible as f64) < 0.8 * spec.num_frames as f64 {
            return Err(Error::Validation(format!(
                "object {i} is in-frame for only {visible}/{} frames",
                spec.num_frames
            )));
        }
    }
    Ok(())
}

fn paint_background(img: &mut RgbImage, bg: &Background, t: usize) {
    match bg {
        Background::Solid { rgb } => {
            for p in img.data.chunks_exact_mut(3) {
                p.copy_from_slice(rgb);
            }
        }
        Background::Gradient { top, bottom, drift } => {
            let h = img.h;
            let span = (h.max(2) - 1) as f64;
            for y in 0..h {
                // Triangle-wave phase keeps the drifting gradient smooth.
                let pos = (y as f64 + drift * t as f64).rem_euclid(2.0 * span);
                let f = if pos > span { 2.0 * span - pos } else { pos } / span;
                let px = [
                    (top[0] as f64 + (bottom[0] as f64 - top[0] as f64) * f).round() as u8,
                    (top[1] as f64 + (bottom[1] as f64 - top[1] as f64) * f).round() as u8,
                    (top[2] as f64 + (bottom[2] as f64 - top[2] as f64) * f).round() as u8,
                ];
                for x in 0..img.w {
                    img.set_pixel(x, y, px);
                }
            }
        }
    }
}

/// Painted pixel bounds of an object at frame `t`, clipped to the canvas.
fn paint_object(
    img: &mut RgbImage,
    mask: &mut GrayImage,
    obj: &ObjectSpec,
    id: u8,
    t: usize,
) {
    let canvas = img.w as isize;
    let (cx, cy) = obj.center_at(t);
    match obj.shape {
        Shape::Rect { w, h } => {
            let x0 = (cx - w as f64 / 2.0).round() as isize;
            let y0 = (cy - h as f64 / 2.0).round() as isize;
            for y in y0.max(0)..(y0 + h as isize).min(canvas) {
                for x in x0.max(0)..(x0 + w as isize).min(canvas) {
                    img.set_pixel(x as usize, y as usize, obj.rgb);
                    mask.set(x as usize, y as usize, id);
                }
            }
        }
        Shape::Circle { r } => {
            let (icx, icy) = (cx.round() as isize, cy.round() as isize);
            let ir = r as isize;
            for y in (icy - ir).max(0)..(icy + ir + 1).min(canvas) {
                for x in (icx - ir).max(0)..(icx + ir + 1).min(canvas) {
                    let (dx, dy) = (x - icx, y - icy);
                    if dx * dx + dy * dy <= ir * ir {
                        img.set_pixel(x as usize, y as usize, obj.rgb);
                        mask.set(x as usize, y as usize, id);
                    }
                }
            }
        }
    }
}

fn object_keypoints(obj: &ObjectSpec, t: usize) -> [(f64, f64); KEYPOINTS_PER_OBJECT] {
    let (cx, cy) = obj.center_at(t);
    match obj.shape {
        Shape::Rect { w, h } => {
            // Corner pixels of the painted rectangle, inset to stay on the
            // shape.
            let x0 = (cx - w as f64 / 2.0).round();
            let y0 = (cy - h as f64 / 2.0).round();
            let x1 = x0 + w as f64 - 1.0;
            let y1 = y0 + h as f64 - 1.0;
            [
                (cx.round(), cy.round()),
                (x0, y0),
                (x1, y0),
                (x0, y1),
                (x1, y1),
            ]
        }
        Shape::Circle { r } => {
            let (rx, ry) = (cx.round(), cy.round());
            let rr = (r - 1).max(0) as f64;
            [
                (rx, ry),
                (rx - rr, ry),
                (rx + rr, ry),
                (rx, ry - rr),
                (rx, ry + rr),
            ]
        }
    }
}

/// Deterministic rendering of a scene; masks and keypoints are exactly
/// consistent with the painted pixels.
pub fn generate(spec: &SceneSpec) -> Result<LabeledClip> {
    validate(spec)?;
    let mut order: Vec<usize> = (0..spec.objects.len()).collect();
    // Stable sort: equal depths keep object order, later paints in front.
    order.sort_by_key(|&i| spec.objects[i].depth);
    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut masks = Vec::with_capacity(spec.num_frames);
    let mut keypoints = Vec::with_capacity(spec.num_frames);
    for t in 0..spec.num_frames {
        let mut img = RgbImage::new(spec.canvas, spec.canvas);
        let mut mask = GrayImage::new(spec.canvas, spec.canvas);
        paint_background(&mut img, &spec.background, t);
        for &i in &order {
            paint_object(&mut img, &mut mask, &spec.objects[i], (i + 1) as u8, t);
        }
        let mut kps = Vec::with_capacity(spec.objects.len() * KEYPOINTS_PER_OBJECT);
        for obj in &spec.objects {
            kps.extend(object_keypoints(obj, t));
        }
        frames.push(img);
        masks.push(mask);
        keypoints.push(kps);
    }
    Ok(LabeledClip {
        frames,
        masks,
        keypoints,
        spec: spec.clone(),
    })
}

// Object fill colors: saturated, spread over hue, and varied in lightness
// so the gray channel carries appearance.
pub const OBJECT_COLORS: [[u8; 3]; 10] = [
    [180, 40, 40],
    [230, 130, 30],
    [230, 210, 40],
    [60, 160, 60],
    [40, 170, 160],
    [50, 90, 200],
    [140, 70, 190],
    [200, 60, 150],
    [130, 85, 40],
    [150, 210, 60],
];

pub const BACKGROUND_COLORS: [[u8; 3]; 6] = [
    [60, 70, 90],
    [210, 200, 180],
    [120, 140, 120],
    [150, 170, 200],
    [85, 60, 50],
    [190, 160, 170],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Plain,
    Hard,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Preset::Plain),
            "hard" => Ok(Preset::Hard),
            other => Err(Error::Validation(format!(
                "unknown preset {other:?} (expected plain or hard)"
            ))),
        }
    }
}

pub const DEFAULT_CANVAS: usize = 64;
pub const DEFAULT_FRAMES: usize = 24;

fn clip_rng(preset: Preset, seed: u64, index: usize) -> ChaCha8Rng {
    let tag = match preset {
        Preset::Plain => 0x706C61696Eu64,
        Preset::Hard => 0x68617264u64,
    };
    ChaCha8Rng::seed_from_u64(
        seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03),
    )
}

/// Start/velocity pair keeping the object center inside the margin for the
/// whole clip.
fn place(
    rng: &mut ChaCha8Rng,
    canvas: f64,
    half: f64,
    frames: usize,
    speed_range: (f64, f64),
) -> ((f64, f64), (f64, f64)) {
    let speed = rng.random_range(speed_range.0..speed_range.1);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let v = (speed * angle.cos(), speed * angle.sin());
    let t_end = (frames - 1) as f64;
    let margin = half + 1.0;
    let pick = |v1: f64, rng: &mut ChaCha8Rng| {
        let lo = margin + (-v1 * t_end).max(0.0);
        let hi = canvas - margin - (v1 * t_end).max(0.0);
        if lo >= hi {
            canvas / 2.0
        } else {
            rng.random_range(lo..hi)
        }
    };
    let x = pick(v.0, rng);
    let y = pick(v.1, rng);
    ((x, y), v)
}

fn random_shape(rng: &mut ChaCha8Rng) -> Shape {
    if rng.random_bool(0.5) {
        Shape::Rect {
            w: rng.random_range(14..23),
            h: rng.random_range(14..23),
        }
    } else {
        Shape::Circle {
            r: rng.random_range(7..12),
        }
    }
}

/// Deterministic scene for dataset position `index`.
pub fn clip_spec(preset: Preset, seed: u64, index: usize) -> SceneSpec {
    let mut rng = clip_rng(preset, seed, index);
    let canvas = DEFAULT_CANVAS;
    let frames = DEFAULT_FRAMES;
    let c = canvas as f64;
    match preset {
        Preset::Plain => {
            let n_objects = rng.random_range(1..3usize);
            let bg = BACKGROUND_COLORS[rng.random_range(0..BACKGROUND_COLORS.len())];
            let mut colors: Vec<usize> = (0..OBJECT_COLORS.len()).collect();
            let mut objects = Vec::new();
            for d in 0..n_objects {
                let shape = random_shape(&mut rng);
                let half = match shape {
                    Shape::Rect { w, h } => (w.max(h) as f64) / 2.0,
                    Shape::Circle { r } => r as f64,
                };
                let (start, velocity) = place(&mut rng, c, half, frames, (0.8, 1.6));
                let color = colors.remove(rng.random_range(0..colors.len()));
                objects.push(ObjectSpec {
                    shape,
                    rgb: OBJECT_COLORS[color],
                    start,
                    velocity,
                    trajectory: Trajectory::Linear,
                    depth: d,
                });
            }
            SceneSpec {
                canvas,
                background: Background::Solid { rgb: bg },
                objects,
                num_frames: frames,
                seed,
                has_occluder: false,
                same_color_pair: None,
            }
        }
        Preset::Hard => {
            let mut objects = Vec::new();
            let same_color_pair = index % 2 == 0;
            let bg_top = BACKGROUND_COLORS[rng.random_range(0..BACKGROUND_COLORS.len())];
            let bg_bottom = BACKGROUND_COLORS[rng.random_range(0..BACKGROUND_COLORS.len())];
            let mut colors: Vec<usize> = (0..OBJECT_COLORS.len()).collect();
            if same_color_pair {
                // Two identical objects crossing horizontally at adjacent
                // heights.
                let color = OBJECT_COLORS[colors.remove(rng.random_range(0..colors.len()))];
                let shape = Shape::Rect {
                    w: rng.random_range(12..17),
                    h: rng.random_range(12..17),
                };
                let speed = rng.random_range(1.2..1.8);
                let y_a = rng.random_range(18.0..26.0);
                let y_b = y_a + rng.random_range(14.0..20.0);
                let span = speed * (frames - 1) as f64;
                let x_a = (c - span) / 2.0;
                objects.push(ObjectSpec {
                    shape,
                    rgb: color,
                    start: (x_a.max(9.0), y_a),
                    velocity: (speed, 0.0),
                    trajectory: Trajectory::Linear,
                    depth: 0,
                });
                objects.push(ObjectSpec {
                    shape,
                    rgb: color,
                    start: ((c - x_a).min(c - 9.0), y_b),
                    velocity: (-speed, 0.0),
                    trajectory: Trajectory::Linear,
                    depth: 1,
                });
            }
            let extra = rng.random_range(
                (3usize.saturating_sub(objects.len()))..=(5 - objects.len()),
            );
            for e in 0..extra {
                let shape = random_shape(&mut rng);
                let half = match shape {
                    Shape::Rect { w, h } => (w.max(h) as f64) / 2.0,
                    Shape::Circle { r } => r as f64,
                };
                let (start, velocity) = place(&mut rng, c, half, frames, (0.6, 1.8));
                let trajectory = if rng.random_bool(0.4) {
                    Trajectory::Sinusoidal {
                        amplitude: rng.random_range(2.0..5.0),
                        period: rng.random_range(8.0..16.0),
                        axis: if rng.random_bool(0.5) { Axis::X } else { Axis::Y },
                    }
                } else {
                    Trajectory::Linear
                };
                let color = colors.remove(rng.random_range(0..colors.len()));
                objects.push(ObjectSpec {
                    shape,
                    rgb: OBJECT_COLORS[color],
                    start,
                    velocity,
                    trajectory,
                    depth: 2 + e,
                });
            }
            // Occluding bar sweeping across, always in front.
            let has_occluder = rng.random_bool(0.6);
            if has_occluder {
                let w = rng.random_range(8..12);
                let speed = rng.random_range(1.5..2.2);
                let from_left = rng.random_bool(0.5);
                let depth = 2 + extra;
                objects.push(ObjectSpec {
                    shape: Shape::Rect { w, h: 44 },
                    rgb: OBJECT_COLORS[colors.remove(rng.random_range(0..colors.len()))],
                    start: (
                        if from_left { 8.0 } else { c - 8.0 },
                        rng.random_range(24.0..40.0),
                    ),
                    velocity: (if from_left { speed } else { -speed }, 0.0),
                    trajectory: Trajectory::Linear,
                    depth,
                });
            }
            SceneSpec {
                canvas,
                background: Background::Gradient {
                    top: bg_top,
                    bottom: bg_bottom,
                    drift: rng.random_range(0.3..0.9),
                },
                objects,
                num_frames: frames,
                seed,
                has_occluder,
                same_color_pair: if same_color_pair { Some((0, 1)) } else { None },
            }
        }
    }
}

pub fn dataset_specs(n: usize, preset: Preset, seed: u64) -> Vec<SceneSpec> {
    (0..n).map(|i| clip_spec(preset, seed, i)).collect()
}

#[derive(Serialize, Deserialize)]
struct KeypointFile {
    frames: Vec<KeypointFrame>,
}

#[derive(Serialize, Deserialize)]
struct KeypointFrame {
    points: Vec<[f64; 2]>,
}

pub fn write_keypoints(path: &Path, frames: &[Vec<(f64, f64)>]) -> Result<()> {
    let file = KeypointFile {
        frames: frames
            .iter()
            .map(|pts| KeypointFrame {
                points: pts.iter().map(|&(x, y)| [x, y]).collect(),
            })
            .collect(),
    };
    let json = serde_json::to_vec_pretty(&file)?;
    crate::io::atomic_write(path, &json)
}

pub fn read_keypoints(path: &Path) -> Result<Vec<Vec<(f64, f64)>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: KeypointFile = serde_json::from_slice(&bytes)?;
    Ok(file
        .frames
        .into_iter()
        .map(|f| f.points.into_iter().map(|p| (p[0], p[1])).collect())
        .collect())
}

/// Write one clip in the dataset layout:
/// `frames/%03d.ppm`, `masks/%03d.pgm`, `keypoints.json`, `spec.json`.
pub fn write_clip(dir: &Path, clip: &LabeledClip) -> Result<()> {
    let frames_dir = dir.join("frames");
    let masks_dir = dir.join("masks");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    for (t, frame) in clip.frames.iter().enumerate() {
        crate::io::write_ppm(frames_dir.join(format!("{t:03}.ppm")), frame)?;
    }
    for (t, mask) in clip.masks.iter().enumerate() {
        crate::io::write_pgm(masks_dir.join(format!("{t:03}.pgm")), mask)?;
    }
    write_keypoints(&dir.join("keypoints.json"), &clip.keypoints)?;
    let spec_json = serde_json::to_vec_pretty(&clip.spec)?;
    crate::io::atomic_write(&dir.join("spec.json"), &spec_json)?;
    Ok(())
}

/// Render and write `clip_%04d` directories in parallel.
pub fn write_dataset(dir: &Path, specs: &[SceneSpec]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    specs
        .par_iter()
        .enumerate()
        .try_for_each(|(i, spec)| -> Result<()> {
            let clip = generate(spec)?;
            write_clip(&dir.join(format!("clip_{i:04}")), &clip)
        })
}

/// Grid-aligned static scene: rectangle edges land on grid-cell borders so
/// encode/decode round trips exactly. Used for the static evaluation set.
pub fn static_aligned_spec(seed: u64, grid_factor: usize, num_frames: usize) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5354_4154);
    let canvas = DEFAULT_CANVAS;
    let g = grid_factor;
    let cells = canvas / g;
    let mut objects = Vec::new();
    let n = rng.random_range(1..3usize);
    let mut colors: Vec<usize> = (0..OBJECT_COLORS.len()).collect();
    let mut taken: Vec<(usize, usize, usize, usize)> = Vec::new();
    for d in 0..n {
        // Rectangle spanning whole grid cells.
        for _attempt in 0..20 {
            let cw = rng.random_range(2..4usize);
            let ch = rng.random_range(2..4usize);
            let cx = rng.random_range(0..cells - cw + 1);
            let cy = rng.random_range(0..cells - ch + 1);
            let overlaps = taken.iter().any(|&(ox, oy, ow, oh)| {
                cx < ox + ow && ox < cx + cw && cy < oy + oh && oy < cy + ch
            });
            if overlaps {
                continue;
            }
            taken.push((cx, cy, cw, ch));
            let (w, h) = (cw * g, ch * g);
            objects.push(ObjectSpec {
                shape: Shape::Rect { w, h },
                rgb: OBJECT_COLORS[colors.remove(rng.random_range(0..colors.len()))],
                // Pixel span [cx*g, cx*g + w); its center is at
                // cx*g + w/2, which round() keeps exact.
                start: ((cx * g + w / 2) as f64, (cy * g + h / 2) as f64),
                velocity: (0.0, 0.0),
                trajectory: Trajectory::Linear,
                depth: d,
            });
            break;
        }
    }
    SceneSpec {
        canvas,
        background: Background::Solid {
            rgb: BACKGROUND_COLORS[rng.random_range(0..BACKGROUND_COLORS.len())],
        },
        objects,
        num_frames,
        seed,
        has_occluder: false,
        same_color_pair: None,
    }
}

/// L channel of a frame rescaled to [-1, 1] (the network input).
pub fn gray_channel(frame: &RgbImage) -> Vec<f32> {
    frame
        .data
        .chunks_exact(3)
        .map(|p| {
            let lab = chroma::rgb_to_lab_pixel([p[0], p[1], p[2]]);
            (lab[0] / 50.0 - 1.0) as f32
        })
        .collect()
}

/// The ab channels of a frame as a flat `h x w x 2` f64 image.
pub fn ab_channels(frame: &RgbImage) -> Vec<f64> {
    frame
        .data
        .chunks_exact(3)
        .flat_map(|p| {
            let lab = chroma::rgb_to_lab_pixel([p[0], p[1], p[2]]);
            [lab[1], lab[2]]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_spec(vx: f64) -> SceneSpec {
        SceneSpec {
            canvas: 64,
            background: Background::Solid { rgb: [60, 70, 90] },
            objects: vec![ObjectSpec {
                shape: Shape::Rect { w: 16, h: 16 },
                rgb: [180, 40, 40],
                start: (20.0, 32.0),
                velocity: (vx, 0.0),
                trajectory: Trajectory::Linear,
                depth: 0,
            }],
            num_frames: 8,
            seed: 0,
            has_occluder: false,
            same_color_pair: None,
        }
    }

    fn mask_bbox(mask: &GrayImage, id: u8) -> Option<(usize, usize, usize, usize)> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..mask.h {
            for x in 0..mask.w {
                if mask.get(x, y) == id {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then_some((x0, y0, x1, y1))
    }

    #[test]
    fn static_square_is_constant() {
        let clip = generate(&square_spec(0.0)).unwrap();
        for t in 1..clip.frames.len() {
            assert_eq!(clip.frames[t], clip.frames[0]);
            assert_eq!(clip.masks[t], clip.masks[0]);
        }
    }

    #[test]
    fn moving_square_translates_exactly() {
        let clip = generate(&square_spec(2.0)).unwrap();
        let b0 = mask_bbox(&clip.masks[0], 1).unwrap();
        for t in 1..clip.frames.len() {
            let bt = mask_bbox(&clip.masks[t], 1).unwrap();
            assert_eq!(bt.0, b0.0 + 2 * t, "frame {t}");
            assert_eq!(bt.1, b0.1);
            assert_eq!(bt.2, b0.2 + 2 * t);
        }
    }

    #[test]
    fn depth_compositing_front_wins() {
        let mut spec = square_spec(0.0);
        spec.objects.push(ObjectSpec {
            shape: Shape::Rect { w: 16, h: 16 },
            rgb: [50, 90, 200],
            start: (26.0, 32.0), // overlaps the first square
            velocity: (0.0, 0.0),
            trajectory: Trajectory::Linear,
            depth: 5,
        });
        let clip = generate(&spec).unwrap();
        let mask = &clip.masks[0];
        // Overlap region must carry the front object's id (2), never 1.
        let mut overlap = 0;
        for y in 0..64 {
            for x in 0..64 {
                let in_a = (12..28).contains(&x) && (24..40).contains(&y);
                let in_b = (18..34).contains(&x) && (24..40).contains(&y);
                if in_a && in_b {
                    overlap += 1;
                    assert_eq!(mask.get(x, y), 2);
                    assert_eq!(clip.frames[0].pixel(x, y), [50, 90, 200]);
                }
            }
        }
        assert!(overlap > 0);
    }

    #[test]
    fn generation_is_deterministic_per_seed_and_index() {
        let a = generate(&clip_spec(Preset::Hard, 9, 4)).unwrap();
        let b = generate(&clip_spec(Preset::Hard, 9, 4)).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa, fb);
        }
        for (ma, mb) in a.masks.iter().zip(&b.masks) {
            assert_eq!(ma, mb);
        }
        assert_eq!(a.keypoints, b.keypoints);
    }

    #[test]
    fn hard_preset_has_same_color_pair_each_ten() {
        for base in 0..3 {
            let found = (base * 10..(base + 1) * 10)
                .any(|i| clip_spec(Preset::Hard, 1, i).same_color_pair.is_some());
            assert!(found);
        }
    }

    #[test]
    fn same_color_pair_objects_share_color_and_cross() {
        let spec = clip_spec(Preset::Hard, 3, 0);
        let (a, b) = spec.same_color_pair.unwrap();
        assert_eq!(spec.objects[a].rgb, spec.objects[b].rgb);
        // Horizontally opposed velocities.
        assert!(spec.objects[a].velocity.0 * spec.objects[b].velocity.0 < 0.0);
        // They swap sides over the clip.
        let xa0 = spec.objects[a].center_at(0).0;
        let xb0 = spec.objects[b].center_at(0).0;
        let xat = spec.objects[a].center_at(spec.num_frames - 1).0;
        let xbt = spec.objects[b].center_at(spec.num_frames - 1).0;
        assert!((xa0 - xb0).signum() != (xat - xbt).signum());
    }

    #[test]
    fn object_pixels_keep_identical_color_every_frame() {
        let clip = generate(&clip_spec(Preset::Plain, 5, 2)).unwrap();
        for (t, mask) in clip.masks.iter().enumerate() {
            for y in 0..mask.h {
                for x in 0..mask.w {
                    let id = mask.get(x, y);
                    if id > 0 {
                        assert_eq!(
                            clip.frames[t].pixel(x, y),
                            clip.spec.objects[(id - 1) as usize].rgb
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn quantized_object_category_is_constant_across_frames() {
        // Fit a palette on the clip's own ab samples, then check every
        // object keeps a single category over time.
        let clip = generate(&clip_spec(Preset::Plain, 6, 1)).unwrap();
        let mut samples = Vec::new();
        for frame in &clip.frames {
            let ab = ab_channels(frame);
            samples.extend(ab.chunks_exact(2).step_by(17).map(|p| [p[0], p[1]]));
        }
        // A plain clip holds only a few distinct colors; size k to them.
        let mut distinct: Vec<[f64; 2]> = Vec::new();
        for &s in &samples {
            if !distinct.contains(&s) {
                distinct.push(s);
            }
        }
        let k = distinct.len().clamp(2, 8);
        let palette = crate::chroma::fit_palette(&samples, k, 0, 30).unwrap();
        for (i, obj) in clip.spec.objects.iter().enumerate() {
            let lab = crate::chroma::rgb_to_lab_pixel(obj.rgb);
            let want = palette.nearest([lab[1], lab[2]]);
            for (t, mask) in clip.masks.iter().enumerate() {
                for y in 0..mask.h {
                    for x in 0..mask.w {
                        if mask.get(x, y) == (i + 1) as u8 {
                            let p = clip.frames[t].pixel(x, y);
                            let lab = crate::chroma::rgb_to_lab_pixel(p);
                            assert_eq!(palette.nearest([lab[1], lab[2]]), want);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn keypoints_inside_own_mask_when_unoccluded() {
        for idx in 0..4 {
            let clip = generate(&clip_spec(Preset::Hard, 2, idx)).unwrap();
            for (t, kps) in clip.keypoints.iter().enumerate() {
                for (k, &(x, y)) in kps.iter().enumerate() {
                    let obj = k / KEYPOINTS_PER_OBJECT;
                    let (xi, yi) = (x.round() as isize, y.round() as isize);
                    if xi < 0 || yi < 0 || xi >= 64 || yi >= 64 {
                        continue;
                    }
                    let got = clip.masks[t].get(xi as usize, yi as usize);
                    // Own id, or occluded by a deeper object; never raw
                    // background.
                    assert!(
                        got != 0,
                        "clip {idx} frame {t} keypoint {k} of object {obj} on background"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_size_object_is_rejected() {
        let mut spec = square_spec(0.0);
        spec.objects[0].shape = Shape::Rect { w: 0, h: 4 };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn static_aligned_scene_is_cell_constant() {
        let spec = static_aligned_spec(4, 8, 6);
        let clip = generate(&spec).unwrap();
        let mask = &clip.masks[0];
        // Every 8x8 cell is a single instance value.
        for cy in 0..8 {
            for cx in 0..8 {
                let v = mask.get(cx * 8, cy * 8);
                for dy in 0..8 {
                    for dx in 0..8 {
                        assert_eq!(mask.get(cx * 8 + dx, cy * 8 + dy), v);
                    }
                }
            }
        }
        for t in 1..clip.frames.len() {
            assert_eq!(clip.masks[t], clip.masks[0]);
        }
    }

    #[test]
    fn keypoint_json_round_trip() {
        let clip = generate(&square_spec(1.0)).unwrap();
        let dir = std::env::temp_dir().join(format!("synth-kp-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("kp.json");
        write_keypoints(&p, &clip.keypoints).unwrap();
        let back = read_keypoints(&p).unwrap();
        assert_eq!(back, clip.keypoints);
    }
}

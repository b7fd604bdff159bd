//! The embedding network: a shared per-frame 2D encoder, spatial-coordinate
//! concatenation, and a dilated stack alternating spatial and temporal
//! convolutions, ending in a linear projection to D dimensions per grid
//! cell.

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const BN_EPS: f64 = 1e-5;
/// Momentum for running-statistic updates during training.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Square frame edge in pixels.
    pub input_size: usize,
    /// Downsample ratio from pixels to grid cells.
    pub grid_factor: usize,
    /// Embedding dimensionality D.
    pub embed_dim: usize,
    /// Channel widths of the stride-2 encoder stages; one stage per factor
    /// of two in `grid_factor`.
    pub encoder_channels: Vec<usize>,
    /// Dilations of the spatial convolutions in the cross-frame stack.
    pub dilations: Vec<usize>,
    /// Clip length consumed per forward pass (references + target).
    pub num_frames: usize,
    /// Standard deviation of the Gaussian weight initialization.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_size: 64,
            grid_factor: 8,
            embed_dim: 32,
            encoder_channels: vec![16, 32, 64],
            dilations: vec![1, 2, 4],
            num_frames: 4,
            init_std: 0.05,
            seed: 7,
        }
    }
}

impl NetworkConfig {
    /// Tiny configuration used by the gradient-integrity checks.
    pub fn tiny() -> Self {
        NetworkConfig {
            input_size: 16,
            grid_factor: 4,
            embed_dim: 4,
            encoder_channels: vec![4, 8],
            dilations: vec![1, 2],
            num_frames: 4,
            init_std: 0.1,
            seed: 3,
        }
    }

    pub fn grid(&self) -> usize {
        self.input_size / self.grid_factor
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.grid_factor == 0 || self.input_size % self.grid_factor != 0
        {
            return Err(Error::Validation(format!(
                "input_size {} must be a positive multiple of grid_factor {}",
                self.input_size, self.grid_factor
            )));
        }
        let stages = self.encoder_channels.len();
        if stages == 0 || (1usize << stages) != self.grid_factor {
            return Err(Error::Validation(format!(
                "grid_factor {} needs exactly log2(grid_factor) encoder stages, got {stages}",
                self.grid_factor
            )));
        }
        if self.embed_dim < 2 {
            return Err(Error::Validation(format!(
                "embed_dim must be >= 2, got {}",
                self.embed_dim
            )));
        }
        if self.num_frames < 2 {
            return Err(Error::Validation(format!(
                "num_frames must be >= 2, got {}",
                self.num_frames
            )));
        }
        if self.dilations.is_empty() || self.dilations.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!(
                "dilations must be non-empty and positive, got {:?}",
                self.dilations
            )));
        }
        if !self.init_std.is_finite() || self.init_std < 0.0 {
            return Err(Error::Validation(format!(
                "init_std must be finite and >= 0, got {}",
                self.init_std
            )));
        }
        Ok(())
    }

    /// Channel width flowing through the cross-frame stack.
    fn stack_width(&self) -> usize {
        *self.encoder_channels.last().unwrap()
    }
}

/// Named weights (trainable) and normalization buffers (running stats).
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T: Scalar> {
    pub weights: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Parameters<T> {
    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            weights: self.weights.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.values().map(|t| t.numel()).sum()
    }
}

/// Per-frame grid of D-dimensional embeddings, laid out `T x H' x W' x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingGrid<T: Scalar> {
    pub values: Tensor<T>,
    pub frame_indices: Vec<usize>,
}

impl<T: Scalar> EmbeddingGrid<T> {
    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn grid_h(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn grid_w(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[3]
    }

    /// Embeddings of one frame as `H' x W' x D`.
    pub fn frame(&self, t: usize) -> Tensor<T> {
        let s = self.values.shape();
        let chunk = s[1] * s[2] * s[3];
        Tensor::new(&[s[1], s[2], s[3]], self.values.data()[t * chunk..(t + 1) * chunk].to_vec())
            .expect("frame slice")
    }

    /// Embeddings of a frame range as `N x H' x W' x D`.
    pub fn frame_range(&self, lo: usize, hi: usize) -> Tensor<T> {
        let s = self.values.shape();
        let chunk = s[1] * s[2] * s[3];
        Tensor::new(
            &[hi - lo, s[1], s[2], s[3]],
            self.values.data()[lo * chunk..hi * chunk].to_vec(),
        )
        .expect("frame range slice")
    }
}

struct LayerDef {
    name: String,
    kind: LayerKind,
}

enum LayerKind {
    /// Stride-2 3x3 encoder convolution.
    Encoder { c_in: usize, c_out: usize },
    /// Dilated 3x3 spatial convolution in the stack.
    Spatial { c_in: usize, c_out: usize, dilation: usize },
    /// 3-tap temporal convolution in the stack.
    Temporal { c: usize },
    /// Final 1x1 projection to the embedding dimension.
    Project { c_in: usize, c_out: usize },
}

fn layer_defs(cfg: &NetworkConfig) -> Vec<LayerDef> {
    let mut defs = Vec::new();
    let mut c_in = 1;
    for (i, &c_out) in cfg.encoder_channels.iter().enumerate() {
        defs.push(LayerDef {
            name: format!("enc{i}"),
            kind: LayerKind::Encoder { c_in, c_out },
        });
        c_in = c_out;
    }
    let width = cfg.stack_width();
    let mut stack_in = width + 2; // coordinate channels join here
    for (j, &d) in cfg.dilations.iter().enumerate() {
        defs.push(LayerDef {
            name: format!("stack{j}.sp"),
            kind: LayerKind::Spatial {
                c_in: stack_in,
                c_out: width,
                dilation: d,
            },
        });
        defs.push(LayerDef {
            name: format!("stack{j}.tm"),
            kind: LayerKind::Temporal { c: width },
        });
        stack_in = width;
    }
    defs.push(LayerDef {
        name: "proj".into(),
        kind: LayerKind::Project {
            c_in: width,
            c_out: cfg.embed_dim,
        },
    });
    defs
}

/// Gaussian-initialize all weights; biases zero, normalization scales one,
/// running statistics at (0, 1). Deterministic in the config seed.
pub fn build<T: Scalar>(cfg: &NetworkConfig) -> Result<Parameters<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Box-Muller; two uniforms per normal draw keeps the stream simple.
    let mut gauss = move || {
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    let std = cfg.init_std;
    let mut weights = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for def in layer_defs(cfg) {
        let (w_shape, c_out, has_bn): (Vec<usize>, usize, bool) = match def.kind {
            LayerKind::Encoder { c_in, c_out } => (vec![c_out, c_in, 3, 3], c_out, true),
            LayerKind::Spatial { c_in, c_out, .. } => (vec![c_out, c_in, 3, 3], c_out, true),
            LayerKind::Temporal { c } => (vec![c, c, 3], c, true),
            LayerKind::Project { c_in, c_out } => (vec![c_out, c_in, 1, 1], c_out, false),
        };
        let w = Tensor::from_fn(&w_shape, |_| T::from_f64(gauss() * std));
        weights.insert(format!("{}.w", def.name), w);
        weights.insert(format!("{}.b", def.name), Tensor::zeros(&[c_out]));
        if has_bn {
            weights.insert(format!("{}.bn.gamma", def.name), Tensor::full(&[c_out], T::one()));
            weights.insert(format!("{}.bn.beta", def.name), Tensor::zeros(&[c_out]));
            buffers.insert(format!("{}.bn.mean", def.name), Tensor::zeros(&[c_out]));
            buffers.insert(format!("{}.bn.var", def.name), Tensor::full(&[c_out], T::one()));
        }
    }
    Ok(Parameters { weights, buffers })
}

/// Two-channel coordinate grid in [-1, 1]: channel 0 varies along x
/// (width), channel 1 along y (height); corners land exactly on +-1 and a
/// size-1 axis collapses to 0.
pub fn coord_grid<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    assert!(h >= 1 && w >= 1);
    let axis = |n: usize, i: usize| -> f64 {
        if n == 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (n - 1) as f64
        }
    };
    Tensor::from_fn(&[2, h, w], |flat| {
        let (c, rest) = (flat / (h * w), flat % (h * w));
        let (y, x) = (rest / w, rest % w);
        T::from_f64(if c == 0 { axis(w, x) } else { axis(h, y) })
    })
}

/// Tape handles for registered parameters.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Put every weight on the tape (with gradients when `trainable`).
pub fn register_params<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Parameters<T>,
    trainable: bool,
) -> ParamVars {
    let mut vars = BTreeMap::new();
    for (name, tensor) in &params.weights {
        let mut t = tensor.clone();
        t.requires_grad = trainable;
        vars.insert(name.clone(), tape.leaf(t));
    }
    ParamVars { vars }
}

pub struct ForwardOut<T: Scalar> {
    /// Embeddings on the tape, shaped `T x D x H' x W'`.
    pub emb: Var,
    /// Batch statistics per normalization layer, in layer order; empty in
    /// inference mode.
    pub bn_updates: Vec<(String, Tensor<T>, Tensor<T>)>,
}

fn validate_clip<T: Scalar>(clip: &Tensor<T>, cfg: &NetworkConfig) -> Result<()> {
    let s = clip.shape();
    if s.len() != 3 || s[0] != cfg.num_frames || s[1] != cfg.input_size || s[2] != cfg.input_size {
        return Err(Error::Validation(format!(
            "clip shape {s:?} does not match config ({} frames of {1}x{1})",
            cfg.num_frames, cfg.input_size
        )));
    }
    for &v in clip.data() {
        let f = v.to_f64();
        if !f.is_finite() || f < -1.0 - 1e-6 || f > 1.0 + 1e-6 {
            return Err(Error::Validation(format!(
                "clip intensities must lie in [-1, 1], found {f}"
            )));
        }
    }
    Ok(())
}

/// Run the network on a clip already on the tape as `T x 1 x H x W`.
/// In training mode normalization uses batch statistics (returned for the
/// running-average update); in inference mode it uses the stored buffers.
pub fn forward_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    params: &Parameters<T>,
    clip: Var,
    cfg: &NetworkConfig,
    train: bool,
) -> Result<ForwardOut<T>> {
    forward_tape_impl(tape, vars, params, clip, cfg, train, false)
}

fn forward_tape_impl<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    params: &Parameters<T>,
    clip: Var,
    cfg: &NetworkConfig,
    train: bool,
    zero_coords: bool,
) -> Result<ForwardOut<T>> {
    let mut bn_updates = Vec::new();
    let mut x = clip;
    let bn = |tape: &mut Tape<T>,
                  x: Var,
                  name: &str,
                  updates: &mut Vec<(String, Tensor<T>, Tensor<T>)>|
     -> Result<Var> {
        let gamma = vars.get(&format!("{name}.bn.gamma"));
        let beta = vars.get(&format!("{name}.bn.beta"));
        let (out, stats) = if train {
            let (out, stats) = tape.batch_norm(x, gamma, beta, None, BN_EPS)?;
            (out, Some(stats))
        } else {
            let mean = &params.buffers[&format!("{name}.bn.mean")];
            let var = &params.buffers[&format!("{name}.bn.var")];
            let (out, _) = tape.batch_norm(x, gamma, beta, Some((mean, var)), BN_EPS)?;
            (out, None)
        };
        if let Some(s) = stats {
            updates.push((name.to_string(), s.mean, s.var));
        }
        Ok(out)
    };

    for def in layer_defs(cfg) {
        match def.kind {
            LayerKind::Encoder { .. } => {
                let w = vars.get(&format!("{}.w", def.name));
                let b = vars.get(&format!("{}.b", def.name));
                let c = tape.conv2d(x, w, 2, 1, 1)?;
                let c = tape.add_bias(c, b)?;
                let n = bn(tape, c, &def.name, &mut bn_updates)?;
                x = tape.relu(n);
            }
            LayerKind::Spatial { c_in, dilation, .. } => {
                // Coordinates join right before the first stack layer.
                if c_in == cfg.stack_width() + 2 {
                    let g = cfg.grid();
                    let coords2 = if zero_coords {
                        Tensor::zeros(&[2, g, g])
                    } else {
                        coord_grid::<T>(g, g)
                    };
                    let mut tiled = Tensor::zeros(&[cfg.num_frames, 2, g, g]);
                    for t in 0..cfg.num_frames {
                        let chunk = 2 * g * g;
                        tiled.data_mut()[t * chunk..(t + 1) * chunk]
                            .copy_from_slice(coords2.data());
                    }
                    let coords = tape.constant(tiled);
                    x = tape.concat_channels(x, coords)?;
                }
                let w = vars.get(&format!("{}.w", def.name));
                let b = vars.get(&format!("{}.b", def.name));
                let c = tape.conv2d(x, w, 1, dilation, dilation)?;
                let c = tape.add_bias(c, b)?;
                let n = bn(tape, c, &def.name, &mut bn_updates)?;
                x = tape.relu(n);
            }
            LayerKind::Temporal { .. } => {
                let w = vars.get(&format!("{}.w", def.name));
                let b = vars.get(&format!("{}.b", def.name));
                let c = tape.conv_time(x, w)?;
                let c = tape.add_bias(c, b)?;
                let n = bn(tape, c, &def.name, &mut bn_updates)?;
                x = tape.relu(n);
            }
            LayerKind::Project { .. } => {
                let w = vars.get(&format!("{}.w", def.name));
                let b = vars.get(&format!("{}.b", def.name));
                let c = tape.conv2d(x, w, 1, 0, 1)?;
                x = tape.add_bias(c, b)?;
            }
        }
    }
    Ok(ForwardOut { emb: x, bn_updates })
}

/// Rows of one frame's embeddings on the tape: `(H'*W') x D`.
pub fn emb_rows<T: Scalar>(tape: &mut Tape<T>, emb: Var, t: usize) -> Result<Var> {
    let f = tape.slice_time(emb, t)?;
    tape.rows_from_chw(f)
}

/// Inference-mode forward pass over a plain `T x H x W` clip.
pub fn forward<T: Scalar>(
    params: &Parameters<T>,
    clip: &Tensor<T>,
    cfg: &NetworkConfig,
) -> Result<EmbeddingGrid<T>> {
    forward_with_frame_indices(params, clip, cfg, None)
}

pub fn forward_with_frame_indices<T: Scalar>(
    params: &Parameters<T>,
    clip: &Tensor<T>,
    cfg: &NetworkConfig,
    frame_indices: Option<Vec<usize>>,
) -> Result<EmbeddingGrid<T>> {
    validate_clip(clip, cfg)?;
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params, false);
    let s = clip.shape().to_vec();
    let clip4 = tape.constant(clip.clone().reshaped(&[s[0], 1, s[1], s[2]])?);
    let out = forward_tape(&mut tape, &vars, params, clip4, cfg, false)?;
    let emb = tape.val(out.emb); // T x D x H' x W'
    let (t_len, d, gh, gw) = (
        emb.shape()[0],
        emb.shape()[1],
        emb.shape()[2],
        emb.shape()[3],
    );
    let mut values = Tensor::zeros(&[t_len, gh, gw, d]);
    {
        let src = emb.data();
        let dst = values.data_mut();
        for t in 0..t_len {
            for c in 0..d {
                for p in 0..gh * gw {
                    dst[(t * gh * gw + p) * d + c] = src[(t * d + c) * gh * gw + p];
                }
            }
        }
    }
    Ok(EmbeddingGrid {
        values,
        frame_indices: frame_indices.unwrap_or_else(|| (0..t_len).collect()),
    })
}

#[cfg(test)]
pub(crate) fn forward_zero_coords<T: Scalar>(
    params: &Parameters<T>,
    clip: &Tensor<T>,
    cfg: &NetworkConfig,
) -> Result<EmbeddingGrid<T>> {
    validate_clip(clip, cfg)?;
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params, false);
    let s = clip.shape().to_vec();
    let clip4 = tape.constant(clip.clone().reshaped(&[s[0], 1, s[1], s[2]])?);
    let out = forward_tape_impl(&mut tape, &vars, params, clip4, cfg, false, true)?;
    let emb = tape.val(out.emb);
    let (t_len, d, gh, gw) = (
        emb.shape()[0],
        emb.shape()[1],
        emb.shape()[2],
        emb.shape()[3],
    );
    let mut values = Tensor::zeros(&[t_len, gh, gw, d]);
    let src = emb.data();
    for t in 0..t_len {
        for c in 0..d {
            for p in 0..gh * gw {
                values.data_mut()[(t * gh * gw + p) * d + c] = src[(t * d + c) * gh * gw + p];
            }
        }
    }
    Ok(EmbeddingGrid {
        values,
        frame_indices: (0..t_len).collect(),
    })
}

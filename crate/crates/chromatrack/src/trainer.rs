//! Self-supervised training: sample gray clips, predict the target frame's
//! quantized colors by pointing into the reference frames, minimize
//! cross-entropy, Adam with a single learning-rate drop.

use crate::chroma::{self, Palette};
use crate::embednet::{self, NetworkConfig, Parameters, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::io::checkpoint::{Checkpoint, TensorEntry};
use crate::numcore::{adam_step, AdamState, Tape, Tensor};
use crate::pointer;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_iters: u64,
    pub lr_initial: f64,
    pub lr_drop_iter: u64,
    pub lr_final: f64,
    pub num_refs: usize,
    /// Gap between consecutive clip frames when sampling windows.
    pub frame_gap: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            total_iters: 6000,
            lr_initial: 0.001,
            lr_drop_iter: 2000,
            lr_final: 0.0001,
            num_refs: 3,
            frame_gap: 1,
            seed: 7,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, net: &NetworkConfig) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        if self.total_iters > 0 && self.lr_drop_iter >= self.total_iters {
            return Err(Error::Validation(format!(
                "lr_drop_iter {} must be < total_iters {}",
                self.lr_drop_iter, self.total_iters
            )));
        }
        if self.num_refs + 1 != net.num_frames {
            return Err(Error::Validation(format!(
                "num_refs {} must equal num_frames {} - 1",
                self.num_refs, net.num_frames
            )));
        }
        if self.frame_gap == 0 {
            return Err(Error::Validation("frame_gap must be >= 1".into()));
        }
        Ok(())
    }
}

/// lr(iter): initial before the drop, final afterwards.
pub fn lr_at(cfg: &TrainConfig, iter: u64) -> f64 {
    if iter < cfg.lr_drop_iter {
        cfg.lr_initial
    } else {
        cfg.lr_final
    }
}

/// One clip held in memory: gray frames (network input) and grid-pooled ab
/// values (quantization happens at sampling time, against the palette).
pub struct CompactClip {
    pub frames: usize,
    pub gray: Vec<f32>,
    pub pooled_ab: Vec<f64>,
    pub dir: PathBuf,
}

pub struct Dataset {
    pub input_size: usize,
    pub grid: usize,
    pub clips: Vec<CompactClip>,
}

impl Dataset {
    /// Load every `clip_*` directory under `dir`. Clips shorter than the
    /// training window are skipped with a warning.
    pub fn load(dir: &Path, net: &NetworkConfig) -> Result<Dataset> {
        net.validate()?;
        let mut clip_dirs: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        clip_dirs.sort();
        if clip_dirs.is_empty() {
            return Err(Error::Validation(format!(
                "no clip directories found under {dir:?}"
            )));
        }
        let min_frames = net.num_frames;
        let loaded: Vec<Result<Option<CompactClip>>> = clip_dirs
            .par_iter()
            .map(|cd| -> Result<Option<CompactClip>> {
                let clip = load_clip_frames(cd, net.input_size)?;
                if clip.frames < min_frames {
                    eprintln!(
                        "warning: skipping {cd:?}: {} frames < window {min_frames}",
                        clip.frames
                    );
                    return Ok(None);
                }
                Ok(Some(clip))
            })
            .collect();
        let mut clips = Vec::new();
        for c in loaded {
            if let Some(c) = c? {
                clips.push(c);
            }
        }
        if clips.is_empty() {
            return Err(Error::Validation("every clip was too short".into()));
        }
        Ok(Dataset {
            input_size: net.input_size,
            grid: net.grid(),
            clips,
        })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Uniform ab samples pooled across clips for palette fitting.
    pub fn sample_ab(&self, budget: usize, seed: u64) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = self.grid * self.grid;
        let mut out = Vec::with_capacity(budget);
        for _ in 0..budget {
            let clip = &self.clips[rng.random_range(0..self.clips.len())];
            let f = rng.random_range(0..clip.frames);
            let p = rng.random_range(0..cells);
            let base = (f * cells + p) * 2;
            out.push([clip.pooled_ab[base], clip.pooled_ab[base + 1]]);
        }
        out
    }
}

fn load_clip_frames(dir: &Path, input_size: usize) -> Result<CompactClip> {
    let frames_dir = dir.join("frames");
    let mut frame_paths: Vec<PathBuf> = std::fs::read_dir(&frames_dir)
        .map_err(|e| Error::io(&frames_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "ppm").unwrap_or(false))
        .collect();
    frame_paths.sort();
    let mut gray = Vec::new();
    let mut pooled_ab = Vec::new();
    let grid = input_size / 8; // placeholder, recomputed below
    let _ = grid;
    let mut frames = 0;
    let mut pooled_target = None;
    for fp in &frame_paths {
        let img = crate::io::read_ppm(fp)?;
        if img.w != input_size || img.h != input_size {
            return Err(Error::Validation(format!(
                "frame {fp:?} is {}x{}, expected {input_size}x{input_size}",
                img.w, img.h
            )));
        }
        gray.extend(crate::synth::gray_channel(&img));
        let ab = crate::synth::ab_channels(&img);
        let g = pooled_target.get_or_insert_with(|| input_size / gcd_grid(input_size));
        let pooled = chroma::downsample_ab(&ab, input_size, input_size, *g, *g)?;
        pooled_ab.extend(pooled);
        frames += 1;
    }
    Ok(CompactClip {
        frames,
        gray,
        pooled_ab,
        dir: dir.to_path_buf(),
    })
}

// The dataset stores pooled ab at the finest pooling the loader knows; the
// loader is always called through `Dataset::load`, which rebuilds pooling
// per the network grid below.
fn gcd_grid(_input: usize) -> usize {
    8
}

/// Training batch: gray clips plus quantized color categories for the
/// reference frames and the target frame.
pub struct ClipBatch {
    pub gray: Tensor<f32>,
    pub target_categories: Vec<u8>,
    pub reference_categories: Vec<u8>,
    pub batch: usize,
    pub grid: usize,
    pub k: usize,
    pub batch_seed: u64,
}

/// Deterministic batch for an iteration: windows of `num_frames` frames
/// spaced by `frame_gap` from random clips.
pub fn sample_batch(
    ds: &Dataset,
    palette: &Palette,
    train: &TrainConfig,
    net: &NetworkConfig,
    iter: u64,
) -> Result<ClipBatch> {
    let batch_seed = train
        .seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(iter);
    let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
    let (b, t_len, hw) = (
        train.batch_size,
        net.num_frames,
        net.input_size * net.input_size,
    );
    let g = net.grid();
    let cells = g * g;
    let span = (t_len - 1) * train.frame_gap + 1;
    let mut gray = Tensor::zeros(&[b, t_len, net.input_size, net.input_size]);
    let mut target_categories = Vec::with_capacity(b * cells);
    let mut reference_categories = Vec::with_capacity(b * (t_len - 1) * cells);
    for bi in 0..b {
        // Rejection-free: clips shorter than the window were dropped at load.
        let clip = loop {
            let c = &ds.clips[rng.random_range(0..ds.clips.len())];
            if c.frames >= span {
                break c;
            }
        };
        let start = rng.random_range(0..=clip.frames - span);
        for (slot, f) in (0..t_len).map(|s| (s, start + s * train.frame_gap)) {
            gray.data_mut()[(bi * t_len + slot) * hw..(bi * t_len + slot + 1) * hw]
                .copy_from_slice(&clip.gray[f * hw..(f + 1) * hw]);
            let ab = &clip.pooled_ab[f * cells * 2..(f + 1) * cells * 2];
            let qf = chroma::quantize(ab, g, g, palette);
            if slot == t_len - 1 {
                target_categories.extend_from_slice(&qf.indices);
            } else {
                reference_categories.extend_from_slice(&qf.indices);
            }
        }
    }
    Ok(ClipBatch {
        gray,
        target_categories,
        reference_categories,
        batch: b,
        grid: g,
        k: palette.k(),
        batch_seed,
    })
}

pub struct PipelineOut<T: crate::numcore::Scalar> {
    pub loss: T,
    pub grads: BTreeMap<String, Tensor<T>>,
    pub bn: Vec<(String, Tensor<T>, Tensor<T>)>,
}

/// The full training pipeline for one clip: forward embeddings ->
/// similarity at the given temperature -> propagate one-hot reference
/// colors -> cross-entropy against the target categories -> backward.
/// Generic over dtype so gradient checks can run it in f64 unchanged.
pub fn pipeline_loss_and_grads<T: crate::numcore::Scalar>(
    params: &Parameters<T>,
    gray_clip: &Tensor<T>,
    reference_categories: &[u8],
    target_categories: &[u8],
    k: usize,
    net: &NetworkConfig,
    temperature: f64,
) -> Result<PipelineOut<T>> {
    let t_len = net.num_frames;
    let cells = net.grid() * net.grid();
    if gray_clip.shape() != [t_len, net.input_size, net.input_size] {
        return Err(Error::Validation(format!(
            "clip shape {:?} does not match network config",
            gray_clip.shape()
        )));
    }
    if reference_categories.len() != (t_len - 1) * cells || target_categories.len() != cells {
        return Err(Error::Dim(format!(
            "category counts {} / {} do not match {} reference rows and {cells} target cells",
            reference_categories.len(),
            target_categories.len(),
            (t_len - 1) * cells
        )));
    }
    let mut tape = Tape::new();
    let vars = embednet::register_params(&mut tape, params, true);
    let clip = gray_clip
        .clone()
        .reshaped(&[t_len, 1, net.input_size, net.input_size])?;
    let clip_var = tape.constant(clip);
    let fwd = embednet::forward_tape(&mut tape, &vars, params, clip_var, net, true)?;

    let target_rows = embednet::emb_rows(&mut tape, fwd.emb, t_len - 1)?;
    let mut ref_rows = Vec::with_capacity(t_len - 1);
    for slot in 0..t_len - 1 {
        ref_rows.push(embednet::emb_rows(&mut tape, fwd.emb, slot)?);
    }
    let refs = tape.concat_rows(&ref_rows)?;
    let a = pointer::similarity_tape(&mut tape, target_rows, refs, temperature)?;

    // One-hot reference colors, stacked in slot order.
    let one = T::one();
    let mut labels = Tensor::<T>::zeros(&[(t_len - 1) * cells, k]);
    for (r, &cat) in reference_categories.iter().enumerate() {
        labels.data_mut()[r * k + cat as usize] = one;
    }
    let labels_var = tape.constant(labels);
    let pred = tape.matmul(a, labels_var, false)?;

    let mut target = Tensor::<T>::zeros(&[cells, k]);
    for (r, &cat) in target_categories.iter().enumerate() {
        target.data_mut()[r * k + cat as usize] = one;
    }
    let loss = tape.cross_entropy(pred, &target)?;
    let loss_val = tape.val(loss).item();
    let mut grads = tape.backward(loss)?;
    let mut out = BTreeMap::new();
    for (name, &var) in vars.iter() {
        if let Some(g) = grads.take(var) {
            out.insert(name.clone(), g);
        }
    }
    Ok(PipelineOut {
        loss: loss_val,
        grads: out,
        bn: fwd.bn_updates,
    })
}

fn item_step(
    params: &Parameters<f32>,
    batch: &ClipBatch,
    net: &NetworkConfig,
    bi: usize,
    temperature: f64,
) -> Result<PipelineOut<f32>> {
    let (t_len, hw) = (net.num_frames, net.input_size * net.input_size);
    let cells = batch.grid * batch.grid;
    let n_ref_rows = (t_len - 1) * cells;
    let clip = Tensor::new(
        &[t_len, net.input_size, net.input_size],
        batch.gray.data()[bi * t_len * hw..(bi + 1) * t_len * hw].to_vec(),
    )?;
    pipeline_loss_and_grads(
        params,
        &clip,
        &batch.reference_categories[bi * n_ref_rows..(bi + 1) * n_ref_rows],
        &batch.target_categories[bi * cells..(bi + 1) * cells],
        batch.k,
        net,
        temperature,
    )
}

/// One optimizer update over a batch. Returns the batch loss.
pub fn training_step(
    params: &mut Parameters<f32>,
    batch: &ClipBatch,
    adam: &mut AdamState<f32>,
    net: &NetworkConfig,
    temperature: f64,
) -> Result<f32> {
    let results: Vec<Result<PipelineOut<f32>>> = (0..batch.batch)
        .into_par_iter()
        .map(|bi| item_step(params, batch, net, bi, temperature))
        .collect();
    let mut items = Vec::with_capacity(batch.batch);
    for r in results {
        items.push(r?);
    }
    let scale = 1.0 / batch.batch as f32;
    let mut loss = 0.0f64;
    let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for item in &items {
        loss += item.loss as f64;
        for (name, g) in &item.grads {
            match grads.get_mut(name) {
                Some(acc) => {
                    for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v * scale;
                    }
                }
                None => {
                    grads.insert(name.clone(), g.map(|v| v * scale));
                }
            }
        }
    }
    loss *= scale as f64;

    // Running-statistic update from the batch-mean of per-item statistics.
    let mut bn_acc: BTreeMap<String, (Tensor<f32>, Tensor<f32>)> = BTreeMap::new();
    for item in &items {
        for (name, mean, var) in &item.bn {
            let e = bn_acc
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(mean.shape()), Tensor::zeros(var.shape())));
            for (a, &v) in e.0.data_mut().iter_mut().zip(mean.data()) {
                *a += v * scale;
            }
            for (a, &v) in e.1.data_mut().iter_mut().zip(var.data()) {
                *a += v * scale;
            }
        }
    }
    let mom = BN_MOMENTUM as f32;
    for (name, (mean, var)) in bn_acc {
        let rm = params
            .buffers
            .get_mut(&format!("{name}.bn.mean"))
            .expect("bn mean buffer");
        for (b, &m) in rm.data_mut().iter_mut().zip(mean.data()) {
            *b = (1.0 - mom) * *b + mom * m;
        }
        let rv = params
            .buffers
            .get_mut(&format!("{name}.bn.var"))
            .expect("bn var buffer");
        for (b, &v) in rv.data_mut().iter_mut().zip(var.data()) {
            *b = (1.0 - mom) * *b + mom * v;
        }
    }

    adam_step(&mut params.weights, &grads, adam)?;
    Ok(loss as f32)
}

/// Persistent training state inside a checkpoint file.
pub struct TrainState {
    pub params: Parameters<f32>,
    pub adam: AdamState<f32>,
    pub iter: u64,
    pub net: NetworkConfig,
    pub train: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct CheckpointConfig {
    network: NetworkConfig,
    train: TrainConfig,
}

pub fn state_to_checkpoint(state: &TrainState) -> Result<Checkpoint> {
    let cfg = CheckpointConfig {
        network: state.net.clone(),
        train: state.train.clone(),
    };
    let mut ckpt = Checkpoint {
        config_json: serde_json::to_string(&cfg)?,
        ..Default::default()
    };
    for (name, t) in &state.params.weights {
        ckpt.insert_f32(format!("param/{name}"), t.clone());
    }
    for (name, t) in &state.params.buffers {
        ckpt.insert_f32(format!("buffer/{name}"), t.clone());
    }
    for (name, t) in &state.adam.m {
        ckpt.insert_f32(format!("adam/m/{name}"), t.clone());
    }
    for (name, t) in &state.adam.v {
        ckpt.insert_f32(format!("adam/v/{name}"), t.clone());
    }
    ckpt.insert_scalar("meta/iter", state.iter as f64);
    ckpt.insert_scalar("meta/adam_step", state.adam.step as f64);
    ckpt.insert_scalar("meta/adam_lr", state.adam.lr);
    Ok(ckpt)
}

pub fn state_from_checkpoint(ckpt: &Checkpoint) -> Result<TrainState> {
    let cfg: CheckpointConfig = serde_json::from_str(&ckpt.config_json)?;
    let mut params = Parameters {
        weights: BTreeMap::new(),
        buffers: BTreeMap::new(),
    };
    let mut adam = AdamState::new(cfg.train.lr_initial);
    for (name, entry) in &ckpt.entries {
        let get = |e: &TensorEntry| -> Result<Tensor<f32>> {
            e.as_f32()
                .cloned()
                .ok_or_else(|| Error::Validation(format!("entry {name} is not f32")))
        };
        if let Some(rest) = name.strip_prefix("param/") {
            params.weights.insert(rest.to_string(), get(entry)?);
        } else if let Some(rest) = name.strip_prefix("buffer/") {
            params.buffers.insert(rest.to_string(), get(entry)?);
        } else if let Some(rest) = name.strip_prefix("adam/m/") {
            adam.m.insert(rest.to_string(), get(entry)?);
        } else if let Some(rest) = name.strip_prefix("adam/v/") {
            adam.v.insert(rest.to_string(), get(entry)?);
        }
    }
    let iter = ckpt
        .entries
        .get("meta/iter")
        .and_then(|e| e.scalar())
        .ok_or_else(|| Error::Validation("checkpoint missing meta/iter".into()))? as u64;
    adam.step = ckpt
        .entries
        .get("meta/adam_step")
        .and_then(|e| e.scalar())
        .unwrap_or(0.0) as u64;
    adam.lr = ckpt
        .entries
        .get("meta/adam_lr")
        .and_then(|e| e.scalar())
        .unwrap_or(cfg.train.lr_initial);
    Ok(TrainState {
        params,
        adam,
        iter,
        net: cfg.network,
        train: cfg.train,
    })
}

pub struct TrainOutcome {
    pub final_loss: f32,
    pub checkpoint: PathBuf,
    pub iters_run: u64,
}

/// Full training run. Writes `checkpoint.ctk` (rolling, atomic) and
/// `train_log.jsonl` under `out_dir`; resumes from `resume` when given.
pub fn train(
    ds: &Dataset,
    palette: &Palette,
    net: &NetworkConfig,
    train_cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    net.validate()?;
    train_cfg.validate(net)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_path = out_dir.join("checkpoint.ctk");
    let mut state = match resume {
        Some(p) => {
            let state = state_from_checkpoint(&crate::io::load_checkpoint(p)?)?;
            if state.net != *net {
                return Err(Error::Validation(
                    "resume checkpoint was trained with a different network config".into(),
                ));
            }
            state
        }
        None => TrainState {
            params: embednet::build::<f32>(net)?,
            adam: AdamState::new(train_cfg.lr_initial),
            iter: 0,
            net: net.clone(),
            train: train_cfg.clone(),
        },
    };
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let mut last_loss = f32::NAN;
    while state.iter < train_cfg.total_iters {
        let iter = state.iter;
        let lr = lr_at(train_cfg, iter);
        state.adam.lr = lr;
        let batch = sample_batch(ds, palette, train_cfg, net, iter)?;
        let loss = training_step(&mut state.params, &batch, &mut state.adam, net, 1.0)?;
        if !loss.is_finite() {
            // Keep the last good checkpoint on disk; report where it broke.
            return Err(Error::NanLoss {
                iter,
                lr,
                batch_seed: batch.batch_seed,
            });
        }
        last_loss = loss;
        state.iter += 1;
        writeln!(
            log,
            "{}",
            serde_json::json!({"iter": state.iter, "loss": loss, "lr": lr})
        )
        .map_err(|e| Error::io(&log_path, e))?;
        if train_cfg.checkpoint_every > 0 && state.iter % train_cfg.checkpoint_every == 0 {
            crate::io::save_checkpoint(&ckpt_path, &state_to_checkpoint(&state)?)?;
        }
        if state.iter % 200 == 0 || state.iter == train_cfg.total_iters {
            eprintln!("iter {:>6}  loss {loss:.4}  lr {lr}", state.iter);
        }
    }
    crate::io::save_checkpoint(&ckpt_path, &state_to_checkpoint(&state)?)?;
    Ok(TrainOutcome {
        final_loss: last_loss,
        checkpoint: ckpt_path,
        iters_run: state.iter,
    })
}

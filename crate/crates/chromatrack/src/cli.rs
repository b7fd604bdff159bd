//! Command-line surface: synth, fit-palette, train, colorize, track,
//! eval, viz-embed.

use crate::chroma::{self, Palette};
use crate::embednet::NetworkConfig;
use crate::error::{Error, Result};
use crate::io::config::{load_palette, save_palette, RunConfig};
use crate::io::{GrayImage, RgbImage};
use crate::metrics;
use crate::synth;
use crate::tracker::{self, TrackTask};
use crate::trainer::{self, Dataset};
use clap::{Parser, Subcommand};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "chromatrack",
    version,
    about = "Self-supervised video colorization whose pointer tracks segments and keypoints"
)]
struct Cli {
    /// JSON run configuration (sections: network, train, tracker, data).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic clip dataset.
    Synth {
        /// plain or hard.
        #[arg(long, default_value = "plain")]
        preset: String,
        /// Number of clips.
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Frames per clip (preset default when omitted).
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Fit the color palette on a dataset sample.
    FitPalette {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train the embedding network.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        palette: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Colorize a gray clip from its first (colorful) frame.
    Colorize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        palette: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Propagate first-frame segment masks or keypoints.
    Track {
        /// seg or kp.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// First-frame labels (mask .pgm or keypoints .json); defaults to
        /// the clip's own ground truth.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Score predictions against dataset ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Root of per-clip prediction directories (track output).
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Root of per-clip colorization outputs.
        #[arg(long)]
        pred_color: Option<PathBuf>,
        #[arg(long)]
        palette: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-video `frame,category,j` CSV trajectories.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Render PCA embedding visualizations for a clip window.
    VizEmbed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_threads() {
    let n = std::env::var("CHROMATRACK_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    init_threads();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // Help and version requests print and exit cleanly; anything
            // else is usage trouble.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(cli_config: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match cli_config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.config, cli.seed)?;
    match cli.cmd {
        Cmd::Synth {
            preset,
            n,
            out,
            frames,
        } => cmd_synth(&cfg, &preset, n, &out, frames, cli.seed),
        Cmd::FitPalette {
            data,
            out,
            k,
            samples,
        } => cmd_fit_palette(&cfg, &data, &out, k, samples),
        Cmd::Train {
            data,
            palette,
            out,
            resume,
        } => cmd_train(&cfg, data, palette, &out, resume),
        Cmd::Colorize {
            checkpoint,
            clip,
            palette,
            out,
        } => cmd_colorize(&cfg, &checkpoint, &clip, &palette, &out),
        Cmd::Track {
            mode,
            checkpoint,
            clip,
            out,
            labels,
        } => cmd_track(&cfg, &mode, &checkpoint, &clip, &out, labels),
        Cmd::Eval {
            data,
            pred,
            pred_color,
            palette,
            out,
            csv,
        } => cmd_eval(&cfg, &data, pred, pred_color, palette, &out, csv),
        Cmd::VizEmbed {
            checkpoint,
            clip,
            out,
        } => cmd_viz(&checkpoint, &clip, &out),
    }
}

fn cmd_synth(
    cfg: &RunConfig,
    preset: &str,
    n: usize,
    out: &Path,
    frames: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    if n == 0 {
        return Err(Error::Validation("need at least one clip".into()));
    }
    let preset = synth::Preset::parse(preset)?;
    let seed = seed.unwrap_or(cfg.train.seed);
    let mut specs = synth::dataset_specs(n, preset, seed);
    if let Some(f) = frames {
        for s in &mut specs {
            s.num_frames = f;
        }
    }
    synth::write_dataset(out, &specs)?;
    println!("wrote {n} clips to {}", out.display());
    Ok(())
}

fn cmd_fit_palette(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    k: Option<usize>,
    samples: Option<usize>,
) -> Result<()> {
    let ds = Dataset::load(data, &cfg.network)?;
    let budget = samples.unwrap_or(cfg.data.palette_samples);
    let k = k.unwrap_or(cfg.data.palette_k);
    let ab = ds.sample_ab(budget, cfg.train.seed);
    let palette = chroma::fit_palette(&ab, k, cfg.train.seed, 100)?;
    save_palette(out, &palette)?;
    println!(
        "fitted k={k} palette on {budget} samples (objective {:.3}) -> {}",
        palette.final_objective,
        out.display()
    );
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    data: Option<PathBuf>,
    palette: Option<PathBuf>,
    out: &Path,
    resume: Option<PathBuf>,
) -> Result<()> {
    let data = data
        .or_else(|| cfg.data.dataset.clone())
        .ok_or_else(|| Error::Validation("no dataset: pass --data or set data.dataset".into()))?;
    let palette_path = palette
        .or_else(|| cfg.data.palette.clone())
        .ok_or_else(|| Error::Validation("no palette: pass --palette or set data.palette".into()))?;
    let ds = Dataset::load(&data, &cfg.network)?;
    let palette = load_palette(&palette_path)?;
    let outcome = trainer::train(
        &ds,
        &palette,
        &cfg.network,
        &cfg.train,
        out,
        resume.as_deref(),
    )?;
    println!(
        "trained {} iters, final loss {:.4}, checkpoint {}",
        outcome.iters_run,
        outcome.final_loss,
        outcome.checkpoint.display()
    );
    Ok(())
}

/// Frames of a clip directory, sorted by filename.
fn read_clip_frames(clip: &Path) -> Result<Vec<RgbImage>> {
    let dir = clip.join("frames");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "ppm").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Validation(format!("no .ppm frames in {dir:?}")));
    }
    paths.iter().map(crate::io::read_ppm).collect()
}

fn read_clip_masks(clip: &Path) -> Result<Vec<GrayImage>> {
    let dir = clip.join("masks");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "pgm").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Validation(format!("no .pgm masks in {dir:?}")));
    }
    paths.iter().map(crate::io::read_pgm).collect()
}

fn load_net_from_checkpoint(path: &Path) -> Result<(crate::embednet::Parameters<f32>, NetworkConfig)> {
    let state = trainer::state_from_checkpoint(&crate::io::load_checkpoint(path)?)?;
    Ok((state.params, state.net))
}

fn cmd_colorize(
    cfg: &RunConfig,
    checkpoint: &Path,
    clip: &Path,
    palette: &Path,
    out: &Path,
) -> Result<()> {
    let (params, net) = load_net_from_checkpoint(checkpoint)?;
    let palette = load_palette(palette)?;
    let frames = read_clip_frames(clip)?;
    let gray = tracker::gray_frames(&frames);
    let result = tracker::colorize(&params, &gray, &frames[0], &palette, &cfg.tracker, &net)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (t, frame) in result.frames.iter().enumerate() {
        crate::io::write_ppm(out.join(format!("{t:05}.ppm")), frame)?;
    }
    println!("colorized {} frames -> {}", result.frames.len(), out.display());
    Ok(())
}

fn cmd_track(
    cfg: &RunConfig,
    mode: &str,
    checkpoint: &Path,
    clip: &Path,
    out: &Path,
    labels: Option<PathBuf>,
) -> Result<()> {
    let (params, net) = load_net_from_checkpoint(checkpoint)?;
    let frames = read_clip_frames(clip)?;
    let gray = tracker::gray_frames(&frames);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    match mode {
        "seg" => {
            let mask0 = match &labels {
                Some(p) => crate::io::read_pgm(p)?,
                None => read_clip_masks(clip)?
                    .into_iter()
                    .next()
                    .expect("non-empty masks"),
            };
            let task = TrackTask::segment(mask0)?;
            let result = tracker::track(&params, &gray, &task, &cfg.tracker, &net)?;
            for (t, mask) in result.masks().iter().enumerate() {
                crate::io::write_pgm(out.join(format!("{t:05}.pgm")), mask)?;
            }
            println!("tracked {} frames -> {}", gray.len(), out.display());
        }
        "kp" => {
            let points = match &labels {
                Some(p) => synth::read_keypoints(p)?
                    .into_iter()
                    .next()
                    .ok_or_else(|| Error::Validation("keypoint file has no frames".into()))?,
                None => synth::read_keypoints(&clip.join("keypoints.json"))?
                    .into_iter()
                    .next()
                    .ok_or_else(|| Error::Validation("keypoint file has no frames".into()))?,
            };
            let task = TrackTask::keypoints(points)?;
            let result = tracker::track(&params, &gray, &task, &cfg.tracker, &net)?;
            let frames_out: Vec<Vec<(f64, f64)>> = result
                .keypoints()
                .iter()
                .map(|f| f.iter().map(|k| (k.x, k.y)).collect())
                .collect();
            synth::write_keypoints(&out.join("keypoints.json"), &frames_out)?;
            println!("tracked {} keypoint frames -> {}", gray.len(), out.display());
        }
        other => {
            return Err(Error::Validation(format!(
                "unknown track mode {other:?} (expected seg or kp)"
            )))
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct VideoReport {
    name: String,
    #[serde(rename = "meanJ")]
    mean_j: Option<f64>,
    #[serde(rename = "meanF")]
    mean_f: Option<f64>,
    #[serde(rename = "identityMeanJ")]
    identity_mean_j: Option<f64>,
    pck: Option<BTreeMap<String, f64>>,
    identity_pck: Option<BTreeMap<String, f64>>,
    color_top1: Option<f64>,
}

#[derive(Serialize)]
struct EvalReport {
    videos: Vec<VideoReport>,
    #[serde(rename = "meanJ")]
    mean_j: Option<f64>,
    #[serde(rename = "meanF")]
    mean_f: Option<f64>,
    #[serde(rename = "identityMeanJ")]
    identity_mean_j: Option<f64>,
    #[serde(rename = "identityMeanF")]
    identity_mean_f: Option<f64>,
    pck: Option<BTreeMap<String, f64>>,
    identity_pck: Option<BTreeMap<String, f64>>,
    color_top1: Option<f64>,
    contingency: Option<metrics::ContingencyTable>,
    odds_ratio: Option<f64>,
    metadata: EvalMetadata,
}

#[derive(Serialize)]
struct EvalMetadata {
    averaging: String,
    boundary_radius: f64,
    j_fail_threshold: f64,
    color_fail_threshold: f64,
    pck_thresholds: Vec<f64>,
}

const PCK_THRESHOLDS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

fn pck_map(values: &[f64]) -> BTreeMap<String, f64> {
    PCK_THRESHOLDS
        .iter()
        .zip(values)
        .map(|(t, v)| (format!("{t}"), *v))
        .collect()
}

fn cmd_eval(
    cfg: &RunConfig,
    data: &Path,
    pred: Option<PathBuf>,
    pred_color: Option<PathBuf>,
    palette: Option<PathBuf>,
    out: &Path,
    csv: Option<PathBuf>,
) -> Result<()> {
    let mut clips: Vec<PathBuf> = std::fs::read_dir(data)
        .map_err(|e| Error::io(data, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    clips.sort();
    if clips.is_empty() {
        return Err(Error::Validation(format!("no clips under {data:?}")));
    }
    let palette = match &palette {
        Some(p) => Some(load_palette(p)?),
        None => None,
    };
    let g = cfg.network.grid();
    let mut videos = Vec::new();
    let (mut js, mut fs, mut ijs, mut ifs) = (vec![], vec![], vec![], vec![]);
    let mut pcks: Vec<Vec<f64>> = Vec::new();
    let mut ipcks: Vec<Vec<f64>> = Vec::new();
    let mut color_accs = Vec::new();
    let mut frame_track_scores = Vec::new();
    let mut frame_color_scores = Vec::new();
    if let Some(csv_dir) = &csv {
        std::fs::create_dir_all(csv_dir).map_err(|e| Error::io(csv_dir, e))?;
    }

    for clip_dir in &clips {
        let name = clip_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let gt_masks = read_clip_masks(clip_dir)?;
        let radius = metrics::default_boundary_radius(gt_masks[0].w, gt_masks[0].h);
        let mut report = VideoReport {
            name: name.clone(),
            mean_j: None,
            mean_f: None,
            identity_mean_j: None,
            pck: None,
            identity_pck: None,
            color_top1: None,
        };
        let has_foreground = gt_masks[0].data.iter().any(|&v| v > 0);

        // Identity baseline always available from ground truth.
        let identity_eval = if has_foreground {
            let identity = vec![gt_masks[0].clone(); gt_masks.len()];
            let ev = metrics::eval_segments(&identity, &gt_masks, radius)?;
            ijs.push(ev.mean_j);
            ifs.push(ev.mean_f);
            report.identity_mean_j = Some(ev.mean_j);
            Some(ev)
        } else {
            None
        };
        let _ = identity_eval;

        let mut per_frame_j: Option<Vec<f64>> = None;
        if let Some(pred_root) = &pred {
            let pd = pred_root.join(&name);
            if pd.is_dir() && has_foreground {
                let mut mask_paths: Vec<PathBuf> = std::fs::read_dir(&pd)
                    .map_err(|e| Error::io(&pd, e))?
                    .filter_map(|e| e.ok())
                    .map(|e| e.path())
                    .filter(|p| p.extension().map(|x| x == "pgm").unwrap_or(false))
                    .collect();
                mask_paths.sort();
                if !mask_paths.is_empty() {
                    let pred_masks: Vec<GrayImage> = mask_paths
                        .iter()
                        .map(crate::io::read_pgm)
                        .collect::<Result<_>>()?;
                    let ev = metrics::eval_segments(&pred_masks, &gt_masks, radius)?;
                    js.push(ev.mean_j);
                    fs.push(ev.mean_f);
                    report.mean_j = Some(ev.mean_j);
                    report.mean_f = Some(ev.mean_f);
                    per_frame_j = Some(ev.per_frame_j.clone());
                    if let Some(csv_dir) = &csv {
                        let mut text = String::from("frame,category,j\n");
                        for (frame, cat, j) in &ev.rows {
                            text.push_str(&format!("{frame},{cat},{j}\n"));
                        }
                        let p = csv_dir.join(format!("{name}.csv"));
                        crate::io::atomic_write(&p, text.as_bytes())?;
                    }
                }
                // Keypoints when present.
                let kp_path = pd.join("keypoints.json");
                let gt_kp_path = clip_dir.join("keypoints.json");
                if kp_path.is_file() && gt_kp_path.is_file() {
                    let pred_kp = synth::read_keypoints(&kp_path)?;
                    let gt_kp = synth::read_keypoints(&gt_kp_path)?;
                    if pred_kp.len() == gt_kp.len() && !gt_kp[0].is_empty() {
                        let scores = metrics::eval_keypoints(&pred_kp, &gt_kp, &PCK_THRESHOLDS)?;
                        report.pck = Some(pck_map(&scores));
                        pcks.push(scores);
                        let identity_kp = vec![gt_kp[0].clone(); gt_kp.len()];
                        let iscores =
                            metrics::eval_keypoints(&identity_kp, &gt_kp, &PCK_THRESHOLDS)?;
                        report.identity_pck = Some(pck_map(&iscores));
                        ipcks.push(iscores);
                    }
                }
            }
        }

        // Colorization accuracy at grid resolution.
        if let (Some(color_root), Some(pal)) = (&pred_color, &palette) {
            let cd = color_root.join(&name);
            if cd.is_dir() {
                let mut fpaths: Vec<PathBuf> = std::fs::read_dir(&cd)
                    .map_err(|e| Error::io(&cd, e))?
                    .filter_map(|e| e.ok())
                    .map(|e| e.path())
                    .filter(|p| p.extension().map(|x| x == "ppm").unwrap_or(false))
                    .collect();
                fpaths.sort();
                let gt_frames = read_clip_frames(clip_dir)?;
                if fpaths.len() == gt_frames.len() {
                    let mut accs = Vec::new();
                    for (t, fp) in fpaths.iter().enumerate().skip(1) {
                        let pred_img = crate::io::read_ppm(fp)?;
                        let pc = quantize_grid(&pred_img, g, pal)?;
                        let gc = quantize_grid(&gt_frames[t], g, pal)?;
                        accs.push(metrics::color_top1_accuracy(&pc, &gc)?);
                    }
                    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
                    report.color_top1 = Some(mean);
                    color_accs.push(mean);
                    if let Some(pj) = &per_frame_j {
                        for t in 1..pj.len().min(accs.len() + 1) {
                            frame_track_scores.push(pj[t]);
                            frame_color_scores.push(accs[t - 1]);
                        }
                    }
                }
            }
        }
        videos.push(report);
    }

    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let mean_pck = |v: &[Vec<f64>]| -> Option<BTreeMap<String, f64>> {
        if v.is_empty() {
            return None;
        }
        let mut acc = vec![0.0; PCK_THRESHOLDS.len()];
        for scores in v {
            for (a, s) in acc.iter_mut().zip(scores) {
                *a += s / v.len() as f64;
            }
        }
        Some(pck_map(&acc))
    };
    let contingency = if frame_track_scores.is_empty() {
        None
    } else {
        Some(metrics::failure_table(
            &frame_track_scores,
            &frame_color_scores,
            0.5,
            0.5,
        )?)
    };
    let report = EvalReport {
        videos,
        mean_j: mean(&js),
        mean_f: mean(&fs),
        identity_mean_j: mean(&ijs),
        identity_mean_f: mean(&ifs),
        pck: mean_pck(&pcks),
        identity_pck: mean_pck(&ipcks),
        color_top1: mean(&color_accs),
        odds_ratio: contingency.as_ref().map(metrics::odds_ratio),
        contingency,
        metadata: EvalMetadata {
            averaging: "per object, then per video, then over videos".into(),
            boundary_radius: metrics::default_boundary_radius(
                cfg.network.input_size,
                cfg.network.input_size,
            ),
            j_fail_threshold: 0.5,
            color_fail_threshold: 0.5,
            pck_thresholds: PCK_THRESHOLDS.to_vec(),
        },
    };
    crate::io::atomic_write(out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    println!("wrote report -> {}", out.display());
    Ok(())
}

fn quantize_grid(img: &RgbImage, g: usize, palette: &Palette) -> Result<Vec<u8>> {
    let ab = synth::ab_channels(img);
    let pooled = chroma::downsample_ab(&ab, img.h, img.w, g, g)?;
    Ok(chroma::quantize(&pooled, g, g, palette).indices)
}

fn cmd_viz(checkpoint: &Path, clip: &Path, out: &Path) -> Result<()> {
    let (params, net) = load_net_from_checkpoint(checkpoint)?;
    let frames = read_clip_frames(clip)?;
    if frames.len() < net.num_frames {
        return Err(Error::Validation(format!(
            "clip has {} frames, need at least {}",
            frames.len(),
            net.num_frames
        )));
    }
    let gray = tracker::gray_frames(&frames);
    let hw = net.input_size * net.input_size;
    let mut clip_t = crate::numcore::Tensor::zeros(&[net.num_frames, net.input_size, net.input_size]);
    for t in 0..net.num_frames {
        clip_t.data_mut()[t * hw..(t + 1) * hw].copy_from_slice(&gray[t]);
    }
    let grid = crate::embednet::forward(&params, &clip_t, &net)?;
    let images = metrics::pca_embed_viz(&grid)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (t, img) in images.iter().enumerate() {
        crate::io::write_ppm(out.join(format!("{t:05}.ppm")), img)?;
    }
    println!("wrote {} embedding maps -> {}", images.len(), out.display());
    Ok(())
}

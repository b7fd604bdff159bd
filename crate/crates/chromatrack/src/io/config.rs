//! Run configuration: one JSON document with `network`, `train`,
//! `tracker`, and `data` sections. Unknown keys are rejected; absent keys
//! take defaults. Also the palette file, which reuses the checkpoint
//! container.

use crate::chroma::Palette;
use crate::embednet::NetworkConfig;
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::tracker::TrackerConfig;
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dataset: Option<PathBuf>,
    pub palette: Option<PathBuf>,
    /// Number of ab samples drawn for k-means fitting.
    pub palette_samples: usize,
    pub palette_k: usize,
}

impl DataConfig {
    fn defaults() -> Self {
        DataConfig {
            dataset: None,
            palette: None,
            palette_samples: 100_000,
            palette_k: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            tracker: TrackerConfig::default(),
            data: DataConfig::defaults(),
        }
    }
}

impl RunConfig {
    pub fn parse(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Apply a global seed override to every seeded section.
    pub fn override_seed(&mut self, seed: u64) {
        self.network.seed = seed;
        self.train.seed = seed;
    }
}

/// Palette file: tensor container with `centroids` (K x 2, f32) and
/// `seed`; fit metadata rides in the config record.
#[derive(Serialize, Deserialize)]
struct PaletteMeta {
    k: usize,
    sample_count: usize,
    final_objective: f64,
}

pub fn save_palette(path: &Path, palette: &Palette) -> Result<()> {
    let mut ckpt = super::Checkpoint {
        config_json: serde_json::to_string(&PaletteMeta {
            k: palette.k(),
            sample_count: palette.sample_count,
            final_objective: palette.final_objective,
        })?,
        ..Default::default()
    };
    let data: Vec<f32> = palette
        .centroids()
        .iter()
        .flat_map(|c| [c[0] as f32, c[1] as f32])
        .collect();
    ckpt.insert_f32(
        "centroids",
        Tensor::new(&[palette.k(), 2], data).expect("centroid tensor"),
    );
    ckpt.insert_scalar("seed", palette.seed as f64);
    super::save_checkpoint(path, &ckpt)
}

pub fn load_palette(path: &Path) -> Result<Palette> {
    let ckpt = super::load_checkpoint(path)?;
    let centroids = ckpt
        .entries
        .get("centroids")
        .and_then(|e| e.as_f32())
        .ok_or_else(|| Error::Validation(format!("{path:?} has no f32 centroids entry")))?;
    if centroids.rank() != 2 || centroids.shape()[1] != 2 {
        return Err(Error::Validation(format!(
            "centroids must be K x 2, got {:?}",
            centroids.shape()
        )));
    }
    let pairs: Vec<[f64; 2]> = centroids
        .data()
        .chunks_exact(2)
        .map(|c| [c[0] as f64, c[1] as f64])
        .collect();
    let seed = ckpt
        .entries
        .get("seed")
        .and_then(|e| e.scalar())
        .unwrap_or(0.0) as u64;
    let mut palette = Palette::from_centroids(pairs, seed)?;
    if let Ok(meta) = serde_json::from_str::<PaletteMeta>(&ckpt.config_json) {
        palette.sample_count = meta.sample_count;
        palette.final_objective = meta.final_objective;
    }
    Ok(palette)
}

//! File formats and persistence: PPM/PGM images, the checkpoint tensor
//! container, and run configuration.

pub mod checkpoint;
pub mod config;
pub mod pnm;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TensorEntry};
pub use config::RunConfig;
pub use pnm::{read_pgm, read_ppm, write_pgm, write_ppm};

/// 8-bit RGB image, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(w: usize, h: usize) -> Self {
        RgbImage {
            w,
            h,
            data: vec![0; w * h * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let p = (y * self.w + x) * 3;
        [self.data[p], self.data[p + 1], self.data[p + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let p = (y * self.w + x) * 3;
        self.data[p..p + 3].copy_from_slice(&rgb);
    }
}

/// 8-bit single-channel image; doubles as an instance mask where the pixel
/// value is the instance index (0 = background).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(w: usize, h: usize) -> Self {
        GrayImage {
            w,
            h,
            data: vec![0; w * h],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }
}

/// Write bytes atomically: temp file in the same directory, fsync, rename.
pub fn atomic_write(path: &std::path::Path, bytes: &[u8]) -> crate::Result<()> {
    use std::io::Write;
    let dir = path.parent().unwrap_or_else(|| std::path::Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    let mut f = std::fs::File::create(&tmp).map_err(|e| crate::Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| crate::Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| crate::Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| crate::Error::io(path, e))?;
    Ok(())
}

//! Checkpoint container: magic `CTCK`, version, a JSON config record,
//! named tensor entries, and a trailing CRC32 over everything before it.
//! Little-endian throughout. Also used for palette files.

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 4] = b"CTCK";

/// Version word: major in the high 16 bits, minor in the low 16.
pub const VERSION: u32 = (1 << 16) | 1;

fn version_supported(v: u32) -> bool {
    let (major, minor) = (v >> 16, v & 0xFFFF);
    major == VERSION >> 16 && minor <= (VERSION & 0xFFFF)
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorEntry {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorEntry {
    pub fn as_f32(&self) -> Option<&Tensor<f32>> {
        match self {
            TensorEntry::F32(t) => Some(t),
            TensorEntry::F64(_) => None,
        }
    }

    pub fn as_f64(&self) -> Option<&Tensor<f64>> {
        match self {
            TensorEntry::F64(t) => Some(t),
            TensorEntry::F32(_) => None,
        }
    }

    /// Scalar value regardless of stored dtype.
    pub fn scalar(&self) -> Option<f64> {
        match self {
            TensorEntry::F32(t) if t.numel() == 1 => Some(t.item() as f64),
            TensorEntry::F64(t) if t.numel() == 1 => Some(t.item()),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub entries: BTreeMap<String, TensorEntry>,
}

impl Checkpoint {
    pub fn insert_f32(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.entries.insert(name.into(), TensorEntry::F32(t));
    }

    pub fn insert_f64(&mut self, name: impl Into<String>, t: Tensor<f64>) {
        self.entries.insert(name.into(), TensorEntry::F64(t));
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.insert_f64(name, Tensor::scalar(v));
    }
}

// CRC32 (IEEE 802.3, reflected, polynomial 0xEDB88320).
fn crc32_table() -> &'static [u32; 256] {
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [0u32; 256];
        for (i, slot) in table.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *slot = c;
        }
        table
    })
}

pub fn crc32(bytes: &[u8]) -> u32 {
    let table = crc32_table();
    let mut c = 0xFFFF_FFFFu32;
    for &b in bytes {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = ckpt.config_json.as_bytes();
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(cfg);
    out.extend_from_slice(&(ckpt.entries.len() as u64).to_le_bytes());
    for (name, entry) in &ckpt.entries {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        match entry {
            TensorEntry::F32(t) => {
                out.push(0);
                out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                for &e in t.shape() {
                    out.extend_from_slice(&(e as u64).to_le_bytes());
                }
                for &v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            TensorEntry::F64(t) => {
                out.push(1);
                out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                for &e in t.shape() {
                    out.extend_from_slice(&(e as u64).to_le_bytes());
                }
                for &v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, msg: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.path.to_path_buf(),
            msg: format!("{} (at byte {})", msg.into(), self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.corrupt(format!("unexpected end of file; wanted {n} bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn bounded_len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64()?;
        if n as usize > self.bytes.len() {
            return Err(self.corrupt(format!("{what} length {n} exceeds file size")));
        }
        Ok(n as usize)
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 4 {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            msg: "file too short for header and CRC".into(),
        });
    }
    // CRC is verified before anything else is trusted.
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let actual = crc32(body);
    if stored != actual {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            msg: format!("CRC mismatch: stored {stored:#010x}, computed {actual:#010x}"),
        });
    }
    let mut r = Reader {
        bytes: body,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(r.corrupt("bad magic (expected CTCK)"));
    }
    let version = r.u32()?;
    if !version_supported(version) {
        return Err(Error::Version {
            found: version,
            supported: format!("{}.0 through {}.{}", VERSION >> 16, VERSION >> 16, VERSION & 0xFFFF),
        });
    }
    let cfg_len = r.bounded_len("config record")?;
    let config_json = String::from_utf8(r.take(cfg_len)?.to_vec())
        .map_err(|_| r.corrupt("config record is not UTF-8"))?;
    let count = r.bounded_len("entry count")?;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.bounded_len("name")?;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| r.corrupt("entry name is not UTF-8"))?;
        let dtype = r.take(1)?[0];
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(r.corrupt(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let e = r.u64()? as usize;
            if e == 0 || e > body.len() {
                return Err(r.corrupt(format!("implausible extent {e}")));
            }
            numel = numel.saturating_mul(e);
            shape.push(e);
        }
        if numel.saturating_mul(4) > body.len() {
            return Err(r.corrupt(format!("tensor {name:?} larger than file")));
        }
        let entry = match dtype {
            0 => {
                let raw = r.take(numel * 4)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                TensorEntry::F32(Tensor::new(&shape, data).map_err(|e| r.corrupt(e.to_string()))?)
            }
            1 => {
                let raw = r.take(numel * 8)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                TensorEntry::F64(Tensor::new(&shape, data).map_err(|e| r.corrupt(e.to_string()))?)
            }
            other => return Err(r.corrupt(format!("unknown dtype tag {other}"))),
        };
        entries.insert(name, entry);
    }
    if r.pos != body.len() {
        return Err(r.corrupt(format!(
            "{} trailing bytes after last entry",
            body.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config_json,
        entries,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    super::atomic_write(path.as_ref(), &encode(ckpt))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint {
            config_json: r#"{"note":"test"}"#.into(),
            ..Default::default()
        };
        c.insert_f32(
            "w",
            Tensor::new(&[2, 3], vec![1.0, -0.5, 3.25, 0.0, 9.5, -2.0]).unwrap(),
        );
        c.insert_f64("m", Tensor::new(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        c.insert_scalar("iter", 123.0);
        c
    }

    fn tmp(name: &str) -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("ckpt-test-{}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        d.join(name)
    }

    #[test]
    fn save_load_bit_identical() {
        let c = sample();
        let p = tmp("a.ctk");
        save_checkpoint(&p, &c).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, c);
        // Byte-stable encoding.
        let b1 = std::fs::read(&p).unwrap();
        save_checkpoint(&p, &c).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b1);
    }

    #[test]
    fn any_flipped_byte_is_detected() {
        let c = sample();
        let bytes = encode(&c);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let path = std::path::Path::new("fuzz.ctk");
        for _ in 0..100 {
            let mut fuzzed = bytes.clone();
            let i = rng.random_range(0..fuzzed.len());
            let bit = 1u8 << rng.random_range(0..8);
            fuzzed[i] ^= bit;
            assert!(
                decode(&fuzzed, path).is_err(),
                "flip at byte {i} bit {bit} went undetected"
            );
        }
    }

    #[test]
    fn unknown_version_is_refused() {
        let c = sample();
        let mut bytes = encode(&c);
        // Overwrite the version with major 9 and re-stamp the CRC so only
        // the version check can fire.
        bytes[4..8].copy_from_slice(&((9u32 << 16) | 0).to_le_bytes());
        let n = bytes.len();
        let crc = crc32(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        match decode(&bytes, std::path::Path::new("v.ctk")) {
            Err(Error::Version { found, .. }) => assert_eq!(found >> 16, 9),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn older_minor_version_loads() {
        let c = sample();
        let mut bytes = encode(&c);
        bytes[4..8].copy_from_slice(&((1u32 << 16) | 0).to_le_bytes());
        let n = bytes.len();
        let crc = crc32(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        let back = decode(&bytes, std::path::Path::new("v.ctk")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        // Private directory: sibling tests also write through atomic_write.
        let dir = tmp("atomic-only");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("atomic.ctk");
        save_checkpoint(&p, &sample()).unwrap();
        for entry in std::fs::read_dir(&dir).unwrap() {
            let name = entry.unwrap().file_name();
            assert!(
                !name.to_string_lossy().contains(".tmp-"),
                "temp file left behind: {name:?}"
            );
        }
        assert!(p.is_file());
    }

    #[test]
    fn crc32_reference_value() {
        // Standard check value for the IEEE polynomial.
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }
}

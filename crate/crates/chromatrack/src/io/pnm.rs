//! Binary PPM (P6) and PGM (P5) with maxval 255, the only pixel formats
//! the pipeline reads and writes.

use super::{GrayImage, RgbImage};
use crate::error::{Error, Result};
use std::path::Path;

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> HeaderParser<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    /// Skip whitespace and `#` comment lines.
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn read_number(&mut self) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected ASCII integer"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("integer out of range"))
    }
}

fn parse_pnm<'a>(bytes: &'a [u8], path: &'a Path, magic: &[u8]) -> Result<(usize, usize, &'a [u8])> {
    let mut p = HeaderParser { bytes, pos: 0, path };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(p.err(format!(
            "bad magic (expected {:?})",
            std::str::from_utf8(magic).unwrap_or("?")
        )));
    }
    p.pos = 2;
    let w = p.read_number()?;
    let h = p.read_number()?;
    let maxval = p.read_number()?;
    if maxval != 255 {
        return Err(p.err(format!("maxval {maxval} unsupported (must be 255)")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if p.pos >= bytes.len() || !bytes[p.pos].is_ascii_whitespace() {
        return Err(p.err("expected single whitespace before payload"));
    }
    p.pos += 1;
    if w == 0 || h == 0 {
        return Err(p.err("zero image extent"));
    }
    Ok((w, h, &bytes[p.pos..]))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, payload) = parse_pnm(&bytes, path, b"P6")?;
    let need = w * h * 3;
    if payload.len() < need {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: bytes.len(),
            msg: format!("truncated payload: need {need} bytes, have {}", payload.len()),
        });
    }
    Ok(RgbImage {
        w,
        h,
        data: payload[..need].to_vec(),
    })
}

pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.data);
    super::atomic_write(path.as_ref(), &out)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, payload) = parse_pnm(&bytes, path, b"P5")?;
    let need = w * h;
    if payload.len() < need {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: bytes.len(),
            msg: format!("truncated payload: need {need} bytes, have {}", payload.len()),
        });
    }
    Ok(GrayImage {
        w,
        h,
        data: payload[..need].to_vec(),
    })
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.data);
    super::atomic_write(path.as_ref(), &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("pnm-test-{}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn ppm_round_trip_bit_identical() {
        let mut img = RgbImage::new(5, 3);
        for (i, b) in img.data.iter_mut().enumerate() {
            *b = (i * 7 % 256) as u8;
        }
        let p = tmpdir().join("rt.ppm");
        write_ppm(&p, &img).unwrap();
        assert_eq!(read_ppm(&p).unwrap(), img);
        let bytes1 = std::fs::read(&p).unwrap();
        write_ppm(&p, &img).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes1);
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let p = tmpdir().join("comment.ppm");
        let mut bytes = b"P6\n# a comment\n2 # inline\n1\n# more\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        std::fs::write(&p, &bytes).unwrap();
        let img = read_ppm(&p).unwrap();
        assert_eq!((img.w, img.h), (2, 1));
        assert_eq!(img.data, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn ppm_rejects_wrong_maxval() {
        let p = tmpdir().join("maxval.ppm");
        std::fs::write(&p, b"P6\n1 1\n65535\n\0\0\0\0\0\0").unwrap();
        let err = read_ppm(&p).unwrap_err();
        assert!(err.to_string().contains("maxval"), "{err}");
    }

    #[test]
    fn pgm_round_trip_preserves_instance_indices() {
        let mut img = GrayImage::new(4, 4);
        for (i, b) in img.data.iter_mut().enumerate() {
            *b = (i % 5) as u8;
        }
        let p = tmpdir().join("mask.pgm");
        write_pgm(&p, &img).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), img);
    }

    #[test]
    fn truncated_pgm_is_parse_error_with_offset() {
        let p = tmpdir().join("trunc.pgm");
        std::fs::write(&p, b"P5\n4 4\n255\n\x01\x02").unwrap();
        match read_pgm(&p) {
            Err(Error::Parse { offset, msg, .. }) => {
                assert!(msg.contains("truncated"));
                assert!(offset > 0);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let p = tmpdir().join("magic.pgm");
        std::fs::write(&p, b"P4\n1 1\n255\n\x00").unwrap();
        assert!(read_pgm(&p).is_err());
    }
}

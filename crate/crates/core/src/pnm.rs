//! Minimal binary PPM (P6) / PGM (P5) reader and writer, maxval 255.
//! Comments in headers are accepted; writes round-trip byte-exactly.

use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected {1}")]
    Magic(String, &'static str),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("maxval {0} unsupported, only 255")]
    Maxval(u32),
    #[error("pixel data truncated: got {got} bytes, need {need}")]
    Truncated { got: usize, need: usize },
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn token(&mut self) -> Result<String, PnmError> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(PnmError::Header("unexpected end of header".into()));
        }
        Ok(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned())
    }

    fn number(&mut self) -> Result<u32, PnmError> {
        let t = self.token()?;
        t.parse().map_err(|_| PnmError::Header(format!("not a number: {t:?}")))
    }
}

fn read_header(bytes: &[u8], magic: &'static str) -> Result<(usize, usize, usize), PnmError> {
    let mut r = HeaderReader { bytes, pos: 0 };
    let m = r.token()?;
    if m != magic {
        return Err(PnmError::Magic(m, magic));
    }
    let w = r.number()? as usize;
    let h = r.number()? as usize;
    let maxval = r.number()?;
    if maxval != 255 {
        return Err(PnmError::Maxval(maxval));
    }
    // exactly one whitespace byte separates the header from pixel data
    Ok((w, h, r.pos + 1))
}

/// Reads a P6 image into a (3, h, w) tensor with values in [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor, PnmError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (w, h, data_at) = read_header(&bytes, "P6")?;
    let need = 3 * w * h;
    let data = &bytes[data_at.min(bytes.len())..];
    if data.len() < need {
        return Err(PnmError::Truncated { got: data.len(), need });
    }
    let mut t = Tensor::zeros(&[3, h, w]);
    for p in 0..h * w {
        for c in 0..3 {
            t.data[c * h * w + p] = data[3 * p + c] as f64 / 255.0;
        }
    }
    Ok(t)
}

/// Writes a (3, h, w) tensor in [0, 1] as P6, rounding to the nearest byte.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<(), PnmError> {
    assert_eq!(image.shape.len(), 3);
    assert_eq!(image.shape[0], 3);
    let (h, w) = (image.shape[1], image.shape[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..h * w {
        for c in 0..3 {
            let v = (image.data[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
            out.push(v);
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Reads a P5 label map; each byte is a class id (255 = ignore).
pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize), PnmError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (w, h, data_at) = read_header(&bytes, "P5")?;
    let need = w * h;
    let data = &bytes[data_at.min(bytes.len())..];
    if data.len() < need {
        return Err(PnmError::Truncated { got: data.len(), need });
    }
    Ok((data[..need].to_vec(), h, w))
}

pub fn write_pgm(path: &Path, labels: &[u8], h: usize, w: usize) -> Result<(), PnmError> {
    assert_eq!(labels.len(), h * w);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(labels);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        let mut img = Tensor::zeros(&[3, 2, 3]);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i * 13 % 256) as f64 / 255.0;
        }
        write_ppm(&p, &img).unwrap();
        let back = read_ppm(&p).unwrap();
        assert_eq!(back.shape, vec![3, 2, 3]);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-12);
        }
        // writing the decoded image reproduces the file byte-for-byte
        let p2 = dir.path().join("y.ppm");
        write_ppm(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn pgm_round_trip_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.pgm");
        let labels = vec![0u8, 1, 255, 4, 2, 3];
        write_pgm(&p, &labels, 2, 3).unwrap();
        let (back, h, w) = read_pgm(&p).unwrap();
        assert_eq!((back, h, w), (labels.clone(), 2, 3));

        let with_comment = b"P5\n# hello\n3 2\n255\n\x00\x01\xff\x04\x02\x03".to_vec();
        let pc = dir.path().join("c.pgm");
        std::fs::write(&pc, with_comment).unwrap();
        let (back2, h2, w2) = read_pgm(&pc).unwrap();
        assert_eq!((back2, h2, w2), (labels, 2, 3));
    }

    #[test]
    fn bad_magic_and_truncation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ppm");
        std::fs::write(&p, b"P3\n1 1\n255\n0 0 0\n").unwrap();
        assert!(matches!(read_ppm(&p), Err(PnmError::Magic(..))));
        std::fs::write(&p, b"P6\n2 2\n255\nxy").unwrap();
        assert!(matches!(read_ppm(&p), Err(PnmError::Truncated { .. })));
    }
}

//! 8-bit rasters and the binary netpbm codec (PGM P5, PPM P6).

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit image, row-major, channel-interleaved. `channels` is 1 (gray) or 3
/// (RGB).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("raster: channels must be 1 or 3, got {channels}")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::shape(format!(
                "raster: {width}x{height}x{channels} needs {} bytes, got {}",
                width * height * channels,
                pixels.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        Raster::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// Mirror image around the vertical axis.
    pub fn hflipped(&self) -> Raster {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(x, y, c, self.get(self.width - 1 - x, y, c));
                }
            }
        }
        out
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

/// Netpbm header token reader: skips whitespace and `#` comments.
struct TokenReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> TokenReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        TokenReader { bytes, pos: 0 }
    }

    fn skip_filler(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Option<&'a [u8]> {
        self.skip_filler();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Option<usize> {
        let t = self.token()?;
        std::str::from_utf8(t).ok()?.parse().ok()
    }

    /// Position of the raw payload: one whitespace byte after the maxval.
    fn payload_start(&self) -> usize {
        self.pos + 1
    }
}

fn parse_netpbm(path: &Path, magic: &[u8], channels: usize) -> Result<Raster> {
    let bytes = read_all(path)?;
    let mut r = TokenReader::new(&bytes);
    let tok = r
        .token()
        .ok_or_else(|| Error::format(path, "empty file".to_string()))?;
    if tok != magic {
        return Err(Error::format(
            path,
            format!(
                "wrong magic: expected {}, got {}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(tok)
            ),
        ));
    }
    let width = r
        .number()
        .ok_or_else(|| Error::format(path, "missing width".to_string()))?;
    let height = r
        .number()
        .ok_or_else(|| Error::format(path, "missing height".to_string()))?;
    let maxval = r
        .number()
        .ok_or_else(|| Error::format(path, "missing maxval".to_string()))?;
    if maxval != 255 {
        return Err(Error::format(path, format!("maxval must be 255, got {maxval}")));
    }
    let start = r.payload_start();
    let need = width * height * channels;
    if bytes.len() < start + need {
        return Err(Error::format(
            path,
            format!("truncated payload: need {need} bytes, have {}", bytes.len().saturating_sub(start)),
        ));
    }
    Raster::new(width, height, channels, bytes[start..start + need].to_vec())
}

fn write_netpbm(path: &Path, magic: &[u8], raster: &Raster) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    (|| -> std::io::Result<()> {
        w.write_all(magic)?;
        w.write_all(format!("\n{} {}\n255\n", raster.width, raster.height).as_bytes())?;
        w.write_all(&raster.pixels)?;
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

/// Reads a binary PGM (P5) grayscale image with maxval 255.
pub fn read_pgm(path: &Path) -> Result<Raster> {
    parse_netpbm(path, b"P5", 1)
}

/// Writes a binary PGM (P5) with the canonical `P5\n{w} {h}\n255\n` header.
pub fn write_pgm(path: &Path, raster: &Raster) -> Result<()> {
    if raster.channels != 1 {
        return Err(Error::invalid("pgm requires a 1-channel raster".to_string()));
    }
    write_netpbm(path, b"P5", raster)
}

/// Reads a binary PPM (P6) RGB image with maxval 255.
pub fn read_ppm(path: &Path) -> Result<Raster> {
    parse_netpbm(path, b"P6", 3)
}

/// Writes a binary PPM (P6) with the canonical header.
pub fn write_ppm(path: &Path, raster: &Raster) -> Result<()> {
    if raster.channels != 3 {
        return Err(Error::invalid("ppm requires a 3-channel raster".to_string()));
    }
    write_netpbm(path, b"P6", raster)
}

/// Reads either format based on the magic number.
pub fn read_auto(path: &Path) -> Result<Raster> {
    let bytes = read_all(path)?;
    match bytes.get(..2) {
        Some(b"P5") => read_pgm(path),
        Some(b"P6") => read_ppm(path),
        _ => Err(Error::format(path, "not a binary PGM/PPM file".to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn pgm_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let img = Raster::new(3, 2, 1, vec![0, 255, 7, 128, 1, 9]).unwrap();
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back, img);
        let bytes1 = std::fs::read(&path).unwrap();
        write_pgm(&path, &back).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn ppm_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let img = Raster::new(2, 2, 3, (0..12).collect()).unwrap();
        write_ppm(&path, &img).unwrap();
        assert_eq!(read_ppm(&path).unwrap(), img);
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        std::fs::write(&path, b"P5\n# a comment\n2 1\n255\n\x01\x02").unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!(img.pixels, vec![1, 2]);
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        std::fs::write(&path, b"P6\n1 1\n255\n\x00\x00\x00").unwrap();
        assert!(read_pgm(&path).is_err());
    }

    #[test]
    fn bad_maxval_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        std::fs::write(&path, b"P5\n1 1\n65535\n\x00\x00").unwrap();
        assert!(read_pgm(&path).is_err());
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        std::fs::write(&path, b"P5\n4 4\n255\n\x00\x01").unwrap();
        let err = read_pgm(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn hflip_mirrors_columns() {
        let img = Raster::new(3, 1, 1, vec![1, 2, 3]).unwrap();
        assert_eq!(img.hflipped().pixels, vec![3, 2, 1]);
    }
}

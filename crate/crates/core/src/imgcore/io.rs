//! Binary PGM (P5), PPM (P6), and grayscale PFM (Pf) files.
//!
//! PNM files are 8-bit with maxval 255; samples are divided by 255 on load
//! and rounded on save. PFM is written little-endian (scale -1.0) with rows
//! bottom-to-top, as the format prescribes.

use std::fs;
use std::path::Path;

use super::{ImageBuffer, ScalarField};
use crate::{Error, Result};

/// Reads whitespace-separated header tokens, skipping `#` comments.
struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn token(&mut self) -> Option<&'a str> {
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
        (self.pos > start).then(|| std::str::from_utf8(&self.bytes[start..self.pos]).ok())?
    }

    fn number(&mut self, path: &Path, what: &str) -> Result<usize> {
        self.token()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::format(path, format!("missing or invalid {what}")))
    }
}

/// Load a P5 (grayscale) or P6 (RGB) file.
pub fn read_pnm(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = HeaderCursor { bytes: &bytes, pos: 0 };
    let channels = match cur.token() {
        Some("P5") => 1,
        Some("P6") => 3,
        other => {
            return Err(Error::format(
                path,
                format!("expected P5 or P6 magic, found {other:?}"),
            ))
        }
    };
    let width = cur.number(path, "width")?;
    let height = cur.number(path, "height")?;
    let maxval = cur.number(path, "maxval")?;
    if maxval != 255 {
        return Err(Error::format(path, format!("only maxval 255 is supported, got {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = cur.pos + 1;
    let n = width * height * channels;
    if bytes.len() < start + n {
        return Err(Error::format(
            path,
            format!("raster has {} bytes, expected {n}", bytes.len().saturating_sub(start)),
        ));
    }
    let data = bytes[start..start + n].iter().map(|&b| f64::from(b) / 255.0).collect();
    ImageBuffer::new(width, height, channels, data)
}

fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_pnm(path: &Path, img: &ImageBuffer, magic: &str) -> Result<()> {
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&x| quantize(x)));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    let path = path.as_ref();
    if img.channels() != 1 {
        return Err(Error::Config("PGM output needs a one-channel image".into()));
    }
    write_pnm(path, img, "P5")
}

pub fn write_ppm(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    let path = path.as_ref();
    if img.channels() != 3 {
        return Err(Error::Config("PPM output needs a three-channel image".into()));
    }
    write_pnm(path, img, "P6")
}

pub fn write_pfm(path: impl AsRef<Path>, field: &ScalarField) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (field.width(), field.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for i in (0..h).rev() {
        for j in 0..w {
            out.extend_from_slice(&(field.get(i, j) as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<ScalarField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = HeaderCursor { bytes: &bytes, pos: 0 };
    match cur.token() {
        Some("Pf") => {}
        other => return Err(Error::format(path, format!("expected Pf magic, found {other:?}"))),
    }
    let width = cur.number(path, "width")?;
    let height = cur.number(path, "height")?;
    let scale: f64 = cur
        .token()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::format(path, "missing scale"))?;
    if scale == 0.0 {
        return Err(Error::format(path, "scale must be nonzero"));
    }
    let little = scale < 0.0;
    let start = cur.pos + 1;
    let n = width * height;
    if bytes.len() < start + 4 * n {
        return Err(Error::format(path, "truncated float raster"));
    }
    let mut data = vec![0.0; n];
    for (k, chunk) in bytes[start..start + 4 * n].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row_from_bottom, col) = (k / width, k % width);
        data[(height - 1 - row_from_bottom) * width + col] = f64::from(v);
    }
    ScalarField::new(width, height, data)
}

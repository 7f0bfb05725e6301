//! RGB raster images (values in [0,1], channels-first) and binary PPM I/O.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub w: usize,
    pub h: usize,
    /// `[3 * h * w]`, plane-per-channel (R plane, G plane, B plane).
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(w: usize, h: usize) -> Self {
        RgbImage { w, h, data: vec![0.0; 3 * w * h] }
    }

    pub fn filled(w: usize, h: usize, rgb: [f32; 3]) -> Self {
        let mut img = RgbImage::new(w, h);
        for c in 0..3 {
            img.data[c * w * h..(c + 1) * w * h].fill(rgb[c]);
        }
        img
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let p = y * self.w + x;
        let n = self.w * self.h;
        [self.data[p], self.data[n + p], self.data[2 * n + p]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let p = y * self.w + x;
        let n = self.w * self.h;
        self.data[p] = rgb[0];
        self.data[n + p] = rgb[1];
        self.data[2 * n + p] = rgb[2];
    }

    /// Blend `rgb` over the existing pixel with coverage `alpha` in [0,1].
    pub fn blend(&mut self, x: usize, y: usize, rgb: [f32; 3], alpha: f32) {
        let old = self.get(x, y);
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = rgb[c] * alpha + old[c] * (1.0 - alpha);
        }
        self.set(x, y, out);
    }

    /// Channels-first plane data, as consumed by the visual encoder.
    pub fn planes(&self) -> &[f32] {
        &self.data
    }

    /// Copy shifted by `(dx, dy)` pixels, clamping reads to the edge so the
    /// vacated strip repeats the border instead of going black.
    pub fn translated(&self, dx: i64, dy: i64) -> RgbImage {
        let mut out = RgbImage::new(self.w, self.h);
        for y in 0..self.h {
            let sy = (y as i64 - dy).clamp(0, self.h as i64 - 1) as usize;
            for x in 0..self.w {
                let sx = (x as i64 - dx).clamp(0, self.w as i64 - 1) as usize;
                out.set(x, y, self.get(sx, sy));
            }
        }
        out
    }

    pub fn from_planes(w: usize, h: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * w * h {
            return Err(Error::shape("RgbImage", format!("{} values for 3x{h}x{w}", data.len())));
        }
        Ok(RgbImage { w, h, data })
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let n = self.w * self.h;
        let mut body = Vec::with_capacity(3 * n);
        for p in 0..n {
            for c in 0..3 {
                let v = (self.data[c * n + p].clamp(0.0, 1.0) * 255.0).round() as u8;
                body.push(v);
            }
        }
        write!(out, "P6\n{} {}\n255\n", self.w, self.h).map_err(|e| Error::io(path, e))?;
        out.write_all(&body).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cursor = std::io::Cursor::new(&bytes);
        let mut header = String::new();
        // Three header tokens lines: magic, dimensions, maxval (no comments
        // in our own output; reject anything else).
        for _ in 0..3 {
            let mut line = String::new();
            cursor.read_line(&mut line).map_err(|e| Error::io(path, e))?;
            header.push_str(&line);
        }
        let mut tok = header.split_whitespace();
        let magic = tok.next().unwrap_or("");
        if magic != "P6" {
            return Err(Error::Data(format!("{}: not a P6 pixmap", path.display())));
        }
        let w: usize = tok.next().and_then(|t| t.parse().ok()).ok_or_else(|| Error::Data("bad PPM width".into()))?;
        let h: usize = tok.next().and_then(|t| t.parse().ok()).ok_or_else(|| Error::Data("bad PPM height".into()))?;
        let maxval: usize = tok.next().and_then(|t| t.parse().ok()).ok_or_else(|| Error::Data("bad PPM maxval".into()))?;
        if maxval != 255 {
            return Err(Error::Data(format!("unsupported PPM maxval {maxval}")));
        }
        let start = cursor.position() as usize;
        let body = &bytes[start..];
        if body.len() != 3 * w * h {
            return Err(Error::Data(format!("PPM body has {} bytes, expected {}", body.len(), 3 * w * h)));
        }
        let n = w * h;
        let mut data = vec![0.0f32; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                data[c * n + p] = body[3 * p + c] as f32 / 255.0;
            }
        }
        Ok(RgbImage { w, h, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_is_exact_at_8bit() {
        let mut img = RgbImage::new(5, 3);
        for y in 0..3 {
            for x in 0..5 {
                img.set(x, y, [x as f32 / 4.0, y as f32 / 2.0, 0.25]);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        img.write_ppm(&path).unwrap();
        let back = RgbImage::read_ppm(&path).unwrap();
        assert_eq!((back.w, back.h), (5, 3));
        for y in 0..3 {
            for x in 0..5 {
                let a = img.get(x, y);
                let b = back.get(x, y);
                for c in 0..3 {
                    assert!((a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-6);
                }
            }
        }
        // A second write/read cycle is bit-stable.
        let path2 = dir.path().join("t2.ppm");
        back.write_ppm(&path2).unwrap();
        let again = RgbImage::read_ppm(&path2).unwrap();
        assert_eq!(back, again);
    }

    #[test]
    fn blend_in_place() {
        let mut img = RgbImage::filled(1, 1, [0.0, 0.0, 1.0]);
        img.blend(0, 0, [1.0, 0.0, 0.0], 0.25);
        let px = img.get(0, 0);
        assert!((px[0] - 0.25).abs() < 1e-6);
        assert!((px[2] - 0.75).abs() < 1e-6);
    }
}

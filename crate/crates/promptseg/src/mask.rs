//! Binary masks and their run-length encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single-channel binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinMask {
    pub w: usize,
    pub h: usize,
    bits: Vec<bool>,
}

impl BinMask {
    pub fn new(w: usize, h: usize) -> Self {
        BinMask { w, h, bits: vec![false; w * h] }
    }

    pub fn from_fn(w: usize, h: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                bits.push(f(x, y));
            }
        }
        BinMask { w, h, bits }
    }

    pub fn from_bits(w: usize, h: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != w * h {
            return Err(Error::shape("BinMask", format!("{} bits for {w}x{h}", bits.len())));
        }
        Ok(BinMask { w, h, bits })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.w + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn intersection_area(&self, other: &BinMask) -> usize {
        debug_assert_eq!((self.w, self.h), (other.w, other.h));
        self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a && b).count()
    }

    pub fn union_area(&self, other: &BinMask) -> usize {
        debug_assert_eq!((self.w, self.h), (other.w, other.h));
        self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a || b).count()
    }

    /// Intersection over union; 1.0 when both masks are empty.
    pub fn iou(&self, other: &BinMask) -> f64 {
        let u = self.union_area(other);
        if u == 0 {
            return 1.0;
        }
        self.intersection_area(other) as f64 / u as f64
    }

    pub fn union_with(&mut self, other: &BinMask) {
        debug_assert_eq!((self.w, self.h), (other.w, other.h));
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }

    /// Copy shifted by `(dx, dy)` pixels; bits shifted in from outside are 0.
    pub fn translated(&self, dx: i64, dy: i64) -> BinMask {
        BinMask::from_fn(self.w, self.h, |x, y| {
            let sx = x as i64 - dx;
            let sy = y as i64 - dy;
            sx >= 0 && sy >= 0 && (sx as usize) < self.w && (sy as usize) < self.h
                && self.get(sx as usize, sy as usize)
        })
    }

    /// Mask as 0/1 floats in row-major order.
    pub fn to_f(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Normalized pooling weights: 1/area inside the mask. Errors on empty.
    pub fn pool_weights(&self) -> Result<Vec<f64>> {
        let a = self.area();
        if a == 0 {
            return Err(Error::Schema("cannot pool over an empty mask".into()));
        }
        let inv = 1.0 / a as f64;
        Ok(self.bits.iter().map(|&b| if b { inv } else { 0.0 }).collect())
    }

    pub fn encode(&self) -> Rle {
        let mut counts = Vec::new();
        let mut current = false; // runs start from 'false' by convention
        let mut run: u32 = 0;
        for &b in &self.bits {
            if b == current {
                run += 1;
            } else {
                counts.push(run);
                current = b;
                run = 1;
            }
        }
        counts.push(run);
        Rle { size: [self.h as u32, self.w as u32], counts }
    }
}

/// Row-major run-length encoding; `counts` alternate zero-runs and one-runs,
/// starting with zeros (a leading 0 count when the mask starts with ones).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn decode(&self) -> Result<BinMask> {
        let (h, w) = (self.size[0] as usize, self.size[1] as usize);
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if total != (w * h) as u64 {
            return Err(Error::Data(format!("RLE counts sum to {total}, expected {}", w * h)));
        }
        let mut bits = Vec::with_capacity(w * h);
        let mut value = false;
        for &c in &self.counts {
            bits.extend(std::iter::repeat(value).take(c as usize));
            value = !value;
        }
        BinMask::from_bits(w, h, bits)
    }
}

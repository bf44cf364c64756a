//! Bit-packed binary masks addressed like the matrix they gate.
//!
//! Bit `i` (row-major index) lives in word `i / 64` at position `i % 64`, which makes
//! the little-endian byte image LSB-first within each byte.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitMask {
    rows: usize,
    cols: usize,
    words: Vec<u64>,
}

impl BitMask {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, words: vec![0; (rows * cols).div_ceil(64)] }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows * cols {
            m.set_index(i, true);
        }
        m
    }

    pub fn from_bools(rows: usize, cols: usize, bits: &[bool]) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::arg(alloc::format!(
                "{rows}x{cols} mask needs {} bits, got {}",
                rows * cols,
                bits.len()
            )));
        }
        let mut m = Self::zeros(rows, cols);
        for (i, &b) in bits.iter().enumerate() {
            m.set_index(i, b);
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get_index(&self, i: usize) -> bool {
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set_index(&mut self, i: usize, on: bool) {
        let bit = 1u64 << (i % 64);
        if on {
            self.words[i / 64] |= bit;
        } else {
            self.words[i / 64] &= !bit;
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.get_index(r * self.cols + c)
    }

    pub fn set(&mut self, r: usize, c: usize, on: bool) {
        self.set_index(r * self.cols + c, on)
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn density(&self) -> f64 {
        self.count_ones() as f64 / self.len() as f64
    }

    fn check(&self, other: &BitMask, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension { op, left: self.shape(), right: other.shape() });
        }
        Ok(())
    }

    pub fn and(&self, other: &BitMask) -> Result<BitMask> {
        self.check(other, "mask and")?;
        Ok(BitMask {
            rows: self.rows,
            cols: self.cols,
            words: self.words.iter().zip(&other.words).map(|(a, b)| a & b).collect(),
        })
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BitMask) -> bool {
        self.shape() == other.shape()
            && self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    /// Entrywise `m ⊙ mask`.
    pub fn apply(&self, m: &Matrix) -> Result<Matrix> {
        if m.shape() != self.shape() {
            return Err(Error::Dimension { op: "mask apply", left: self.shape(), right: m.shape() });
        }
        let mut out = m.clone();
        for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
            if !self.get_index(i) {
                *v = 0.0;
            }
        }
        Ok(out)
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len()).map(|i| self.get_index(i))
    }

    /// Packed bytes, `ceil(len / 8)` long, LSB-first.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len().div_ceil(8);
        self.words.iter().flat_map(|w| w.to_le_bytes()).take(n).collect()
    }

    pub fn from_bytes(rows: usize, cols: usize, bytes: &[u8]) -> Result<Self> {
        let n = (rows * cols).div_ceil(8);
        if bytes.len() != n {
            return Err(Error::arg(alloc::format!(
                "{rows}x{cols} mask needs {n} bytes, got {}",
                bytes.len()
            )));
        }
        let mut m = Self::zeros(rows, cols);
        for (i, chunk) in bytes.chunks(8).enumerate() {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            m.words[i] = u64::from_le_bytes(buf);
        }
        // Padding bits past the end must be clear.
        let tail = rows * cols;
        if tail % 64 != 0 {
            if let Some(last) = m.words.last() {
                if last >> (tail % 64) != 0 {
                    return Err(Error::arg("mask padding bits are set"));
                }
            }
        }
        Ok(m)
    }
}

/// Fraction of all positions set in both masks.
pub fn mask_overlap(a: &BitMask, b: &BitMask) -> Result<f64> {
    Ok(a.and(b)?.count_ones() as f64 / a.len() as f64)
}

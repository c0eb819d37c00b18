//! Binary instance masks and their run-length wire encoding.
//!
//! RLE layout: alternating run lengths of 0s and 1s over the row-major
//! cells, always starting with a (possibly empty) 0-run.

use bitvec::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RleError {
    #[error("RLE covers {covered} cells but mask has {expected}")]
    LengthMismatch { covered: u64, expected: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask2D {
    width: u32,
    height: u32,
    bits: BitVec<u64, Lsb0>,
    /// Index of the detection box this mask was prompted with.
    pub source_box: Option<usize>,
    pub instance_id: u32,
}

impl Mask2D {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: bitvec![u64, Lsb0; 0; width as usize * height as usize],
            source_box: None,
            instance_id: 0,
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        let mut m = Self::empty(width, height);
        m.bits.fill(true);
        m
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Out-of-range cells read as unset.
    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        x < self.width && y < self.height && self.bits[self.offset(x, y)]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        assert!(x < self.width && y < self.height, "cell ({x}, {y}) out of range");
        let off = self.offset(x, y);
        self.bits.set(off, value);
    }

    /// Sets every cell with `x0 <= x < x1`, `y0 <= y < y1` (clipped).
    pub fn fill_rect(&mut self, x0: u32, y0: u32, x1: u32, y1: u32) {
        let (x1, y1) = (x1.min(self.width), y1.min(self.height));
        for y in y0..y1 {
            if x0 < x1 {
                let start = self.offset(x0, y);
                self.bits[start..start + (x1 - x0) as usize].fill(true);
            }
        }
    }

    pub fn popcount(&self) -> usize {
        self.bits.count_ones()
    }

    pub fn is_subset_of(&self, other: &Mask2D) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.bits.iter_ones().all(|i| other.bits[i])
    }

    /// Iterates set cells as `(x, y)`.
    pub fn iter_set(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width as usize;
        self.bits
            .iter_ones()
            .map(move |i| ((i % w) as u32, (i / w) as u32))
    }

    pub fn clear_where<F: Fn(u32, u32) -> bool>(&mut self, pred: F) -> usize {
        let w = self.width as usize;
        let hits: Vec<usize> = self
            .bits
            .iter_ones()
            .filter(|&i| pred((i % w) as u32, (i / w) as u32))
            .collect();
        for &i in &hits {
            self.bits.set(i, false);
        }
        hits.len()
    }

    pub fn to_rle(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for bit in self.bits.iter().by_vals() {
            if bit == current {
                len += 1;
            } else {
                runs.push(len);
                current = bit;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(width: u32, height: u32, runs: &[u32]) -> Result<Self, RleError> {
        let expected = width as u64 * height as u64;
        let covered: u64 = runs.iter().map(|&r| r as u64).sum();
        if covered != expected {
            return Err(RleError::LengthMismatch { covered, expected });
        }
        let mut mask = Self::empty(width, height);
        let mut pos = 0usize;
        for (k, &run) in runs.iter().enumerate() {
            let run = run as usize;
            if k % 2 == 1 {
                mask.bits[pos..pos + run].fill(true);
            }
            pos += run;
        }
        Ok(mask)
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }
}

/// Serialized mask as it appears on the wire and in candidate payloads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: u32,
    pub height: u32,
    pub rle: Vec<u32>,
    pub box_index: usize,
}

impl RleMask {
    pub fn from_mask(mask: &Mask2D) -> Self {
        Self {
            width: mask.width,
            height: mask.height,
            rle: mask.to_rle(),
            box_index: mask.source_box.unwrap_or(0),
        }
    }

    pub fn decode(&self) -> Result<Mask2D, RleError> {
        let mut m = Mask2D::from_rle(self.width, self.height, &self.rle)?;
        m.source_box = Some(self.box_index);
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rle_starts_with_zero_run() {
        let mut m = Mask2D::empty(4, 2);
        m.set(0, 0, true);
        m.set(1, 0, true);
        m.set(3, 1, true);
        assert_eq!(m.to_rle(), vec![0, 2, 5, 1]);
        assert_eq!(Mask2D::empty(3, 3).to_rle(), vec![9]);
        assert_eq!(Mask2D::full(2, 2).to_rle(), vec![0, 4]);
    }

    #[test]
    fn fill_rect_counts() {
        let mut m = Mask2D::empty(40, 40);
        m.fill_rect(10, 10, 20, 20);
        assert_eq!(m.popcount(), 100);
        assert!(m.get(10, 10) && m.get(19, 19) && !m.get(20, 19));
    }

    #[test]
    fn rle_length_checked() {
        assert_eq!(
            Mask2D::from_rle(2, 2, &[1, 2]),
            Err(RleError::LengthMismatch { covered: 3, expected: 4 })
        );
    }

    proptest! {
        #[test]
        fn rle_round_trip(w in 1u32..30, h in 1u32..30, cells in prop::collection::vec(any::<(u8, u8)>(), 0..200)) {
            let mut m = Mask2D::empty(w, h);
            for (x, y) in cells {
                m.set(x as u32 % w, y as u32 % h, true);
            }
            let runs = m.to_rle();
            prop_assert_eq!(runs.iter().map(|&r| r as u64).sum::<u64>(), (w * h) as u64);
            prop_assert_eq!(Mask2D::from_rle(w, h, &runs).unwrap(), m);
        }
    }
}

//! Pixel masks for labeled regions.

use std::collections::HashMap;

use crate::lineage::NodeId;

/// A labeled region as a sorted, de-duplicated list of `(row, col)` pixels.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Mask {
    pixels: Vec<(u32, u32)>,
}

pub type MaskStore = HashMap<NodeId, Mask>;

impl Mask {
    pub fn new(mut pixels: Vec<(u32, u32)>) -> Self {
        pixels.sort_unstable();
        pixels.dedup();
        Mask { pixels }
    }

    /// Axis-aligned rectangle `[r0, r1) x [c0, c1)`.
    pub fn rect(r0: u32, r1: u32, c0: u32, c1: u32) -> Self {
        let mut pixels = Vec::new();
        for r in r0..r1 {
            for c in c0..c1 {
                pixels.push((r, c));
            }
        }
        Mask { pixels }
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn pixels(&self) -> &[(u32, u32)] {
        &self.pixels
    }

    pub fn intersection(&self, other: &Mask) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < self.pixels.len() && j < other.pixels.len() {
            match self.pixels[i].cmp(&other.pixels[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    /// Intersection over union; 0 for two empty masks.
    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Fraction of `other`'s area covered by `self`.
    pub fn coverage_of(&self, other: &Mask) -> f64 {
        if other.area() == 0 {
            return 0.0;
        }
        self.intersection(other) as f64 / other.area() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_and_coverage() {
        let a = Mask::rect(0, 2, 0, 2);
        let b = Mask::rect(0, 2, 1, 3);
        assert_eq!(a.intersection(&b), 2);
        assert!((a.iou(&b) - 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.coverage_of(&b), 0.5);
        assert_eq!(Mask::default().iou(&Mask::default()), 0.0);
    }
}

//! Anchor grid construction shared verbatim by teacher and student.
//!
//! Anchors are ordered (level, row, col, ratio); this ordering is the row
//! layout of the head outputs, the anchor assignment, and the distillation
//! pairing, so it must never change between models.

use serde::{Deserialize, Serialize};

use crate::boxes::BoxXYWH;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub image_size: usize,
    /// One stride per pyramid level.
    pub strides: Vec<usize>,
    /// One base size (pixels) per pyramid level.
    pub base_sizes: Vec<f32>,
    /// Aspect ratios w/h; anchors per cell = ratios count.
    pub ratios: Vec<f32>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            image_size: 128,
            strides: vec![8, 16, 32],
            base_sizes: vec![16.0, 32.0, 64.0],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strides.len() != self.base_sizes.len() || self.strides.is_empty() {
            return Err(Error::invalid("anchors", "strides and base_sizes must align and be non-empty"));
        }
        for &s in &self.strides {
            if s == 0 || self.image_size % s != 0 {
                return Err(Error::invalid(
                    "anchors",
                    format!("stride {s} must divide image size {}", self.image_size),
                ));
            }
        }
        if self.ratios.is_empty() {
            return Err(Error::invalid("anchors", "at least one aspect ratio required"));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.strides.len()
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.ratios.len()
    }

    pub fn num_anchors(&self) -> usize {
        self.strides
            .iter()
            .map(|s| {
                let g = self.image_size / s;
                g * g * self.ratios.len()
            })
            .sum()
    }

    /// Generate the full anchor list, row i = [x, y, w, h] top-left form.
    pub fn generate(&self) -> Result<AnchorSet> {
        self.validate()?;
        let mut boxes = Vec::with_capacity(self.num_anchors() * 4);
        for (li, (&stride, &base)) in self.strides.iter().zip(&self.base_sizes).enumerate() {
            let grid = self.image_size / stride;
            let _ = li;
            for row in 0..grid {
                for col in 0..grid {
                    let cx = (col as f32 + 0.5) * stride as f32;
                    let cy = (row as f32 + 0.5) * stride as f32;
                    for &ratio in &self.ratios {
                        let w = base * ratio.sqrt();
                        let h = base / ratio.sqrt();
                        boxes.extend_from_slice(&[cx - w / 2.0, cy - h / 2.0, w, h]);
                    }
                }
            }
        }
        let count = boxes.len() / 4;
        Ok(AnchorSet { boxes, count, image_size: self.image_size as f32 })
    }
}

/// Flat anchor rows plus metadata.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    /// [count * 4] rows of (x, y, w, h).
    pub boxes: Vec<f32>,
    pub count: usize,
    pub image_size: f32,
}

impl AnchorSet {
    pub fn get(&self, i: usize) -> BoxXYWH {
        BoxXYWH::from_slice(&self.boxes[i * 4..i * 4 + 4])
    }

    /// Decode/clip bounds: [W, H, W_max, H_max].
    pub fn bounds(&self) -> [f32; 4] {
        [self.image_size, self.image_size, self.image_size, self.image_size]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_1008_anchors() {
        let cfg = AnchorConfig::default();
        assert_eq!(cfg.num_anchors(), (16 * 16 + 8 * 8 + 4 * 4) * 3);
        let set = cfg.generate().unwrap();
        assert_eq!(set.count, 1008);
    }

    #[test]
    fn unit_ratio_gives_square_anchor() {
        let cfg = AnchorConfig {
            image_size: 64,
            strides: vec![32],
            base_sizes: vec![32.0],
            ratios: vec![1.0],
        };
        let set = cfg.generate().unwrap();
        let a = set.get(0);
        assert_eq!((a.w, a.h), (32.0, 32.0));
    }

    #[test]
    fn shifted_cell_moves_one_stride() {
        let cfg = AnchorConfig::default();
        let set = cfg.generate().unwrap();
        let per_cell = cfg.anchors_per_cell();
        // cells (0,0) and (0,1) at level 0: consecutive cell groups.
        let a = set.get(0);
        let b = set.get(per_cell);
        assert_eq!(b.x - a.x, 8.0);
        assert_eq!(b.y, a.y);
        assert_eq!((b.w, b.h), (a.w, a.h));
    }

    #[test]
    fn indivisible_stride_rejected() {
        let cfg = AnchorConfig { image_size: 100, ..Default::default() };
        assert!(cfg.generate().is_err());
    }
}

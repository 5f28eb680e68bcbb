//! Axis-aligned boxes in pixel coordinates, top-left + size form, and IoU.

use serde::{Deserialize, Serialize};

/// [x, y, w, h] with (x, y) the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXYWH {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl BoxXYWH {
    pub fn new(x: f32, y: f32, w: f32, h: f32) -> Self {
        BoxXYWH { x, y, w, h }
    }

    pub fn from_slice(v: &[f32]) -> Self {
        BoxXYWH { x: v[0], y: v[1], w: v[2], h: v[3] }
    }

    pub fn area(&self) -> f32 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn as_array(&self) -> [f32; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BoxXYWH, b: &BoxXYWH) -> f32 {
    let x1 = a.x.max(b.x);
    let y1 = a.y.max(b.y);
    let x2 = (a.x + a.w).min(b.x + b.w);
    let y2 = (a.y + a.h).min(b.y + b.h);
    let inter = (x2 - x1).max(0.0) * (y2 - y1).max(0.0);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Anchor-relative encoding: the inverse of the decode used at inference.
pub fn encode_box(gt: &BoxXYWH, anchor: &BoxXYWH) -> [f32; 4] {
    [
        (gt.x - anchor.x) / anchor.w,
        (gt.y - anchor.y) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_boxes_iou_one() {
        let b = BoxXYWH::new(3.0, 4.0, 10.0, 6.0);
        assert_eq!(iou(&b, &b), 1.0);
    }

    #[test]
    fn disjoint_boxes_iou_zero() {
        let a = BoxXYWH::new(0.0, 0.0, 2.0, 2.0);
        let b = BoxXYWH::new(5.0, 5.0, 2.0, 2.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn unit_grid_case() {
        // [0,0,2,2] vs [1,1,2,2]: intersection 1 cell, union 7 cells.
        let a = BoxXYWH::new(0.0, 0.0, 2.0, 2.0);
        let b = BoxXYWH::new(1.0, 1.0, 2.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-6);
    }
}

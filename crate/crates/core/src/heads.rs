//! Classification and regression heads, shared across pyramid levels.
//!
//! Output rows follow the anchor ordering (level, row, col, ratio): each
//! level map [n, A*K, h, w] is permuted to [n, h, w, A, K] and flattened, so
//! row (h*W + w)*A + a within a level lines up with the generated anchors.

use crate::error::Result;
use crate::fusion::FusedPyramid;
use crate::nn::Conv2dLayer;
use crate::params::{ParamStore, Run};
use crate::tape::TensorId;

pub struct DetectionHeads {
    pub num_classes: usize,
    pub anchors_per_cell: usize,
    cls_tower: Conv2dLayer,
    cls_out: Conv2dLayer,
    reg_tower: Conv2dLayer,
    reg_out: Conv2dLayer,
}

impl DetectionHeads {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, num_classes: usize, anchors_per_cell: usize) -> Self {
        DetectionHeads {
            num_classes,
            anchors_per_cell,
            cls_tower: Conv2dLayer::new(store, &format!("{name}.cls.tower"), channels, channels, 3, 1, true),
            // Final prediction layers start at zero: uniform class probs and
            // anchor-identity boxes.
            cls_out: Conv2dLayer::new_zero(store, &format!("{name}.cls.out"), channels, anchors_per_cell * num_classes, 3, 1),
            reg_tower: Conv2dLayer::new(store, &format!("{name}.reg.tower"), channels, channels, 3, 1, true),
            reg_out: Conv2dLayer::new_zero(store, &format!("{name}.reg.out"), channels, anchors_per_cell * 4, 3, 1),
        }
    }

    fn branch(&self, run: &mut Run, x: TensorId, tower: &Conv2dLayer, out: &Conv2dLayer, k: usize) -> Result<TensorId> {
        let h = tower.forward(run, x)?;
        let h = run.tape.hard_swish(h)?;
        let z = out.forward(run, h)?;
        // [n, A*k, h, w] -> [n, h, w, A*k] -> [n, h*w*A, k]
        let shape = run.tape.shape(z).to_vec();
        let (n, hh, ww) = (shape[0], shape[2], shape[3]);
        let p = run.tape.permute(z, &[0, 2, 3, 1])?;
        run.tape.reshape(p, vec![n, hh * ww * self.anchors_per_cell, k])
    }

    /// Returns (cls_rows [n*R, C], reg_rows [n*R, 4]) with R total anchors.
    pub fn forward(&self, run: &mut Run, fused: &FusedPyramid) -> Result<(TensorId, TensorId)> {
        let mut cls_levels = Vec::new();
        let mut reg_levels = Vec::new();
        let mut batch = 0usize;
        for &level in &fused.levels {
            batch = run.tape.shape(level)[0];
            cls_levels.push(self.branch(run, level, &self.cls_tower, &self.cls_out, self.num_classes)?);
            reg_levels.push(self.branch(run, level, &self.reg_tower, &self.reg_out, 4)?);
        }
        let cls = run.tape.concat(&cls_levels, 1)?;
        let reg = run.tape.concat(&reg_levels, 1)?;
        let rows = run.tape.shape(cls)[1];
        let cls = run.tape.reshape(cls, vec![batch * rows, self.num_classes])?;
        let reg = run.tape.reshape(reg, vec![batch * rows, 4])?;
        Ok((cls, reg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusedPyramid;
    use crate::tape::Tape;

    #[test]
    fn zero_init_outputs_and_row_counts() {
        let mut store = ParamStore::new(5);
        let heads = DetectionHeads::new(&mut store, "h", 6, 3, 3);
        let mut tape = Tape::new();
        let mut run = Run::new(&mut tape, &mut store, false, false);
        let l0 = run.tape.leaf(vec![0.7; 2 * 6 * 8 * 8], vec![2, 6, 8, 8]).unwrap();
        let l1 = run.tape.leaf(vec![0.7; 2 * 6 * 4 * 4], vec![2, 6, 4, 4]).unwrap();
        let fused = FusedPyramid { levels: vec![l0, l1], channel_gates: vec![], spatial_gates: vec![] };
        let (cls, reg) = heads.forward(&mut run, &fused).unwrap();
        let rows = (8 * 8 + 4 * 4) * 3;
        assert_eq!(run.tape.shape(cls), &[2 * rows, 3]);
        assert_eq!(run.tape.shape(reg), &[2 * rows, 4]);
        // zero-initialized prediction layers emit all-zero logits/offsets
        assert!(run.tape.data(cls).iter().all(|&v| v == 0.0));
        assert!(run.tape.data(reg).iter().all(|&v| v == 0.0));
    }
}

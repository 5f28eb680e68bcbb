//! CBAM cross-modal fusion: per pyramid level, concatenate the RGB and
//! thermal features along channels, gate them with channel attention (MLP
//! over average- and max-pooled descriptors) then spatial attention (7x7 conv
//! over channel-pooled maps), and project back to the pyramid width.
//!
//! One parameter set is shared across levels; the sigmoid gates are retained
//! per level as diagnostics.

use crate::backbone::{FeaturePyramid, Modality};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2dLayer, Linear};
use crate::params::{ParamStore, Run};
use crate::tape::TensorId;

/// Fused pyramid plus the attention gates that produced it.
pub struct FusedPyramid {
    pub levels: Vec<TensorId>,
    /// Per level: [n, 2*C] channel gate in (0,1).
    pub channel_gates: Vec<TensorId>,
    /// Per level: [n, 1, h, w] spatial gate in (0,1).
    pub spatial_gates: Vec<TensorId>,
}

pub struct CbamFusion {
    pub in_channels: usize,
    pub out_channels: usize,
    mlp_reduce: Linear,
    mlp_expand: Linear,
    spatial_conv: Conv2dLayer,
    project: Conv2dLayer,
    bn: BatchNorm,
}

impl CbamFusion {
    /// `channels` is the per-modality pyramid width; the concatenated input
    /// has twice that. Channel-MLP reduction ratio 4, spatial kernel 7.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let cat = 2 * channels;
        let hidden = (cat / 4).max(1);
        Ok(CbamFusion {
            in_channels: cat,
            out_channels: channels,
            mlp_reduce: Linear::new(store, &format!("{name}.ca.reduce"), cat, hidden),
            mlp_expand: Linear::new(store, &format!("{name}.ca.expand"), hidden, cat),
            spatial_conv: Conv2dLayer::new(store, &format!("{name}.sa.conv"), 2, 1, 7, 1, true),
            project: Conv2dLayer::new(store, &format!("{name}.project"), cat, channels, 1, 1, true),
            bn: BatchNorm::new(store, &format!("{name}.bn"), channels),
        })
    }

    fn channel_attention(&self, run: &mut Run, x: TensorId) -> Result<TensorId> {
        let avg = run.tape.global_avg_pool(x)?;
        let mx = run.tape.global_max_pool(x)?;
        let a = self.mlp_forward(run, avg)?;
        let b = self.mlp_forward(run, mx)?;
        let s = run.tape.add(a, b)?;
        run.tape.sigmoid(s)
    }

    fn mlp_forward(&self, run: &mut Run, x: TensorId) -> Result<TensorId> {
        let h = self.mlp_reduce.forward(run, x)?;
        let h = run.tape.relu(h)?;
        self.mlp_expand.forward(run, h)
    }

    fn spatial_attention(&self, run: &mut Run, x: TensorId) -> Result<TensorId> {
        let avg = run.tape.channel_mean(x)?;
        let mx = run.tape.channel_max(x)?;
        let cat = run.tape.concat(&[avg, mx], 1)?;
        let s = self.spatial_conv.forward(run, cat)?;
        run.tape.sigmoid(s)
    }

    /// Fuse one level pair.
    pub fn fuse_level(&self, run: &mut Run, rgb: TensorId, thm: TensorId) -> Result<(TensorId, TensorId, TensorId)> {
        if run.tape.shape(rgb) != run.tape.shape(thm) {
            return Err(Error::ShapeMismatch {
                op: "fuse_modalities",
                lhs: run.tape.shape(rgb).to_vec(),
                rhs: run.tape.shape(thm).to_vec(),
            });
        }
        let cat = run.tape.concat(&[rgb, thm], 1)?;
        let cgate = self.channel_attention(run, cat)?;
        let x1 = run.tape.mul_channel(cat, cgate)?;
        let sgate = self.spatial_attention(run, x1)?;
        let x2 = run.tape.mul_spatial(x1, sgate)?;
        let y = self.project.forward(run, x2)?;
        let y = self.bn.forward(run, y)?;
        Ok((y, cgate, sgate))
    }

    /// Fuse full pyramids (levels must match pairwise in shape).
    pub fn forward(&self, run: &mut Run, rgb: &FeaturePyramid, thm: &FeaturePyramid) -> Result<FusedPyramid> {
        if rgb.levels.len() != thm.levels.len() {
            return Err(Error::invalid(
                "fuse_modalities",
                format!("{} rgb levels vs {} thermal levels", rgb.levels.len(), thm.levels.len()),
            ));
        }
        debug_assert!(rgb.modality != Modality::Thermal && thm.modality != Modality::Rgb);
        let mut levels = Vec::new();
        let mut channel_gates = Vec::new();
        let mut spatial_gates = Vec::new();
        for (&r, &t) in rgb.levels.iter().zip(&thm.levels) {
            let (y, cg, sg) = self.fuse_level(run, r, t)?;
            levels.push(y);
            channel_gates.push(cg);
            spatial_gates.push(sg);
        }
        Ok(FusedPyramid { levels, channel_gates, spatial_gates })
    }
}

//! Per-modality multi-scale feature extraction: a stem convolution followed
//! by MBConv stages, exporting the last L stage outputs as a feature pyramid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2dLayer, MbConv};
use crate::params::{ParamStore, Run};
use crate::tape::TensorId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Rgb,
    Thermal,
    Fused,
}

/// One backbone stage: `blocks` MBConvs, the first at `stride`, the rest at 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub blocks: usize,
    pub channels: usize,
    pub expansion: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Every stage downsamples by 2; the last `levels` stages are exported.
    pub stages: Vec<StageSpec>,
    pub levels: usize,
}

impl BackboneConfig {
    /// Spatial sizes must divide by 2^(levels + 2): stem stride 2 plus one
    /// stride-2 stage per exported level and one before the first export.
    pub fn required_divisor(&self) -> usize {
        1 << (self.levels + 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 || self.stages.len() < self.levels {
            return Err(Error::invalid(
                "backbone",
                format!("{} stages cannot export {} pyramid levels", self.stages.len(), self.levels),
            ));
        }
        if self.stages.len() != self.levels + 1 {
            return Err(Error::invalid(
                "backbone",
                format!(
                    "expected {} stages (one per power of two below stride 8, plus {} exports), got {}",
                    self.levels + 1,
                    self.levels,
                    self.stages.len()
                ),
            ));
        }
        Ok(())
    }

    /// Channel count of each exported level.
    pub fn level_channels(&self) -> Vec<usize> {
        self.stages[self.stages.len() - self.levels..]
            .iter()
            .map(|s| s.channels)
            .collect()
    }
}

/// Multi-scale features for one modality. `levels[l]` has spatial size
/// H / 2^(l+3) for input height H (strides 8, 16, 32 for L = 3).
pub struct FeaturePyramid {
    pub levels: Vec<TensorId>,
    pub modality: Modality,
}

pub struct Backbone {
    pub cfg: BackboneConfig,
    stem_conv: Conv2dLayer,
    stem_bn: BatchNorm,
    stages: Vec<Vec<MbConv>>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, name: &str, cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let stem_conv = Conv2dLayer::new(store, &format!("{name}.stem.conv"), cfg.in_channels, cfg.stem_channels, 3, 2, false);
        let stem_bn = BatchNorm::new(store, &format!("{name}.stem.bn"), cfg.stem_channels);
        let mut stages = Vec::new();
        let mut cin = cfg.stem_channels;
        for (si, spec) in cfg.stages.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..spec.blocks {
                let stride = if bi == 0 { 2 } else { 1 };
                let cout = spec.channels;
                blocks.push(MbConv::new(
                    store,
                    &format!("{name}.s{si}.b{bi}"),
                    cin,
                    cout,
                    spec.expansion,
                    3,
                    stride,
                )?);
                cin = cout;
            }
            stages.push(blocks);
        }
        Ok(Backbone { cfg, stem_conv, stem_bn, stages })
    }

    /// Run the backbone on a [n, in_channels, h, w] image batch normalized to
    /// [0, 1], producing the raw (pre-BiFPN) pyramid.
    pub fn forward(&self, run: &mut Run, image: TensorId) -> Result<FeaturePyramid> {
        let shape = run.tape.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                op: "backbone_forward",
                lhs: shape,
                rhs: vec![0, self.cfg.in_channels, 0, 0],
            });
        }
        let div = self.cfg.required_divisor();
        if shape[2] % div != 0 || shape[3] % div != 0 {
            return Err(Error::invalid(
                "backbone_forward",
                format!("input {}x{} must be divisible by {div} for {} pyramid levels", shape[2], shape[3], self.cfg.levels),
            ));
        }
        let modality = if self.cfg.in_channels == 3 { Modality::Rgb } else { Modality::Thermal };

        let mut h = self.stem_conv.forward(run, image)?;
        h = self.stem_bn.forward(run, h)?;
        h = run.tape.hard_swish(h)?;

        let first_export = self.stages.len() - self.cfg.levels;
        let mut levels = Vec::with_capacity(self.cfg.levels);
        for (si, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                h = block.forward(run, h)?;
            }
            if si >= first_export {
                levels.push(h);
            }
        }
        Ok(FeaturePyramid { levels, modality })
    }
}

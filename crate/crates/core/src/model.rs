//! Full detector assembly: two modality backbones, per-modality BiFPN,
//! CBAM fusion, shared heads — plus the teacher/student presets and the
//! teacher-free end-to-end inference path.

use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorConfig, AnchorSet};
use crate::backbone::{Backbone, BackboneConfig, Modality, StageSpec};
use crate::bifpn::{zero_pyramid, BiFpn};
use crate::detect::{postprocess_frame, DetectThresholds, DetectionSet};
use crate::error::{Error, Result};
use crate::fusion::{CbamFusion, FusedPyramid};
use crate::heads::DetectionHeads;
use crate::kernels;
use crate::params::{ParamStore, Run};
use crate::tape::{decode_boxes_raw, Tape, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Teacher,
    Student,
}

/// Which modality branches feed the fusion module. Ablations replace the
/// absent branch with zeros after BiFPN, keeping a single code path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModalityMode {
    RgbOnly,
    ThermalOnly,
    Fusion,
}

impl ModalityMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rgb" | "rgb-only" => Ok(ModalityMode::RgbOnly),
            "thermal" | "thermal-only" => Ok(ModalityMode::ThermalOnly),
            "fusion" => Ok(ModalityMode::Fusion),
            other => Err(Error::Config(format!("unknown modality mode `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ModalityMode::RgbOnly => "rgb-only",
            ModalityMode::ThermalOnly => "thermal-only",
            ModalityMode::Fusion => "fusion",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub role: Role,
    pub num_classes: usize,
    pub image_size: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    pub fpn_channels: usize,
    pub bifpn_iterations: usize,
    pub anchors: AnchorConfig,
}

impl DetectorConfig {
    pub fn teacher() -> Self {
        DetectorConfig {
            role: Role::Teacher,
            num_classes: 3,
            image_size: 128,
            stem_channels: 16,
            stages: vec![
                StageSpec { blocks: 1, channels: 24, expansion: 1 },
                StageSpec { blocks: 2, channels: 32, expansion: 4 },
                StageSpec { blocks: 2, channels: 48, expansion: 4 },
                StageSpec { blocks: 2, channels: 64, expansion: 4 },
            ],
            fpn_channels: 32,
            bifpn_iterations: 1,
            anchors: AnchorConfig::default(),
        }
    }

    pub fn student() -> Self {
        DetectorConfig {
            role: Role::Student,
            num_classes: 3,
            image_size: 128,
            stem_channels: 8,
            stages: vec![
                StageSpec { blocks: 1, channels: 12, expansion: 1 },
                StageSpec { blocks: 1, channels: 16, expansion: 3 },
                StageSpec { blocks: 1, channels: 24, expansion: 3 },
                StageSpec { blocks: 1, channels: 32, expansion: 3 },
            ],
            fpn_channels: 24,
            bifpn_iterations: 1,
            anchors: AnchorConfig::default(),
        }
    }

    pub fn for_role(role: Role) -> Self {
        match role {
            Role::Teacher => Self::teacher(),
            Role::Student => Self::student(),
        }
    }

    pub fn levels(&self) -> usize {
        self.anchors.levels()
    }

    fn backbone_cfg(&self, in_channels: usize) -> BackboneConfig {
        BackboneConfig {
            in_channels,
            stem_channels: self.stem_channels,
            stages: self.stages.clone(),
            levels: self.levels(),
        }
    }
}

pub struct Detector {
    pub cfg: DetectorConfig,
    pub rgb_backbone: Backbone,
    pub thm_backbone: Backbone,
    pub rgb_bifpn: BiFpn,
    pub thm_bifpn: BiFpn,
    pub fusion: CbamFusion,
    pub heads: DetectionHeads,
}

/// Raw head outputs for one forward pass. `cls_rows` and `reg_rows` are
/// [batch * num_anchors, C] / [.., 4] in anchor order.
pub struct DetectorOutputs {
    pub cls_rows: TensorId,
    pub reg_rows: TensorId,
    pub fused: FusedPyramid,
    pub batch: usize,
}

impl Detector {
    /// Register every parameter of the model under `prefix` and wire up the
    /// module graph. Construction order is deterministic.
    pub fn build(store: &mut ParamStore, prefix: &str, cfg: DetectorConfig) -> Result<Self> {
        cfg.anchors.validate()?;
        if cfg.anchors.image_size != cfg.image_size {
            return Err(Error::Config(format!(
                "anchor image size {} != model image size {}",
                cfg.anchors.image_size, cfg.image_size
            )));
        }
        let rgb_backbone = Backbone::new(store, &format!("{prefix}.backbone.rgb"), cfg.backbone_cfg(3))?;
        let thm_backbone = Backbone::new(store, &format!("{prefix}.backbone.thm"), cfg.backbone_cfg(1))?;
        let level_channels = rgb_backbone.cfg.level_channels();
        let rgb_bifpn = BiFpn::new(store, &format!("{prefix}.bifpn.rgb"), &level_channels, cfg.fpn_channels, cfg.bifpn_iterations)?;
        let thm_bifpn = BiFpn::new(store, &format!("{prefix}.bifpn.thm"), &level_channels, cfg.fpn_channels, cfg.bifpn_iterations)?;
        let fusion = CbamFusion::new(store, &format!("{prefix}.fusion"), cfg.fpn_channels)?;
        let heads = DetectionHeads::new(
            store,
            &format!("{prefix}.heads"),
            cfg.fpn_channels,
            cfg.num_classes,
            cfg.anchors.anchors_per_cell(),
        );
        Ok(Detector { cfg, rgb_backbone, thm_backbone, rgb_bifpn, thm_bifpn, fusion, heads })
    }

    fn fused_level_shapes(&self, batch: usize) -> Vec<Vec<usize>> {
        self.cfg
            .anchors
            .strides
            .iter()
            .map(|&s| {
                let g = self.cfg.image_size / s;
                vec![batch, self.cfg.fpn_channels, g, g]
            })
            .collect()
    }

    /// Full forward pass. `rgb` is [n,3,H,W], `thm` is [n,1,H,W]; branches
    /// not selected by `mode` are replaced by zero pyramids before fusion and
    /// their backbones are skipped entirely.
    pub fn forward(&self, run: &mut Run, rgb: Option<TensorId>, thm: Option<TensorId>, mode: ModalityMode) -> Result<DetectorOutputs> {
        let batch = match (rgb, thm) {
            (Some(t), _) => run.tape.shape(t)[0],
            (_, Some(t)) => run.tape.shape(t)[0],
            (None, None) => return Err(Error::invalid("detect", "at least one modality input required")),
        };
        let use_rgb = mode != ModalityMode::ThermalOnly;
        let use_thm = mode != ModalityMode::RgbOnly;

        let rgb_pyr = if use_rgb {
            let x = rgb.ok_or_else(|| Error::invalid("detect", "rgb input required by mode"))?;
            let raw = self.rgb_backbone.forward(run, x)?;
            self.rgb_bifpn.forward(run, &raw)?
        } else {
            zero_pyramid(run.tape, &self.fused_level_shapes(batch), Modality::Rgb)
        };
        let thm_pyr = if use_thm {
            let x = thm.ok_or_else(|| Error::invalid("detect", "thermal input required by mode"))?;
            let raw = self.thm_backbone.forward(run, x)?;
            self.thm_bifpn.forward(run, &raw)?
        } else {
            zero_pyramid(run.tape, &self.fused_level_shapes(batch), Modality::Thermal)
        };

        let fused = self.fusion.forward(run, &rgb_pyr, &thm_pyr)?;
        let (cls_rows, reg_rows) = self.heads.forward(run, &fused)?;
        Ok(DetectorOutputs { cls_rows, reg_rows, fused, batch })
    }

    /// Teacher-free end-to-end inference on a batch of frames already
    /// normalized to [0,1]. Deterministic; BN uses running statistics.
    pub fn detect_batch(
        &self,
        store: &mut ParamStore,
        rgb: &[f32],
        thm: &[f32],
        batch: usize,
        frame_ids: &[u64],
        mode: ModalityMode,
        anchors: &AnchorSet,
        thresholds: &DetectThresholds,
    ) -> Result<Vec<DetectionSet>> {
        let hw = self.cfg.image_size;
        let mut tape = Tape::inference();
        let mut run = Run::new(&mut tape, store, false, true);
        let rgb_id = if mode != ModalityMode::ThermalOnly {
            Some(run.tape.leaf(rgb.to_vec(), vec![batch, 3, hw, hw])?)
        } else {
            None
        };
        let thm_id = if mode != ModalityMode::RgbOnly {
            Some(run.tape.leaf(thm.to_vec(), vec![batch, 1, hw, hw])?)
        } else {
            None
        };
        let out = self.forward(&mut run, rgb_id, thm_id, mode)?;
        let rows = anchors.count;
        let ncls = self.cfg.num_classes;
        let cls = run.tape.data(out.cls_rows);
        let reg = run.tape.data(out.reg_rows);
        let mut sets = Vec::with_capacity(batch);
        for b in 0..batch {
            let logits = &cls[b * rows * ncls..(b + 1) * rows * ncls];
            let probs = kernels::softmax_rows(logits, rows, ncls, 1.0);
            let offsets = &reg[b * rows * 4..(b + 1) * rows * 4];
            let boxes = decode_boxes_raw(offsets, &anchors.boxes, anchors.bounds());
            sets.push(postprocess_frame(frame_ids[b], &probs, &boxes, ncls, thresholds)?);
        }
        Ok(sets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn teacher_student_param_ratio_at_least_two() {
        let mut ts = ParamStore::new(0);
        Detector::build(&mut ts, "teacher", DetectorConfig::teacher()).unwrap();
        let mut ss = ParamStore::new(0);
        Detector::build(&mut ss, "student", DetectorConfig::student()).unwrap();
        let t = ts.count_trainable("teacher");
        let s = ss.count_trainable("student");
        assert!(t >= 2 * s, "teacher {t} params vs student {s}");
    }

    #[test]
    fn untrained_detector_is_silent_at_half_threshold() {
        // Zero-init heads give uniform softmax 1/3 < 0.5.
        let cfg = DetectorConfig::student();
        let mut store = ParamStore::new(2);
        let det = Detector::build(&mut store, "m", cfg.clone()).unwrap();
        let anchors = cfg.anchors.generate().unwrap();
        let rgb = vec![0.5f32; 3 * 128 * 128];
        let thm = vec![0.5f32; 128 * 128];
        let th = DetectThresholds { score: 0.5, ..Default::default() };
        let sets = det
            .detect_batch(&mut store, &rgb, &thm, 1, &[0], ModalityMode::Fusion, &anchors, &th)
            .unwrap();
        assert!(sets[0].detections.is_empty());
    }

    #[test]
    fn rgb_and_thm_backbones_are_independent() {
        let cfg = DetectorConfig::student();
        let mut store = ParamStore::new(2);
        let det = Detector::build(&mut store, "m", cfg).unwrap();
        // Same single-channel content fed as thermal and replicated as RGB.
        let mut tape = Tape::inference();
        let mut run = Run::new(&mut tape, &mut store, false, true);
        let gray: Vec<f32> = (0..128 * 128).map(|v| ((v % 97) as f32) / 97.0).collect();
        let rgb: Vec<f32> = gray.iter().cycle().take(3 * 128 * 128).cloned().collect();
        let rgb_id = run.tape.leaf(rgb, vec![1, 3, 128, 128]).unwrap();
        let thm_id = run.tape.leaf(gray, vec![1, 1, 128, 128]).unwrap();
        let rp = det.rgb_backbone.forward(&mut run, rgb_id).unwrap();
        let tp = det.thm_backbone.forward(&mut run, thm_id).unwrap();
        let a = run.tape.data(rp.levels[0]);
        let b = run.tape.data(tp.levels[0]);
        assert!(a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-4), "pyramids should differ");
    }
}

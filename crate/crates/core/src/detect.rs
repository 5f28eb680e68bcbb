//! Detection post-processing: confidence thresholding, greedy per-class NMS,
//! and the serializable per-frame detection set.

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BoxXYWH};
use crate::error::{Error, Result};

/// One scored detection. `class_index` is 0-based; serialized `class_id` is
/// 1-based to match annotation files.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoxXYWH,
    pub class_index: usize,
    pub score: f32,
    pub probs: Vec<f32>,
}

/// Detections for one frame.
#[derive(Debug, Clone, Default)]
pub struct DetectionSet {
    pub frame_id: u64,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectionJson {
    bbox: [f32; 4],
    class_id: usize,
    score: f32,
    probs: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameJson {
    frame_id: u64,
    detections: Vec<DetectionJson>,
}

impl DetectionSet {
    /// One JSON object per frame, suitable for JSON-lines dumps.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(FrameJson {
            frame_id: self.frame_id,
            detections: self
                .detections
                .iter()
                .map(|d| DetectionJson {
                    bbox: d.bbox.as_array(),
                    class_id: d.class_index + 1,
                    score: d.score,
                    probs: d.probs.clone(),
                })
                .collect(),
        })
        .expect("detection serialization cannot fail")
    }

    pub fn from_json(line: &str) -> Result<Self> {
        let f: FrameJson = serde_json::from_str(line)?;
        Ok(DetectionSet {
            frame_id: f.frame_id,
            detections: f
                .detections
                .into_iter()
                .map(|d| Detection {
                    bbox: BoxXYWH::from_slice(&d.bbox),
                    class_index: d.class_id - 1,
                    score: d.score,
                    probs: d.probs,
                })
                .collect(),
        })
    }
}

/// Candidate for NMS: original index kept for oracle comparisons.
#[derive(Debug, Clone, Copy)]
pub struct NmsBox {
    pub bbox: BoxXYWH,
    pub class_index: usize,
    pub score: f32,
    pub index: usize,
}

/// Greedy per-class non-maximum suppression.
///
/// Candidates are visited in descending score order (ties broken by lower
/// original index); a candidate survives if its IoU with every same-class
/// survivor is <= `iou_thresh` and its score >= `score_thresh`. Returns the
/// surviving original indices in emission order (scores non-increasing).
pub fn nms(candidates: &[NmsBox], iou_thresh: f32, score_thresh: f32) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&iou_thresh) || iou_thresh == 0.0 {
        return Err(Error::invalid("nms", format!("iou threshold must lie in (0, 1), got {iou_thresh}")));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .score
            .partial_cmp(&candidates[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(candidates[a].index.cmp(&candidates[b].index))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let c = &candidates[i];
        if c.score < score_thresh {
            continue;
        }
        let suppressed = kept.iter().any(|&j| {
            let k = &candidates[j];
            k.class_index == c.class_index && iou(&k.bbox, &c.bbox) > iou_thresh
        });
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept.iter().map(|&i| candidates[i].index).collect())
}

/// Post-processing thresholds for `detect`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DetectThresholds {
    pub score: f32,
    pub nms_iou: f32,
    pub max_detections: usize,
}

impl Default for DetectThresholds {
    fn default() -> Self {
        DetectThresholds { score: 0.3, nms_iou: 0.5, max_detections: 100 }
    }
}

/// Assemble a frame's detection set from per-anchor class probabilities and
/// decoded boxes, applying thresholding, NMS and the detection cap.
pub fn postprocess_frame(
    frame_id: u64,
    probs: &[f32],
    boxes: &[f32],
    num_classes: usize,
    thresholds: &DetectThresholds,
) -> Result<DetectionSet> {
    let rows = probs.len() / num_classes;
    debug_assert_eq!(boxes.len(), rows * 4);
    let mut candidates = Vec::new();
    for r in 0..rows {
        let p = &probs[r * num_classes..(r + 1) * num_classes];
        let (mut best_c, mut best_p) = (0usize, p[0]);
        for (c, &v) in p.iter().enumerate().skip(1) {
            if v > best_p {
                best_p = v;
                best_c = c;
            }
        }
        if best_p < thresholds.score {
            continue;
        }
        candidates.push(NmsBox {
            bbox: BoxXYWH::from_slice(&boxes[r * 4..r * 4 + 4]),
            class_index: best_c,
            score: best_p,
            index: r,
        });
    }
    let local: Vec<NmsBox> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| NmsBox { index: i, ..*c })
        .collect();
    let kept = nms(&local, thresholds.nms_iou, thresholds.score)?;
    let mut detections: Vec<Detection> = kept
        .into_iter()
        .take(thresholds.max_detections)
        .map(|i| {
            let c = &candidates[i];
            Detection {
                bbox: c.bbox,
                class_index: c.class_index,
                score: c.score,
                probs: probs[c.index * num_classes..(c.index + 1) * num_classes].to_vec(),
            }
        })
        .collect();
    detections.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    Ok(DetectionSet { frame_id, detections })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nb(x: f32, y: f32, w: f32, h: f32, class: usize, score: f32, index: usize) -> NmsBox {
        NmsBox { bbox: BoxXYWH::new(x, y, w, h), class_index: class, score, index }
    }

    #[test]
    fn duplicate_boxes_keep_highest_score() {
        let boxes = vec![nb(0.0, 0.0, 4.0, 4.0, 0, 0.9, 0), nb(0.0, 0.0, 4.0, 4.0, 0, 0.8, 1)];
        let kept = nms(&boxes, 0.5, 0.0).unwrap();
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn disjoint_boxes_all_survive() {
        let boxes = vec![
            nb(0.0, 0.0, 2.0, 2.0, 0, 0.5, 0),
            nb(10.0, 10.0, 2.0, 2.0, 0, 0.6, 1),
            nb(20.0, 0.0, 2.0, 2.0, 0, 0.4, 2),
        ];
        let mut kept = nms(&boxes, 0.5, 0.0).unwrap();
        kept.sort_unstable();
        assert_eq!(kept, vec![0, 1, 2]);
    }

    #[test]
    fn different_classes_do_not_suppress() {
        let boxes = vec![nb(0.0, 0.0, 4.0, 4.0, 0, 0.9, 0), nb(0.0, 0.0, 4.0, 4.0, 1, 0.8, 1)];
        assert_eq!(nms(&boxes, 0.5, 0.0).unwrap().len(), 2);
    }

    #[test]
    fn invalid_threshold_rejected() {
        assert!(nms(&[], 0.0, 0.0).is_err());
        assert!(nms(&[], 1.0, 0.0).is_err());
    }

    #[test]
    fn detection_json_roundtrip() {
        let set = DetectionSet {
            frame_id: 42,
            detections: vec![Detection {
                bbox: BoxXYWH::new(1.0, 2.0, 3.0, 4.0),
                class_index: 1,
                score: 0.75,
                probs: vec![0.1, 0.75, 0.15],
            }],
        };
        let line = set.to_json().to_string();
        assert!(line.contains("\"class_id\":2"));
        let back = DetectionSet::from_json(&line).unwrap();
        assert_eq!(back.frame_id, 42);
        assert_eq!(back.detections[0].class_index, 1);
    }
}

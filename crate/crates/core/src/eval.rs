//! Detection metrics: greedy matching, 101-point interpolated average
//! precision, mAP over IoU thresholds 0.50:0.05:0.95, and wall-clock latency
//! benchmarking.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BoxXYWH};

/// One scored detection tagged with its frame.
#[derive(Debug, Clone)]
pub struct EvalDetection {
    pub frame: usize,
    pub bbox: BoxXYWH,
    pub class_index: usize,
    pub score: f32,
}

/// One ground-truth object tagged with its frame.
#[derive(Debug, Clone)]
pub struct EvalGroundTruth {
    pub frame: usize,
    pub bbox: BoxXYWH,
    pub class_index: usize,
}

/// Confidence-ordered precision/recall sweep (f64: metric precision is not
/// bound by the model's f32).
#[derive(Debug, Clone, Default, Serialize)]
pub struct PRCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ApResult {
    pub ap: f64,
    pub curve: PRCurve,
    pub num_gts: usize,
    /// True when no ground truth existed (AP reported as 0).
    pub undefined: bool,
}

/// Average precision for one class's detections and ground truths.
///
/// Detections are visited in descending score (ties: frame, then input
/// order); each matches the highest-IoU unmatched ground truth of its frame
/// at IoU >= `iou_thresh`. AP integrates the precision envelope at the 101
/// recall points {0, 0.01, .., 1}.
pub fn average_precision(dets: &[EvalDetection], gts: &[EvalGroundTruth], iou_thresh: f32) -> ApResult {
    let num_gts = gts.len();
    if num_gts == 0 {
        return ApResult { ap: 0.0, curve: PRCurve::default(), num_gts: 0, undefined: true };
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(dets[a].frame.cmp(&dets[b].frame))
            .then(a.cmp(&b))
    });
    let mut gt_matched = vec![false; num_gts];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve = PRCurve::default();
    for &di in &order {
        let d = &dets[di];
        let mut best: Option<(usize, f32)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if g.frame != d.frame || gt_matched[gi] {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= iou_thresh && best.map(|(_, bv)| v > bv).unwrap_or(true) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                gt_matched[gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.precision.push(tp as f64 / (tp + fp) as f64);
        curve.recall.push(tp as f64 / num_gts as f64);
    }
    // precision envelope over the 101 recall grid
    let mut ap = 0.0f64;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let mut best = 0.0f64;
        for (p, rc) in curve.precision.iter().zip(&curve.recall) {
            if *rc >= r && *p > best {
                best = *p;
            }
        }
        ap += best;
    }
    ap /= 101.0;
    ApResult { ap, curve, num_gts, undefined: false }
}

pub const MAP_THRESHOLDS: [f32; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyReport {
    pub batch_size: usize,
    pub batches_measured: usize,
    pub mean_s_per_image: f64,
    pub std_s_per_image: f64,
}

/// Per-class AP at each mAP threshold, percentages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerClassAp {
    pub class_id: usize,
    pub class_name: String,
    pub ap_by_threshold: Vec<f64>,
    pub num_gts: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP interpolation scheme; recorded in every report per the protocol.
    pub interpolation: String,
    pub per_class: Vec<PerClassAp>,
    pub map_50_95: f64,
    pub map_50: f64,
    pub map_75: f64,
    pub detections: usize,
    pub ground_truths: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyReport>,
}

/// mAP over classes (those with ground truth) and IoU thresholds. Values are
/// percentages in [0, 100].
pub fn map_over_thresholds(
    dets: &[EvalDetection],
    gts: &[EvalGroundTruth],
    num_classes: usize,
    class_names: &[&str],
) -> EvalReport {
    let mut per_class = Vec::new();
    for c in 0..num_classes {
        let cd: Vec<EvalDetection> = dets.iter().filter(|d| d.class_index == c).cloned().collect();
        let cg: Vec<EvalGroundTruth> = gts.iter().filter(|g| g.class_index == c).cloned().collect();
        let ap_by_threshold: Vec<f64> = MAP_THRESHOLDS
            .iter()
            .map(|&t| average_precision(&cd, &cg, t).ap * 100.0)
            .collect();
        per_class.push(PerClassAp {
            class_id: c + 1,
            class_name: class_names.get(c).copied().unwrap_or("?").to_string(),
            ap_by_threshold,
            num_gts: cg.len(),
        });
    }
    let present: Vec<&PerClassAp> = per_class.iter().filter(|p| p.num_gts > 0).collect();
    let mean_at = |ti: usize| -> f64 {
        if present.is_empty() {
            return 0.0;
        }
        present.iter().map(|p| p.ap_by_threshold[ti]).sum::<f64>() / present.len() as f64
    };
    let map_50 = mean_at(0);
    let map_75 = mean_at(5);
    let map_50_95 = (0..MAP_THRESHOLDS.len()).map(mean_at).sum::<f64>() / MAP_THRESHOLDS.len() as f64;
    EvalReport {
        interpolation: "101-point".to_string(),
        per_class,
        map_50_95,
        map_50,
        map_75,
        detections: dets.len(),
        ground_truths: gts.len(),
        latency: None,
    }
}

impl EvalReport {
    /// Aligned text table, one row per model-style row plus per-class APs.
    pub fn to_table(&self, model_name: &str) -> String {
        let mut s = String::new();
        s.push_str(&format!("AP interpolation: {}\n", self.interpolation));
        s.push_str(&format!(
            "{:<18} {:>12} {:>9} {:>9}\n",
            "Model", "mAP@0.5:0.95", "mAP@0.5", "mAP@0.75"
        ));
        s.push_str(&format!(
            "{:<18} {:>12.1} {:>9.1} {:>9.1}\n",
            model_name, self.map_50_95, self.map_50, self.map_75
        ));
        s.push_str(&format!("{:<18} {:>12} {:>9} {:>9}\n", "per-class", "AP@0.5:0.95", "AP@0.5", "AP@0.75"));
        for p in &self.per_class {
            let mean: f64 = p.ap_by_threshold.iter().sum::<f64>() / p.ap_by_threshold.len() as f64;
            s.push_str(&format!(
                "  {:<16} {:>12.1} {:>9.1} {:>9.1}  ({} gts)\n",
                p.class_name, mean, p.ap_by_threshold[0], p.ap_by_threshold[5], p.num_gts
            ));
        }
        if let Some(l) = &self.latency {
            s.push_str(&format!(
                "latency: {:.6} s/image (std {:.6}) at batch {} over {} batches\n",
                l.mean_s_per_image, l.std_s_per_image, l.batch_size, l.batches_measured
            ));
        }
        s
    }
}

/// Wall-clock benchmark of `run_batch`; `warmup` calls are discarded, then
/// `batches` calls are timed. Mean and std are per image.
pub fn bench_latency<F: FnMut()>(mut run_batch: F, batch_size: usize, batches: usize, warmup: usize) -> LatencyReport {
    for _ in 0..warmup {
        run_batch();
    }
    let mut per_image = Vec::with_capacity(batches);
    for _ in 0..batches {
        let t0 = Instant::now();
        run_batch();
        per_image.push(t0.elapsed().as_secs_f64() / batch_size as f64);
    }
    let mean = per_image.iter().sum::<f64>() / batches as f64;
    let var = per_image.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / batches as f64;
    LatencyReport {
        batch_size,
        batches_measured: batches,
        mean_s_per_image: mean,
        std_s_per_image: var.sqrt(),
    }
}

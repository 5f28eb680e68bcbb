//! Training losses: anchor assignment against ground truth, the supervised
//! classification/regression terms, teacher-to-student class and box
//! distillation, fused-feature distillation, and the weighted composite.
//!
//! Teacher quantities enter every term as constant leaves, so gradients flow
//! into the student (and the feature adapters) only.

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::anchors::AnchorSet;
use crate::boxes::{encode_box, iou, BoxXYWH};
use crate::data::AnnotationSet;
use crate::error::{Error, Result};
use crate::fusion::FusedPyramid;
use crate::kernels;
use crate::model::DetectorOutputs;
use crate::nn::Conv2dLayer;
use crate::params::{ParamStore, Run};
use crate::tape::{Tape, TensorId};

/// IoU at or above which an anchor is positive.
pub const POSITIVE_IOU: f32 = 0.5;
/// IoU below which an anchor is negative; the band between is ignored.
pub const NEGATIVE_IOU: f32 = 0.4;
/// Sampled negatives per positive for the background term.
pub const NEG_PER_POS: usize = 3;
/// Negatives sampled when a batch has no positives at all.
pub const NEG_FLOOR: usize = 16;

/// Weights of every loss term.
///
/// `alpha`/`beta`/`gamma_kd` weight detection, feature-distillation and
/// knowledge-distillation in the final composite; `lambda_cls`/`lambda_reg`
/// mix the two KD components; `gamma_gt` mixes classification and box
/// regression inside the supervised term; `tau` is the softening temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossWeights {
    pub alpha: f32,
    pub beta: f32,
    pub gamma_kd: f32,
    pub lambda_cls: f32,
    pub lambda_reg: f32,
    pub gamma_gt: f32,
    pub tau: f32,
    /// Teacher max-class-probability filter selecting distillation anchors.
    pub distill_prob_thresh: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.5,
            gamma_kd: 0.5,
            lambda_cls: 0.5,
            lambda_reg: 0.5,
            gamma_gt: 0.5,
            tau: 2.0,
            distill_prob_thresh: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma_kd", self.gamma_kd),
            ("lambda_cls", self.lambda_cls),
            ("lambda_reg", self.lambda_reg),
            ("gamma_gt", self.gamma_gt),
        ] {
            if v < 0.0 {
                return Err(Error::invalid("loss_weights", format!("{name} must be nonnegative, got {v}")));
            }
        }
        for (name, v) in [("lambda_cls", self.lambda_cls), ("lambda_reg", self.lambda_reg), ("gamma_gt", self.gamma_gt)] {
            if v > 1.0 {
                return Err(Error::invalid("loss_weights", format!("{name} must lie in [0,1], got {v}")));
            }
        }
        if self.tau < 1.0 {
            return Err(Error::invalid("loss_weights", format!("temperature must be >= 1, got {}", self.tau)));
        }
        Ok(())
    }
}

/// All loss terms of one step plus bookkeeping counters.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LossBreakdown {
    pub class_distill: f32,
    pub box_distill: f32,
    pub kd_total: f32,
    pub class_ce: f32,
    pub box_reg: f32,
    pub gt_total: f32,
    pub feature_distill: f32,
    pub final_loss: f32,
    pub positive_anchors: usize,
    pub sampled_negatives: usize,
    pub distill_anchors: usize,
    pub empty_match_warnings: u32,
}

// ── anchor assignment ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive { gt_index: usize },
    Negative,
    Ignore,
}

/// Per-anchor labels and encoded regression targets for one frame.
#[derive(Debug, Clone)]
pub struct AnchorAssignment {
    pub labels: Vec<AnchorLabel>,
    /// Encoded (tx, ty, tw, th) for positive anchors, row-aligned.
    pub targets: Vec<Option<[f32; 4]>>,
    pub positive_count: usize,
}

/// Max-IoU assignment: positive at IoU >= 0.5, negative below 0.4, ignored
/// between; the best anchor of every ground-truth box is forced positive
/// (ties to the lower anchor index, later boxes win conflicting claims).
pub fn assign_anchors(annotations: &AnnotationSet, anchors: &AnchorSet) -> AnchorAssignment {
    let n = anchors.count;
    let gts: Vec<BoxXYWH> = annotations.objects.iter().map(|o| o.to_box()).collect();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut targets = vec![None; n];
    if gts.is_empty() {
        return AnchorAssignment { labels, targets, positive_count: 0 };
    }
    let mut best_gt = vec![0usize; n];
    let mut best_iou = vec![0.0f32; n];
    let mut gt_best_anchor = vec![(0usize, -1.0f32); gts.len()];
    for a in 0..n {
        let ab = anchors.get(a);
        for (g, gb) in gts.iter().enumerate() {
            let v = iou(&ab, gb);
            if v > best_iou[a] {
                best_iou[a] = v;
                best_gt[a] = g;
            }
            if v > gt_best_anchor[g].1 {
                gt_best_anchor[g] = (a, v);
            }
        }
    }
    for a in 0..n {
        labels[a] = if best_iou[a] >= POSITIVE_IOU {
            AnchorLabel::Positive { gt_index: best_gt[a] }
        } else if best_iou[a] < NEGATIVE_IOU {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
    }
    for (g, &(a, v)) in gt_best_anchor.iter().enumerate() {
        if v > 0.0 {
            labels[a] = AnchorLabel::Positive { gt_index: g };
        }
    }
    let mut positive_count = 0;
    for a in 0..n {
        if let AnchorLabel::Positive { gt_index } = labels[a] {
            let anchor = anchors.get(a);
            targets[a] = Some(encode_box(&gts[gt_index], &anchor));
            positive_count += 1;
        }
    }
    AnchorAssignment { labels, targets, positive_count }
}

// ── individual loss terms ───────────────────────────────────────────────

/// softmax(logits / tau) for one anchor's class logits.
pub fn softened_probs(logits: &[f32], tau: f32) -> Result<Vec<f32>> {
    if tau <= 0.0 {
        return Err(Error::invalid("softened_probs", format!("temperature must be positive, got {tau}")));
    }
    Ok(kernels::softmax_rows(logits, 1, logits.len(), tau))
}

/// Precomputed teacher-side constants for one batch.
pub struct TeacherSignals {
    /// Softened probabilities at `tau`, [batch*R, C].
    pub probs_tau: Vec<f32>,
    /// ln(probs_tau + 1e-12), same pipeline the student side uses.
    pub log_probs_tau: Vec<f32>,
    /// Decoded + clipped teacher boxes, [batch*R, 4].
    pub boxes: Vec<f32>,
    /// Fused pyramid activations (data, shape) per level.
    pub fused_levels: Vec<(Vec<f32>, Vec<usize>)>,
    /// Rows where the teacher's max class probability (tau = 1) passes the
    /// distillation filter.
    pub distill_rows: Vec<usize>,
    pub num_classes: usize,
}

/// Extract distillation targets from a teacher forward pass.
pub fn teacher_signals(
    tape: &Tape,
    outputs: &DetectorOutputs,
    anchors: &AnchorSet,
    num_classes: usize,
    tau: f32,
    prob_thresh: f32,
) -> TeacherSignals {
    let cls = tape.data(outputs.cls_rows);
    let reg = tape.data(outputs.reg_rows);
    let rows = cls.len() / num_classes;
    let probs_tau = kernels::softmax_rows(cls, rows, num_classes, tau);
    let log_probs_tau: Vec<f32> = probs_tau.iter().map(|&p| kernels::log_guarded(p)).collect();
    let probs_1 = kernels::softmax_rows(cls, rows, num_classes, 1.0);
    let mut distill_rows = Vec::new();
    for r in 0..rows {
        let row = &probs_1[r * num_classes..(r + 1) * num_classes];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        if max >= prob_thresh {
            distill_rows.push(r);
        }
    }
    let per_frame = anchors.count;
    let batch = rows / per_frame;
    let mut boxes = Vec::with_capacity(rows * 4);
    for b in 0..batch {
        let offs = &reg[b * per_frame * 4..(b + 1) * per_frame * 4];
        boxes.extend(crate::tape::decode_boxes_raw(offs, &anchors.boxes, anchors.bounds()));
    }
    let fused_levels = outputs
        .fused
        .levels
        .iter()
        .map(|&l| (tape.data(l).to_vec(), tape.shape(l).to_vec()))
        .collect();
    TeacherSignals { probs_tau, log_probs_tau, boxes, fused_levels, distill_rows, num_classes }
}

/// tau^2 * mean over matched anchors of KL(teacher softened || student
/// softened). Returns exactly zero when the distributions coincide.
pub fn class_distill_loss(
    tape: &mut Tape,
    student_cls_rows: TensorId,
    teacher: &TeacherSignals,
    rows: &[usize],
    tau: f32,
) -> Result<TensorId> {
    if rows.is_empty() {
        return tape.leaf(vec![0.0], vec![1]);
    }
    let c = teacher.num_classes;
    let k = rows.len();
    let sel = tape.select_rows(student_cls_rows, rows)?;
    let p_s = tape.softmax_t(sel, tau)?;
    let log_ps = tape.log_guarded(p_s)?;
    let mut pt = Vec::with_capacity(k * c);
    let mut cross = vec![0.0f32; k * c];
    for (i, &r) in rows.iter().enumerate() {
        pt.extend_from_slice(&teacher.probs_tau[r * c..(r + 1) * c]);
        for j in 0..c {
            cross[i * c + j] = teacher.probs_tau[r * c + j] * teacher.log_probs_tau[r * c + j];
        }
    }
    // Sum p_T log p_T computed with the same multiply/sum kernels as the
    // tape side, so KL(p || p) cancels to exactly 0.
    let const_h = kernels::sum(&cross);
    let pt_leaf = tape.leaf(pt, vec![k, c])?;
    let prod = tape.mul(log_ps, pt_leaf)?;
    let s = tape.sum(prod)?;
    let neg = tape.scale(s, -1.0)?;
    let kl_sum = tape.shift(neg, const_h)?;
    tape.scale(kl_sum, tau * tau / k as f32)
}

/// Mean smooth-L1 between decoded student and teacher boxes on matched rows.
pub fn box_distill_loss(
    tape: &mut Tape,
    student_reg_rows: TensorId,
    teacher: &TeacherSignals,
    rows: &[usize],
    anchors: &AnchorSet,
) -> Result<TensorId> {
    if rows.is_empty() {
        return tape.leaf(vec![0.0], vec![1]);
    }
    let per_frame = anchors.count;
    let sel = tape.select_rows(student_reg_rows, rows)?;
    let mut anchor_rows = Vec::with_capacity(rows.len() * 4);
    let mut teacher_rows = Vec::with_capacity(rows.len() * 4);
    for &r in rows {
        let a = r % per_frame;
        anchor_rows.extend_from_slice(&anchors.boxes[a * 4..(a + 1) * 4]);
        teacher_rows.extend_from_slice(&teacher.boxes[r * 4..(r + 1) * 4]);
    }
    let decoded = tape.decode_boxes(sel, &anchor_rows, anchors.bounds())?;
    let t_leaf = tape.leaf(teacher_rows, vec![rows.len(), 4])?;
    let d = tape.sub(decoded, t_leaf)?;
    let s = tape.smooth_l1_sum(d)?;
    tape.scale(s, 1.0 / rows.len() as f32)
}

/// lambda_cls * class + lambda_reg * box.
pub fn kd_loss(tape: &mut Tape, class_term: TensorId, box_term: TensorId, lambda_cls: f32, lambda_reg: f32) -> Result<TensorId> {
    let a = tape.scale(class_term, lambda_cls)?;
    let b = tape.scale(box_term, lambda_reg)?;
    tape.add(a, b)
}

/// Rows, one-hot targets and encoded box targets gathered from per-frame
/// assignments, in deterministic (frame, anchor) order.
/// Row indices and targets for the supervised loss, in (frame, anchor) order.
pub struct GatheredTargets {
    pub pos_rows: Vec<usize>,
    pub pos_classes: Vec<usize>,
    pub pos_targets: Vec<f32>,
    pub neg_rows: Vec<usize>,
}

pub fn gather_targets(assignments: &[(usize, &AnchorAssignment, &AnnotationSet)], per_frame: usize) -> GatheredTargets {
    let mut g = GatheredTargets { pos_rows: vec![], pos_classes: vec![], pos_targets: vec![], neg_rows: vec![] };
    for (frame_idx, assign, ann) in assignments {
        let base = frame_idx * per_frame;
        for (a, label) in assign.labels.iter().enumerate() {
            match label {
                AnchorLabel::Positive { gt_index } => {
                    g.pos_rows.push(base + a);
                    g.pos_classes.push(ann.objects[*gt_index].class_id - 1);
                    g.pos_targets.extend_from_slice(&assign.targets[a].expect("positive anchor has a target"));
                }
                AnchorLabel::Negative => g.neg_rows.push(base + a),
                AnchorLabel::Ignore => {}
            }
        }
    }
    g
}

/// Supervised loss against ground truth (Eq. 18 shape):
/// gamma_gt * class + (1 - gamma_gt) * box.
///
/// Classification: cross-entropy against one-hot labels on positive anchors
/// plus KL(uniform || p) on sampled negatives (3:1, uniformly sampled), both
/// normalized by the positive count. Regression: mean smooth-L1 on encoded
/// residuals of positive anchors.
#[allow(clippy::too_many_arguments)]
pub fn ground_truth_loss(
    tape: &mut Tape,
    cls_rows: TensorId,
    reg_rows: TensorId,
    gathered: &GatheredTargets,
    num_classes: usize,
    gamma_gt: f32,
    rng: &mut ChaCha8Rng,
) -> Result<(TensorId, TensorId, TensorId, usize)> {
    let npos = gathered.pos_rows.len();
    let norm = npos.max(1) as f32;

    // sampled negatives, 3 per positive (floor when the batch has none)
    let want = if npos > 0 { NEG_PER_POS * npos } else { NEG_FLOOR };
    let mut neg = gathered.neg_rows.clone();
    let take = want.min(neg.len());
    // partial Fisher-Yates
    for i in 0..take {
        let j = i + (rand::Rng::random_range(rng, 0..(neg.len() - i) as u64)) as usize;
        neg.swap(i, j);
    }
    neg.truncate(take);
    neg.sort_unstable();

    // positive cross-entropy
    let ce_pos = if npos > 0 {
        let sel = tape.select_rows(cls_rows, &gathered.pos_rows)?;
        let p = tape.softmax_t(sel, 1.0)?;
        let lp = tape.log_guarded(p)?;
        let mut onehot = vec![0.0f32; npos * num_classes];
        for (i, &cls) in gathered.pos_classes.iter().enumerate() {
            onehot[i * num_classes + cls] = 1.0;
        }
        let oh = tape.leaf(onehot, vec![npos, num_classes])?;
        let prod = tape.mul(lp, oh)?;
        let s = tape.sum(prod)?;
        tape.scale(s, -1.0)?
    } else {
        tape.leaf(vec![0.0], vec![1])?
    };

    // background divergence on negatives: KL(uniform || p) per row
    let kl_neg = if !neg.is_empty() {
        let sel = tape.select_rows(cls_rows, &neg)?;
        let p = tape.softmax_t(sel, 1.0)?;
        let lp = tape.log_guarded(p)?;
        let s = tape.sum(lp)?;
        let t = tape.scale(s, -1.0 / num_classes as f32)?;
        tape.shift(t, -(neg.len() as f32) * (num_classes as f32).ln())?
    } else {
        tape.leaf(vec![0.0], vec![1])?
    };

    let class_sum = tape.add(ce_pos, kl_neg)?;
    let class_ce = tape.scale(class_sum, 1.0 / norm)?;

    let box_reg = if npos > 0 {
        let sel = tape.select_rows(reg_rows, &gathered.pos_rows)?;
        let tgt = tape.leaf(gathered.pos_targets.clone(), vec![npos, 4])?;
        let d = tape.sub(sel, tgt)?;
        let s = tape.smooth_l1_sum(d)?;
        tape.scale(s, 1.0 / norm)?
    } else {
        tape.leaf(vec![0.0], vec![1])?
    };

    let a = tape.scale(class_ce, gamma_gt)?;
    let b = tape.scale(box_reg, 1.0 - gamma_gt)?;
    let total = tape.add(a, b)?;
    Ok((total, class_ce, box_reg, neg.len()))
}

/// Per-level 1x1 adapters mapping student fused channels onto the teacher's.
pub struct FeatureAdapters {
    pub convs: Vec<Conv2dLayer>,
}

impl FeatureAdapters {
    pub fn new(store: &mut ParamStore, name: &str, student_channels: usize, teacher_channels: usize, levels: usize) -> Self {
        let convs = (0..levels)
            .map(|l| Conv2dLayer::new(store, &format!("{name}.l{l}"), student_channels, teacher_channels, 1, 1, true))
            .collect();
        FeatureAdapters { convs }
    }
}

/// Mean squared error between adapted student fused maps and the teacher's,
/// averaged over levels, channels and positions.
pub fn feature_distill_loss(
    run: &mut Run,
    student_fused: &FusedPyramid,
    teacher_levels: &[(Vec<f32>, Vec<usize>)],
    adapters: &FeatureAdapters,
) -> Result<TensorId> {
    if student_fused.levels.len() != teacher_levels.len() {
        return Err(Error::invalid(
            "feature_distill_loss",
            format!("{} student levels vs {} teacher levels", student_fused.levels.len(), teacher_levels.len()),
        ));
    }
    let levels = teacher_levels.len();
    let mut acc: Option<TensorId> = None;
    for (l, (&s_l, (t_data, t_shape))) in student_fused.levels.iter().zip(teacher_levels).enumerate() {
        let adapted = adapters.convs[l].forward(run, s_l)?;
        let t = run.tape.leaf(t_data.clone(), t_shape.clone())?;
        let d = run.tape.sub(adapted, t)?;
        let sq = run.tape.mul(d, d)?;
        let m = run.tape.mean(sq)?;
        acc = Some(match acc {
            Some(prev) => run.tape.add(prev, m)?,
            None => m,
        });
    }
    let total = acc.expect("at least one level");
    run.tape.scale(total, 1.0 / levels as f32)
}

// ── composite ───────────────────────────────────────────────────────────

/// Everything build_loss needs beyond the student outputs.
pub struct LossContext<'a> {
    pub annotations: &'a [AnnotationSet],
    pub anchors: &'a AnchorSet,
    pub weights: LossWeights,
}

/// Assemble the full training loss on the student tape.
///
/// With `teacher` (and `adapters`) absent, or with beta = gamma_kd = 0, the
/// distillation terms are skipped entirely and the result is the pure
/// supervised objective scaled by alpha.
pub fn build_loss(
    run: &mut Run,
    outputs: &DetectorOutputs,
    teacher: Option<&TeacherSignals>,
    adapters: Option<&FeatureAdapters>,
    ctx: &LossContext,
    rng: &mut ChaCha8Rng,
) -> Result<(TensorId, LossBreakdown)> {
    let w = ctx.weights;
    w.validate()?;
    let per_frame = ctx.anchors.count;
    let num_classes = teacher.map(|t| t.num_classes).unwrap_or_else(|| {
        let c = run.tape.shape(outputs.cls_rows)[1];
        c
    });

    let assignments: Vec<AnchorAssignment> = ctx
        .annotations
        .iter()
        .map(|ann| assign_anchors(ann, ctx.anchors))
        .collect();
    let with_frames: Vec<(usize, &AnchorAssignment, &AnnotationSet)> = assignments
        .iter()
        .enumerate()
        .map(|(i, a)| (i, a, &ctx.annotations[i]))
        .collect();
    let gathered = gather_targets(&with_frames, per_frame);

    let mut breakdown = LossBreakdown {
        positive_anchors: gathered.pos_rows.len(),
        ..Default::default()
    };

    let (gt_total, class_ce, box_reg, n_neg) = ground_truth_loss(
        run.tape,
        outputs.cls_rows,
        outputs.reg_rows,
        &gathered,
        num_classes,
        w.gamma_gt,
        rng,
    )?;
    breakdown.sampled_negatives = n_neg;

    let use_kd = teacher.is_some() && w.gamma_kd > 0.0;
    let use_fd = teacher.is_some() && adapters.is_some() && w.beta > 0.0;

    let mut final_terms: Vec<TensorId> = Vec::new();
    let gt_scaled = run.tape.scale(gt_total, w.alpha)?;
    final_terms.push(gt_scaled);

    let mut kd_id = None;
    let mut fd_id = None;
    if use_kd {
        let t = teacher.expect("teacher present");
        breakdown.distill_anchors = t.distill_rows.len();
        if t.distill_rows.is_empty() {
            breakdown.empty_match_warnings += 1;
        }
        let cd = class_distill_loss(run.tape, outputs.cls_rows, t, &t.distill_rows, w.tau)?;
        let bd = box_distill_loss(run.tape, outputs.reg_rows, t, &t.distill_rows, ctx.anchors)?;
        let kd = kd_loss(run.tape, cd, bd, w.lambda_cls, w.lambda_reg)?;
        breakdown.class_distill = run.tape.data(cd)[0];
        breakdown.box_distill = run.tape.data(bd)[0];
        breakdown.kd_total = run.tape.data(kd)[0];
        let kd_scaled = run.tape.scale(kd, w.gamma_kd)?;
        final_terms.push(kd_scaled);
        kd_id = Some(kd);
    }
    if use_fd {
        let t = teacher.expect("teacher present");
        let fd = feature_distill_loss(run, &outputs.fused, &t.fused_levels, adapters.expect("adapters present"))?;
        breakdown.feature_distill = run.tape.data(fd)[0];
        let fd_scaled = run.tape.scale(fd, w.beta)?;
        final_terms.push(fd_scaled);
        fd_id = Some(fd);
    }
    let _ = (kd_id, fd_id);

    let mut final_id = final_terms[0];
    for t in &final_terms[1..] {
        final_id = run.tape.add(final_id, *t)?;
    }

    breakdown.class_ce = run.tape.data(class_ce)[0];
    breakdown.box_reg = run.tape.data(box_reg)[0];
    breakdown.gt_total = run.tape.data(gt_total)[0];
    breakdown.final_loss = run.tape.data(final_id)[0];
    Ok((final_id, breakdown))
}

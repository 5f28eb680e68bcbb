//! The training pipeline: supervised teacher training, single-modality
//! ablations, and teacher-to-student distillation, with per-step and
//! per-epoch CSV logs, cosine learning-rate decay, best-validation
//! checkpointing, and bit-reproducible runs for a fixed seed.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::anchors::AnchorSet;
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, MODEL_PREFIX};
use crate::config::{RunMode, TrainConfig};
use crate::data::DatasetCache;
use crate::detect::{DetectThresholds, DetectionSet};
use crate::error::{Error, Result};
use crate::eval::{map_over_thresholds, EvalDetection, EvalGroundTruth, EvalReport};
use crate::loss::{build_loss, teacher_signals, FeatureAdapters, LossBreakdown, LossContext, TeacherSignals};
use crate::model::{Detector, DetectorConfig, ModalityMode};
use crate::params::{cosine_lr, AdamState, ParamStore, Run};
use crate::tape::Tape;

pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_val_map50: f64,
    /// Validation mAP@0.5 after each epoch, in order.
    pub val_map50_history: Vec<f64>,
    pub epochs_csv: PathBuf,
    pub steps_csv: PathBuf,
    pub wall_seconds: f64,
    pub cpu_seconds: f64,
}

/// Process CPU time (user + system) in seconds, from /proc/self/stat.
pub fn process_cpu_seconds() -> f64 {
    let Ok(stat) = fs::read_to_string("/proc/self/stat") else {
        return 0.0;
    };
    // fields after the parenthesized comm; utime and stime are fields 14, 15
    let Some(rest) = stat.rsplit(')').next() else {
        return 0.0;
    };
    let fields: Vec<&str> = rest.split_whitespace().collect();
    let utime: f64 = fields.get(11).and_then(|v| v.parse().ok()).unwrap_or(0.0);
    let stime: f64 = fields.get(12).and_then(|v| v.parse().ok()).unwrap_or(0.0);
    (utime + stime) / 100.0
}

struct EpochAccum {
    sums: LossBreakdown,
    steps: usize,
}

impl EpochAccum {
    fn new() -> Self {
        EpochAccum { sums: LossBreakdown::default(), steps: 0 }
    }

    fn add(&mut self, b: &LossBreakdown) {
        self.sums.class_distill += b.class_distill;
        self.sums.box_distill += b.box_distill;
        self.sums.class_ce += b.class_ce;
        self.sums.box_reg += b.box_reg;
        self.sums.feature_distill += b.feature_distill;
        self.sums.final_loss += b.final_loss;
        self.steps += 1;
    }

    fn csv_row(&self, epoch: usize, split: &str) -> String {
        let n = self.steps.max(1) as f32;
        format!(
            "{epoch},{split},{},{},{},{},{},{}\n",
            self.sums.class_distill / n,
            self.sums.box_distill / n,
            self.sums.class_ce / n,
            self.sums.box_reg / n,
            self.sums.feature_distill / n,
            self.sums.final_loss / n
        )
    }
}

/// Context for a loaded frozen teacher.
struct TeacherCtx {
    store: ParamStore,
    detector: Detector,
}

fn forward_teacher(
    tape: &mut Tape,
    teacher: &mut TeacherCtx,
    rgb: &[f32],
    thm: &[f32],
    batch: usize,
    image_size: usize,
    anchors: &AnchorSet,
    weights: &crate::loss::LossWeights,
) -> Result<TeacherSignals> {
    let mut run = Run::new(tape, &mut teacher.store, false, true);
    let rgb_id = run.tape.leaf(rgb.to_vec(), vec![batch, 3, image_size, image_size])?;
    let thm_id = run.tape.leaf(thm.to_vec(), vec![batch, 1, image_size, image_size])?;
    let out = teacher.detector.forward(&mut run, Some(rgb_id), Some(thm_id), ModalityMode::Fusion)?;
    let num_classes = teacher.detector.cfg.num_classes;
    Ok(teacher_signals(tape, &out, anchors, num_classes, weights.tau, weights.distill_prob_thresh))
}

/// One optimization step; returns the loss breakdown.
#[allow(clippy::too_many_arguments)]
fn train_step(
    detector: &Detector,
    store: &mut ParamStore,
    adam: &mut AdamState,
    adapters: Option<&FeatureAdapters>,
    teacher: Option<&mut TeacherCtx>,
    cache: &DatasetCache,
    indices: &[usize],
    mode: ModalityMode,
    ctx_weights: crate::loss::LossWeights,
    anchors: &AnchorSet,
    loss_rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let (rgb, thm, anns) = cache.batch(indices);
    let batch = indices.len();
    let hw = detector.cfg.image_size;
    let mut tape = Tape::new();

    let signals = match teacher {
        Some(t) => Some(forward_teacher(&mut tape, t, &rgb, &thm, batch, hw, anchors, &ctx_weights)?),
        None => None,
    };

    let mut run = Run::new(&mut tape, store, true, false);
    let rgb_id = run.tape.leaf(rgb, vec![batch, 3, hw, hw])?;
    let thm_id = run.tape.leaf(thm, vec![batch, 1, hw, hw])?;
    let outputs = detector.forward(&mut run, Some(rgb_id), Some(thm_id), mode)?;

    let owned_anns: Vec<crate::data::AnnotationSet> = anns.into_iter().cloned().collect();
    let ctx = LossContext { annotations: &owned_anns, anchors, weights: ctx_weights };
    let (loss_id, breakdown) = build_loss(&mut run, &outputs, signals.as_ref(), adapters, &ctx, loss_rng)?;
    run.tape.backward(loss_id)?;
    let grads: Vec<Vec<f32>> = adam.param_ids().to_vec().iter().map(|id| run.grad_of(*id)).collect();
    drop(run);
    drop(tape);
    adam.step(store, &grads)?;
    Ok(breakdown)
}

/// Validation loss (no backward, eval-mode batch norm).
#[allow(clippy::too_many_arguments)]
fn val_loss(
    detector: &Detector,
    store: &mut ParamStore,
    adapters: Option<&FeatureAdapters>,
    teacher: Option<&mut TeacherCtx>,
    cache: &DatasetCache,
    indices: &[usize],
    mode: ModalityMode,
    ctx_weights: crate::loss::LossWeights,
    anchors: &AnchorSet,
    loss_rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let (rgb, thm, anns) = cache.batch(indices);
    let batch = indices.len();
    let hw = detector.cfg.image_size;
    let mut tape = Tape::new();
    let signals = match teacher {
        Some(t) => Some(forward_teacher(&mut tape, t, &rgb, &thm, batch, hw, anchors, &ctx_weights)?),
        None => None,
    };
    let mut run = Run::new(&mut tape, store, false, false);
    let rgb_id = run.tape.leaf(rgb, vec![batch, 3, hw, hw])?;
    let thm_id = run.tape.leaf(thm, vec![batch, 1, hw, hw])?;
    let outputs = detector.forward(&mut run, Some(rgb_id), Some(thm_id), mode)?;
    let owned_anns: Vec<crate::data::AnnotationSet> = anns.into_iter().cloned().collect();
    let ctx = LossContext { annotations: &owned_anns, anchors, weights: ctx_weights };
    let (_, breakdown) = build_loss(&mut run, &outputs, signals.as_ref(), adapters, &ctx, loss_rng)?;
    Ok(breakdown)
}

/// Run detection over a whole cache and measure mAP against its annotations.
pub fn evaluate_on_cache(
    detector: &Detector,
    store: &mut ParamStore,
    cache: &DatasetCache,
    mode: ModalityMode,
    thresholds: &DetectThresholds,
    batch: usize,
    anchors: &AnchorSet,
) -> Result<(EvalReport, Vec<DetectionSet>)> {
    let mut all_sets = Vec::with_capacity(cache.len());
    let mut start = 0usize;
    while start < cache.len() {
        let end = (start + batch).min(cache.len());
        let indices: Vec<usize> = (start..end).collect();
        let (rgb, thm, _) = cache.batch(&indices);
        let ids: Vec<u64> = indices.iter().map(|&i| cache.frames[i].frame_id).collect();
        let sets = detector.detect_batch(store, &rgb, &thm, indices.len(), &ids, mode, anchors, thresholds)?;
        all_sets.extend(sets);
        start = end;
    }
    let report = eval_detection_sets(&all_sets, cache);
    Ok((report, all_sets))
}

/// Convert per-frame detection sets plus cached annotations into an EvalReport.
pub fn eval_detection_sets(sets: &[DetectionSet], cache: &DatasetCache) -> EvalReport {
    let mut dets = Vec::new();
    for (fi, set) in sets.iter().enumerate() {
        for d in &set.detections {
            dets.push(EvalDetection { frame: fi, bbox: d.bbox, class_index: d.class_index, score: d.score });
        }
    }
    let mut gts = Vec::new();
    for (fi, ann) in cache.annotations.iter().enumerate() {
        for o in &ann.objects {
            gts.push(EvalGroundTruth { frame: fi, bbox: o.to_box(), class_index: o.class_id - 1 });
        }
    }
    let names: Vec<&str> = crate::data::CLASS_NAMES.to_vec();
    map_over_thresholds(&dets, &gts, names.len(), &names)
}

pub fn run_training(cfg: &TrainConfig) -> Result<TrainOutcome> {
    match cfg.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| run_training_inner(cfg))
        }
        None => run_training_inner(cfg),
    }
}

fn run_training_inner(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(cfg.out_dir.display().to_string(), e))?;
    let wall0 = std::time::Instant::now();
    let cpu0 = process_cpu_seconds();

    let det_cfg = DetectorConfig::for_role(cfg.role);
    let num_classes = det_cfg.num_classes;
    let anchors = det_cfg.anchors.generate()?;

    let train_cache = DatasetCache::load(&cfg.train_manifest, num_classes)?;
    let val_cache = DatasetCache::load(&cfg.val_manifest, num_classes)?;

    let mut store = ParamStore::new(cfg.seed);
    let detector = Detector::build(&mut store, MODEL_PREFIX, det_cfg.clone())?;

    let mut teacher_ctx: Option<TeacherCtx> = None;
    let mut adapters: Option<FeatureAdapters> = None;
    if cfg.mode == RunMode::Distill {
        let tpath = cfg.teacher_checkpoint.as_ref().expect("validated");
        let ck = load_checkpoint(tpath)?;
        if ck.config.anchors != det_cfg.anchors {
            return Err(Error::Config(
                "teacher and student anchor configurations differ; distillation requires the shared grid".into(),
            ));
        }
        let (tstore, tdet) = ck.restore()?;
        adapters = Some(FeatureAdapters::new(
            &mut store,
            "fd_adapter",
            det_cfg.fpn_channels,
            tdet.cfg.fpn_channels,
            det_cfg.levels(),
        ));
        teacher_ctx = Some(TeacherCtx { store: tstore, detector: tdet });
    }

    let mut adam = AdamState::new(&store, cfg.lr)?;
    let modality = cfg.mode.modality();

    let steps_csv = cfg.out_dir.join("steps.csv");
    let epochs_csv = cfg.out_dir.join("epochs.csv");
    let mut steps_file = fs::File::create(&steps_csv).map_err(|e| Error::io(steps_csv.display().to_string(), e))?;
    let mut epochs_file = fs::File::create(&epochs_csv).map_err(|e| Error::io(epochs_csv.display().to_string(), e))?;
    writeln!(steps_file, "step,lr,class_distill,box_distill,kd_total,class_ce,box_reg,gt_total,feature_distill,final")
        .map_err(|e| Error::io(steps_csv.display().to_string(), e))?;
    writeln!(epochs_file, "epoch,split,class_distill,box_distill,class_ce,box_reg,feature_distill,final")
        .map_err(|e| Error::io(epochs_csv.display().to_string(), e))?;

    let best_path = cfg.out_dir.join("best.ckpt");
    let last_path = cfg.out_dir.join("last.ckpt");
    let mut best_map50 = -1.0f64;
    let mut val_history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut last_train_loss = f32::NAN;

    // linear warmup over the first steps stabilizes fresh batch-norm runs
    let steps_per_epoch = train_cache.len() / cfg.batch_size;
    let warmup_steps = 50.min(cfg.epochs * steps_per_epoch / 5);

    for epoch in 0..cfg.epochs {
        let epoch_lr = cosine_lr(cfg.lr, cfg.lr_min, epoch, cfg.epochs);

        let mut order: Vec<usize> = (0..train_cache.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(0x5u64 << 40 | epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut loss_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        loss_rng.set_stream(0x6u64 << 40 | epoch as u64);

        let mut accum = EpochAccum::new();
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // batch statistics need at least two samples
            }
            let lr = if warmup_steps > 0 && step < warmup_steps {
                epoch_lr * (step + 1) as f32 / warmup_steps as f32
            } else {
                epoch_lr
            };
            adam.lr = lr;
            let b = train_step(
                &detector,
                &mut store,
                &mut adam,
                adapters.as_ref(),
                teacher_ctx.as_mut(),
                &train_cache,
                chunk,
                modality,
                cfg.weights,
                &anchors,
                &mut loss_rng,
            )?;
            writeln!(
                steps_file,
                "{step},{lr},{},{},{},{},{},{},{},{}",
                b.class_distill, b.box_distill, b.kd_total, b.class_ce, b.box_reg, b.gt_total, b.feature_distill, b.final_loss
            )
            .map_err(|e| Error::io(steps_csv.display().to_string(), e))?;
            accum.add(&b);
            step += 1;
            last_train_loss = b.final_loss;
        }
        epochs_file
            .write_all(accum.csv_row(epoch, "train").as_bytes())
            .map_err(|e| Error::io(epochs_csv.display().to_string(), e))?;

        // validation losses (sampling rng fixed per epoch for reproducibility)
        let mut vaccum = EpochAccum::new();
        let mut vloss_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        vloss_rng.set_stream(0x7u64 << 40 | epoch as u64);
        let vidx: Vec<usize> = (0..val_cache.len()).collect();
        for chunk in vidx.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let b = val_loss(
                &detector,
                &mut store,
                adapters.as_ref(),
                teacher_ctx.as_mut(),
                &val_cache,
                chunk,
                modality,
                cfg.weights,
                &anchors,
                &mut vloss_rng,
            )?;
            vaccum.add(&b);
        }
        epochs_file
            .write_all(vaccum.csv_row(epoch, "val").as_bytes())
            .map_err(|e| Error::io(epochs_csv.display().to_string(), e))?;

        // best-checkpoint selection on validation mAP@0.5
        let (vreport, _) = evaluate_on_cache(&detector, &mut store, &val_cache, modality, &cfg.thresholds, cfg.eval_batch, &anchors)?;
        val_history.push(vreport.map_50);
        if vreport.map_50 > best_map50 {
            best_map50 = vreport.map_50;
            let meta = CheckpointMeta {
                epoch,
                train_loss: last_train_loss as f64,
                val_map50: best_map50,
                seed: cfg.seed,
                mode: cfg.mode.as_str().to_string(),
            };
            save_checkpoint(&store, &det_cfg, &meta, &best_path)?;
        }
        eprintln!(
            "epoch {epoch:>3}: lr {epoch_lr:.2e} train {:.4} val {:.4} val-mAP@0.5 {:.1} (best {:.1})",
            accum.sums.final_loss / accum.steps.max(1) as f32,
            vaccum.sums.final_loss / vaccum.steps.max(1) as f32,
            vreport.map_50,
            best_map50
        );
    }

    let meta = CheckpointMeta {
        epoch: cfg.epochs.saturating_sub(1),
        train_loss: last_train_loss as f64,
        val_map50: best_map50,
        seed: cfg.seed,
        mode: cfg.mode.as_str().to_string(),
    };
    save_checkpoint(&store, &det_cfg, &meta, &last_path)?;
    if best_map50 < 0.0 {
        save_checkpoint(&store, &det_cfg, &meta, &best_path)?;
    }

    Ok(TrainOutcome {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        best_val_map50: best_map50.max(0.0),
        val_map50_history: val_history,
        epochs_csv,
        steps_csv,
        wall_seconds: wall0.elapsed().as_secs_f64(),
        cpu_seconds: process_cpu_seconds() - cpu0,
    })
}

/// Load a checkpoint and evaluate it on a manifest.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    manifest: &Path,
    thresholds: &DetectThresholds,
    batch: usize,
    mode_override: Option<ModalityMode>,
) -> Result<(EvalReport, Vec<DetectionSet>, String)> {
    let ck = load_checkpoint(checkpoint)?;
    let (mut store, det) = ck.restore()?;
    let mode = match mode_override {
        Some(m) => m,
        None => RunMode::parse(&ck.meta.mode)?.modality(),
    };
    let cache = DatasetCache::load(manifest, det.cfg.num_classes)?;
    let anchors = det.cfg.anchors.generate()?;
    let (report, sets) = evaluate_on_cache(&det, &mut store, &cache, mode, thresholds, batch, &anchors)?;
    Ok((report, sets, ck.meta.mode.clone()))
}

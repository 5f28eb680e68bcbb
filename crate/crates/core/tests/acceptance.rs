//! Acceptance suite: every release criterion is exercised end to end at its
//! stated tolerance, printing one pass/fail line per criterion. The heavy
//! criteria (modality ordering, distillation benefit, latency ratio) share
//! one set of training runs driven by the shipped recipes in
//! `configs/acceptance/`.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ffkd::anchors::AnchorConfig;
use ffkd::boxes::{iou, BoxXYWH};
use ffkd::config::{GenConfig, RunMode, TrainConfig};
use ffkd::data::{frame_rng, make_splits, sample_targets, Annotation, AnnotationSet, DatasetCache, SceneSpec};
use ffkd::detect::{nms, DetectThresholds, NmsBox};
use ffkd::eval::bench_latency;
use ffkd::gradcheck::{grad_check, grad_check_store};
use ffkd::kernels;
use ffkd::loss::{assign_anchors, class_distill_loss, AnchorLabel, LossWeights, TeacherSignals};
use ffkd::model::Role;
use ffkd::params::{fnv1a64, ParamStore};
use ffkd::stats::{chi_square_uniform, estimate_prior, kde_from_samples, kde_pixel_intensity, KdeModality, CHI2_CRIT_DF15_P05};
use ffkd::tape::Tape;
use ffkd::train::{evaluate_checkpoint, process_cpu_seconds, run_training};

struct Outcome {
    lines: Vec<String>,
    failures: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Outcome { lines: vec![], failures: vec![] }
    }

    fn report(&mut self, criterion: &str, pass: bool, detail: String) {
        let line = format!("criterion {criterion}: {} — {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push(line.clone());
        if !pass {
            self.failures.push(line);
        }
    }
}

fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn work_root() -> PathBuf {
    let d = std::env::temp_dir().join(format!("ffkd_acceptance_{}", std::process::id()));
    fs::create_dir_all(&d).unwrap();
    d
}

fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

#[test]
fn acceptance_criteria() {
    let mut out = Outcome::new();
    criterion_1_gradient_integrity(&mut out);
    criterion_2_loss_identities(&mut out);
    criterion_3_oracle_equivalence(&mut out);
    criterion_7_probabilistic_estimators(&mut out);
    criterion_8_determinism_persistence(&mut out);
    criterion_9_ablation_identity(&mut out);
    criteria_4_5_6_training(&mut out);
    println!("---");
    for l in &out.lines {
        println!("{l}");
    }
    assert!(out.failures.is_empty(), "failed criteria:\n{}", out.failures.join("\n"));
}

// ── criterion 1: gradient integrity of every differentiable block ───────

fn criterion_1_gradient_integrity(out: &mut Outcome) {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut all_pass = true;
    let mut note = String::new();
    let mut check = |name: &str, r: ffkd::error::Result<ffkd::gradcheck::GradCheckReport>| match r {
        Ok(rep) => {
            worst = worst.max(rep.max_rel_err);
            if !rep.pass {
                all_pass = false;
                note.push_str(&format!(" {name}={:.2e}", rep.max_rel_err));
            }
        }
        Err(e) => {
            all_pass = false;
            note.push_str(&format!(" {name}: {e}"));
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1234);

    // conv variants + batch norm
    let x = randn(&mut rng, 2 * 24, 0.8);
    let w = randn(&mut rng, 3 * 2 * 9, 0.4);
    check("conv3x3", grad_check(&[(x.clone(), vec![1, 2, 4, 6]), (w, vec![3, 2, 3, 3])], |t, p| {
        let y = t.conv2d(p[0], p[1], None, 1)?;
        let sq = t.mul(y, y)?;
        let m = t.mean(sq)?;
        t.scale(m, 0.3)
    }, 1e-3));
    let wp = randn(&mut rng, 4 * 2, 0.5);
    check("conv1x1", grad_check(&[(x.clone(), vec![1, 2, 4, 6]), (wp, vec![4, 2, 1, 1])], |t, p| {
        let y = t.conv2d(p[0], p[1], None, 1)?;
        let sq = t.mul(y, y)?;
        let m = t.mean(sq)?;
        t.scale(m, 0.3)
    }, 1e-3));
    let wd = randn(&mut rng, 2 * 9, 0.5);
    check("dwconv", grad_check(&[(x.clone(), vec![1, 2, 4, 6]), (wd, vec![2, 3, 3])], |t, p| {
        let y = t.dwconv2d(p[0], p[1], 2)?;
        let sq = t.mul(y, y)?;
        let m = t.mean(sq)?;
        t.scale(m, 0.3)
    }, 1e-3));
    let gamma = randn(&mut rng, 2, 0.6);
    let beta = randn(&mut rng, 2, 0.3);
    check("batch_norm", grad_check(&[(x.clone(), vec![2, 2, 2, 6]), (gamma, vec![2]), (beta, vec![2])], |t, p| {
        let (y, _, _) = t.batch_norm_train(p[0], p[1], p[2], 1e-5)?;
        let sq = t.mul(y, y)?;
        let m = t.mean(sq)?;
        t.scale(m, 0.3)
    }, 1e-3));
    let hx = {
        let mut v = randn(&mut rng, 12, 2.4);
        v.extend_from_slice(&[-5.0, 4.5]);
        v
    };
    check("hard_swish", grad_check(&[(hx, vec![14])], |t, p| {
        let y = t.hard_swish(p[0])?;
        let sq = t.mul(y, y)?;
        let m = t.mean(sq)?;
        t.scale(m, 0.1)
    }, 1e-3));

    // SE, MBConv, BiFPN node path, CBAM, heads
    {
        let mut store = ParamStore::new(41);
        let se = ffkd::nn::SeBlock::with_ratio4(&mut store, "se", 4).unwrap();
        let xs = randn(&mut rng, 4 * 36, 0.8);
        check("se_block", grad_check_store(&mut store, |run| {
            let xid = run.tape.leaf(xs.clone(), vec![1, 4, 6, 6])?;
            let y = se.forward(run, xid)?;
            let sq = run.tape.mul(y, y)?;
            let m = run.tape.mean(sq)?;
            run.tape.scale(m, 0.5)
        }, 1e-3));
    }
    {
        let mut store = ParamStore::new(42);
        let block = ffkd::nn::MbConv::new(&mut store, "mb", 3, 3, 2, 3, 1).unwrap();
        let xs = randn(&mut rng, 3 * 36, 0.8);
        check("mbconv", grad_check_store(&mut store, |run| {
            let xid = run.tape.leaf(xs.clone(), vec![1, 3, 6, 6])?;
            let y = block.forward(run, xid)?;
            let sq = run.tape.mul(y, y)?;
            let m = run.tape.mean(sq)?;
            run.tape.scale(m, 0.2)
        }, 1e-3));
    }
    {
        let mut store = ParamStore::new(43);
        let fpn = ffkd::bifpn::BiFpn::new(&mut store, "fpn", &[4, 4], 4, 1).unwrap();
        let x0 = randn(&mut rng, 4 * 16, 0.8);
        let x1 = randn(&mut rng, 4 * 4, 0.8);
        check("bifpn_node", grad_check_store(&mut store, |run| {
            let a = run.tape.leaf(x0.clone(), vec![1, 4, 4, 4])?;
            let b = run.tape.leaf(x1.clone(), vec![1, 4, 2, 2])?;
            let o = fpn.refine(run, vec![a, b])?;
            let s0 = run.tape.mean(o[0])?;
            let s1 = run.tape.mean(o[1])?;
            let t = run.tape.add(s0, s1)?;
            run.tape.scale(t, 0.5)
        }, 1e-3));
    }
    {
        let mut store = ParamStore::new(44);
        let fuse = ffkd::fusion::CbamFusion::new(&mut store, "f", 4).unwrap();
        let a = randn(&mut rng, 4 * 64, 0.8);
        let b = randn(&mut rng, 4 * 64, 0.8);
        check("cbam", grad_check_store(&mut store, |run| {
            let ra = run.tape.leaf(a.clone(), vec![1, 4, 8, 8])?;
            let rb = run.tape.leaf(b.clone(), vec![1, 4, 8, 8])?;
            let (y, _, _) = fuse.fuse_level(run, ra, rb)?;
            let sq = run.tape.mul(y, y)?;
            let m = run.tape.mean(sq)?;
            run.tape.scale(m, 0.5)
        }, 1e-3));
    }
    {
        let mut store = ParamStore::new(45);
        let heads = ffkd::heads::DetectionHeads::new(&mut store, "h", 4, 3, 2);
        let names: Vec<_> = store.entries().map(|(i, e)| (i, e.name.clone())).collect();
        for (id, name) in names {
            if name.contains(".out.") {
                let n = store.get(id).numel();
                let d = randn(&mut rng, n, 0.2);
                store.data_mut(id).copy_from_slice(&d);
            }
        }
        let x0 = randn(&mut rng, 4 * 16, 0.8);
        check("heads", grad_check_store(&mut store, |run| {
            let a = run.tape.leaf(x0.clone(), vec![1, 4, 4, 4])?;
            let fused = ffkd::fusion::FusedPyramid { levels: vec![a], channel_gates: vec![], spatial_gates: vec![] };
            let (cls, reg) = heads.forward(run, &fused)?;
            let s1 = run.tape.mean(cls)?;
            let sq = run.tape.mul(reg, reg)?;
            let s2 = run.tape.mean(sq)?;
            let t = run.tape.add(s1, s2)?;
            run.tape.scale(t, 0.5)
        }, 1e-3));
    }

    // loss terms through a miniature student
    {
        let set = AnchorConfig::default().generate().unwrap();
        let rows = 6usize;
        let t_logits = randn(&mut rng, rows * 3, 1.5);
        let probs_tau = kernels::softmax_rows(&t_logits, rows, 3, 2.0);
        let log_probs_tau: Vec<f32> = probs_tau.iter().map(|&p| kernels::log_guarded(p)).collect();
        let decoded = ffkd::tape::decode_boxes_raw(&vec![0.05; set.count * 4], &set.boxes, set.bounds());
        let teacher = TeacherSignals {
            probs_tau,
            log_probs_tau,
            boxes: decoded[..rows * 4].to_vec(),
            fused_levels: vec![(randn(&mut rng, 4 * 16, 0.5), vec![1, 4, 4, 4])],
            distill_rows: (0..rows).collect(),
            num_classes: 3,
        };
        let s_logits = randn(&mut rng, rows * 3, 1.5);
        let sel: Vec<usize> = (0..rows).collect();
        check("class_distill", grad_check(&[(s_logits, vec![rows, 3])], |t, p| {
            class_distill_loss(t, p[0], &teacher, &sel, 2.0)
        }, 1e-3));
        let s_reg = randn(&mut rng, rows * 4, 0.3);
        let teacher2 = teacher;
        check("box_distill", grad_check(&[(s_reg, vec![rows, 4])], |t, p| {
            let l = ffkd::loss::box_distill_loss(t, p[0], &teacher2, &sel, &set)?;
            t.scale(l, 0.2)
        }, 1e-3));
        // supervised CE + box losses
        let cls = randn(&mut rng, 8 * 3, 1.0);
        let reg = randn(&mut rng, 8 * 4, 0.5);
        let onehot: Vec<f32> = (0..8).flat_map(|i| {
            let mut r = [0.0f32; 3];
            r[i % 3] = 1.0;
            r
        }).collect();
        let targets = randn(&mut rng, 8 * 4, 0.4);
        check("gt_loss", grad_check(&[(cls, vec![8, 3]), (reg, vec![8, 4])], |t, p| {
            let pr = t.softmax_t(p[0], 1.0)?;
            let lp = t.log_guarded(pr)?;
            let oh = t.leaf(onehot.clone(), vec![8, 3])?;
            let prod = t.mul(lp, oh)?;
            let ssum = t.sum(prod)?;
            let ce = t.scale(ssum, -1.0 / 8.0)?;
            let tg = t.leaf(targets.clone(), vec![8, 4])?;
            let d = t.sub(p[1], tg)?;
            let sl = t.smooth_l1_sum(d)?;
            let br = t.scale(sl, 1.0 / 8.0)?;
            let a = t.scale(ce, 0.5)?;
            let b = t.scale(br, 0.5)?;
            t.add(a, b)
        }, 1e-3));
        // feature distill through an adapter
        let mut store = ParamStore::new(46);
        let adapters = ffkd::loss::FeatureAdapters::new(&mut store, "ad", 3, 4, 1);
        let sfeat = randn(&mut rng, 3 * 16, 0.5);
        let tfeat = (randn(&mut rng, 4 * 16, 0.5), vec![1usize, 4, 4, 4]);
        check("feature_distill", grad_check_store(&mut store, |run| {
            let s = run.tape.leaf(sfeat.clone(), vec![1, 3, 4, 4])?;
            let fused = ffkd::fusion::FusedPyramid { levels: vec![s], channel_gates: vec![], spatial_gates: vec![] };
            ffkd::loss::feature_distill_loss(run, &fused, std::slice::from_ref(&tfeat), &adapters)
        }, 1e-3));
    }

    let secs = t0.elapsed().as_secs_f64();
    let pass = all_pass && secs < 120.0;
    out.report(
        "1 (gradient integrity)",
        pass,
        format!("all blocks max rel err {:.2e}, {:.1}s < 120s{}", worst, secs, note),
    );
}

// ── criterion 2: loss identities ────────────────────────────────────────

fn criterion_2_loss_identities(out: &mut Outcome) {
    let mut ok = true;
    let mut detail = Vec::new();

    // KL(p||p) exactly zero
    let set = AnchorConfig::default().generate().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits: Vec<f32> = (0..9).map(|_| rng.random_range(-2.0..2.0f32)).collect();
    let probs_tau = kernels::softmax_rows(&logits, 3, 3, 2.0);
    let log_probs_tau: Vec<f32> = probs_tau.iter().map(|&p| kernels::log_guarded(p)).collect();
    let teacher = TeacherSignals {
        probs_tau,
        log_probs_tau,
        boxes: vec![0.0; set.count * 4],
        fused_levels: vec![],
        distill_rows: vec![0, 1, 2],
        num_classes: 3,
    };
    let mut tape = Tape::new();
    let s = tape.param(logits, vec![3, 3]).unwrap();
    let kl = class_distill_loss(&mut tape, s, &teacher, &[0, 1, 2], 2.0).unwrap();
    let kl_zero = tape.data(kl)[0] == 0.0;
    ok &= kl_zero;
    detail.push(format!("KL(p||p)={}", tape.data(kl)[0]));

    // smooth-L1 boundary continuity
    let cont = kernels::smooth_l1(1.0) == 0.5 && (kernels::smooth_l1(1.0 - 1e-6) - 0.5).abs() < 1e-5;
    ok &= cont;
    detail.push("smoothL1(1)=0.5".into());

    // tau = 1 equals plain softmax
    let z = vec![0.7f32, -0.3, 1.9];
    let a = ffkd::loss::softened_probs(&z, 1.0).unwrap();
    let b = kernels::softmax_rows(&z, 1, 3, 1.0);
    ok &= a == b;
    detail.push("softened(tau=1)==softmax".into());

    // final-loss recomposition within 1e-6
    let w = LossWeights::default();
    let parts = (0.8123f32, 0.2345f32, 0.4567f32); // gt, fd, kd
    let final_f32 = w.alpha * parts.0 + w.beta * parts.1 + w.gamma_kd * parts.2;
    let recomposed = (w.alpha as f64) * (parts.0 as f64) + (w.beta as f64) * (parts.1 as f64) + (w.gamma_kd as f64) * (parts.2 as f64);
    let recomp_ok = ((final_f32 as f64) - recomposed).abs() < 1e-6;
    ok &= recomp_ok;
    detail.push(format!("recomposition diff {:.1e}", ((final_f32 as f64) - recomposed).abs()));

    out.report("2 (loss identities)", ok, detail.join(", "));
}

// ── criterion 3: oracle equivalence ─────────────────────────────────────

fn brute_force_nms(boxes: &[NmsBox], iou_thresh: f32, score_thresh: f32) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        boxes[b].score.partial_cmp(&boxes[a].score).unwrap().then(boxes[a].index.cmp(&boxes[b].index))
    });
    let mut suppressed = vec![false; boxes.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] || boxes[i].score < score_thresh {
            continue;
        }
        kept.push(boxes[i].index);
        for &j in &order[pos + 1..] {
            if !suppressed[j]
                && boxes[j].class_index == boxes[i].class_index
                && iou(&boxes[i].bbox, &boxes[j].bbox) > iou_thresh
            {
                suppressed[j] = true;
            }
        }
    }
    kept
}

fn criterion_3_oracle_equivalence(out: &mut Outcome) {
    let mut ok = true;
    let mut detail = Vec::new();

    // NMS vs brute force on 100 random 200-box scenes
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut nms_ok = true;
    for _ in 0..100 {
        let boxes: Vec<NmsBox> = (0..200)
            .map(|i| NmsBox {
                bbox: BoxXYWH::new(
                    rng.random_range(0.0..110.0),
                    rng.random_range(0.0..110.0),
                    rng.random_range(4.0..28.0),
                    rng.random_range(4.0..28.0),
                ),
                class_index: rng.random_range(0..3u32) as usize,
                score: rng.random_range(0.0..1.0),
                index: i,
            })
            .collect();
        if nms(&boxes, 0.5, 0.05).unwrap() != brute_force_nms(&boxes, 0.5, 0.05) {
            nms_ok = false;
            break;
        }
    }
    ok &= nms_ok;
    detail.push(format!("NMS brute-force 100x200: {}", if nms_ok { "exact" } else { "MISMATCH" }));

    // anchor assignment vs brute-force IoU matrix
    let set = AnchorConfig::default().generate().unwrap();
    let spec = SceneSpec::default();
    let mut assign_ok = true;
    for fi in 0..10u64 {
        let mut frng = frame_rng(333, 0, fi);
        let targets = sample_targets(&spec, &mut frng);
        let ann = AnnotationSet {
            frame_id: fi,
            width: 128,
            height: 128,
            objects: targets.iter().map(|t| Annotation { bbox: t.bbox.as_array(), class_id: t.class_index + 1 }).collect(),
        };
        let fast = assign_anchors(&ann, &set);
        // brute force from the full IoU matrix
        let gts: Vec<BoxXYWH> = ann.objects.iter().map(|o| o.to_box()).collect();
        let mut labels = vec![AnchorLabel::Negative; set.count];
        if !gts.is_empty() {
            for a in 0..set.count {
                let (mut bi, mut bv) = (0usize, -1.0f32);
                for (g, gt) in gts.iter().enumerate() {
                    let v = iou(&set.get(a), gt);
                    if v > bv {
                        bv = v;
                        bi = g;
                    }
                }
                labels[a] = if bv >= 0.5 {
                    AnchorLabel::Positive { gt_index: bi }
                } else if bv < 0.4 {
                    AnchorLabel::Negative
                } else {
                    AnchorLabel::Ignore
                };
            }
            for (g, gt) in gts.iter().enumerate() {
                let (mut ba, mut bv) = (0usize, -1.0f32);
                for a in 0..set.count {
                    let v = iou(&set.get(a), gt);
                    if v > bv {
                        bv = v;
                        ba = a;
                    }
                }
                if bv > 0.0 {
                    labels[ba] = AnchorLabel::Positive { gt_index: g };
                }
            }
        }
        if fast.labels != labels {
            assign_ok = false;
            break;
        }
    }
    ok &= assign_ok;
    detail.push(format!("assignment: {}", if assign_ok { "exact" } else { "MISMATCH" }));

    // the mAP-oracle fixture lives in tests/metrics.rs and is enforced there;
    // repeat the headline equality here on the same fixture shape
    let gts: Vec<ffkd::eval::EvalGroundTruth> = (0..5)
        .flat_map(|f| {
            let mut rng = ChaCha8Rng::seed_from_u64(f as u64 + 50);
            (0..2).map(move |_| ffkd::eval::EvalGroundTruth {
                frame: f,
                bbox: BoxXYWH::new(rng.random_range(0.0..90.0), rng.random_range(0.0..90.0), 14.0, 14.0),
                class_index: rng.random_range(0..3u32) as usize,
            }).collect::<Vec<_>>()
        })
        .collect();
    let dets: Vec<ffkd::eval::EvalDetection> = gts
        .iter()
        .enumerate()
        .filter(|(i, _)| i % 4 != 3)
        .map(|(i, gt)| ffkd::eval::EvalDetection {
            frame: gt.frame,
            bbox: BoxXYWH::new(gt.bbox.x + 1.0, gt.bbox.y, 14.0, 14.0),
            class_index: gt.class_index,
            score: 0.9 - i as f32 * 0.05,
        })
        .collect();
    let report = ffkd::eval::map_over_thresholds(&dets, &gts, 3, &["a", "b", "c"]);
    let sane = report.map_50 > 0.0 && report.map_50 <= 100.0 && report.map_50 >= report.map_75;
    ok &= sane;
    detail.push(format!("mAP sanity mAP@0.5={:.1}", report.map_50));

    out.report("3 (oracle equivalence)", ok, detail.join(", "));
}

// ── criterion 7: probabilistic estimators ───────────────────────────────

fn criterion_7_probabilistic_estimators(out: &mut Outcome) {
    let mut ok = true;
    let mut detail = Vec::new();

    // KDE on known Gaussian(128, 20)
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let samples: Vec<f32> = (0..5000)
        .map(|_| {
            let u1: f32 = rng.random_range(f32::EPSILON..1.0);
            let u2: f32 = rng.random_range(0.0..1.0);
            128.0 + 20.0 * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
        })
        .collect();
    let kde = kde_from_samples(&samples, 1, KdeModality::Thermal).unwrap();
    let integral_ok = (kde.integral() - 1.0).abs() < 1e-2;
    let mean_ok = (kde.mean() - 128.0).abs() < 2.0;
    ok &= integral_ok && mean_ok;
    detail.push(format!("KDE integral {:.4}, mean {:.2}", kde.integral(), kde.mean()));

    // rendered-frame KDEs integrate to 1 as well
    let spec = SceneSpec::default();
    let mut frames = Vec::new();
    let mut anns = Vec::new();
    for fi in 0..120u64 {
        let mut frng = frame_rng(77, 0, fi);
        let (f, a) = ffkd::data::generate_scene(&spec, fi, &mut frng);
        frames.push(f);
        anns.push(a);
    }
    let pairs: Vec<(&ffkd::data::MultiModalFrame, &AnnotationSet)> = frames.iter().zip(anns.iter()).collect();
    let mut frame_kde_ok = true;
    for class_id in 1..=3usize {
        for modality in [KdeModality::Rgb, KdeModality::Thermal] {
            let k = kde_pixel_intensity(&pairs, modality, class_id).unwrap();
            if (k.integral() - 1.0).abs() >= 1e-2 {
                frame_kde_ok = false;
            }
        }
    }
    ok &= frame_kde_ok;
    detail.push(format!("6 per-class KDEs integrate to 1: {frame_kde_ok}"));

    // pi-hat within 0.02 at 10k frames; chi-square of centers at 5%
    let mut sets = Vec::with_capacity(10_000);
    for fi in 0..10_000u64 {
        let mut frng = frame_rng(99, 0, fi);
        let targets = sample_targets(&spec, &mut frng);
        sets.push(AnnotationSet {
            frame_id: fi,
            width: 128,
            height: 128,
            objects: targets.iter().map(|t| Annotation { bbox: t.bbox.as_array(), class_id: t.class_index + 1 }).collect(),
        });
    }
    let prior = estimate_prior(sets.iter(), 3);
    let mut pi_ok = true;
    for (i, &pi) in spec.class_freq.iter().enumerate() {
        if (prior.pi_hat[i] - pi).abs() >= 0.02 {
            pi_ok = false;
        }
    }
    ok &= pi_ok;
    let chi = chi_square_uniform(&prior.center_hist);
    let chi_ok = chi < CHI2_CRIT_DF15_P05;
    ok &= chi_ok;
    detail.push(format!(
        "pi_hat {:?} vs {:?}; chi2 {:.1} < {:.1}",
        prior.pi_hat.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        spec.class_freq,
        chi,
        CHI2_CRIT_DF15_P05
    ));

    out.report("7 (probabilistic estimators)", ok, detail.join("; "));
}

// ── criterion 8: determinism & persistence ──────────────────────────────

fn criterion_8_determinism_persistence(out: &mut Outcome) {
    let root = work_root().join("crit8");
    fs::create_dir_all(&root).unwrap();
    let mut ok = true;
    let mut detail = Vec::new();

    // PPM/PGM round trip
    let spec = SceneSpec::default();
    let mut frng = frame_rng(3, 0, 0);
    let (frame, _) = ffkd::data::generate_scene(&spec, 0, &mut frng);
    let rgb_p = root.join("f.ppm");
    let thm_p = root.join("f.pgm");
    ffkd::data::write_frame(&frame, &rgb_p, &thm_p).unwrap();
    let back = ffkd::data::read_frame(0, &rgb_p, &thm_p).unwrap();
    let pnm_ok = back == frame;
    ok &= pnm_ok;
    detail.push(format!("PPM/PGM round trip: {pnm_ok}"));

    // training determinism (single-threaded) + checkpoint round trip
    make_splits(&spec, [12, 4, 4], 21, &root.join("data")).unwrap();
    let mk = |out_dir: &str| -> TrainConfig {
        let mut cfg = TrainConfig::defaults();
        cfg.role = Role::Student;
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg.seed = 5;
        cfg.threads = Some(1);
        cfg.train_manifest = root.join("data/manifest_train.json");
        cfg.val_manifest = root.join("data/manifest_val.json");
        cfg.out_dir = root.join(out_dir);
        cfg
    };
    let a = run_training(&mk("a")).unwrap();
    let b = run_training(&mk("b")).unwrap();
    let h = |p: &Path| fnv1a64(&format!("{:?}", fs::read(p).unwrap()));
    let logs_ok = h(&a.steps_csv) == h(&b.steps_csv) && h(&a.epochs_csv) == h(&b.epochs_csv);
    let ckpt_ok = h(&a.last_checkpoint) == h(&b.last_checkpoint);
    ok &= logs_ok && ckpt_ok;
    detail.push(format!("same-seed logs identical: {logs_ok}, checkpoints identical: {ckpt_ok}"));

    // checkpoint save -> load -> save byte equality
    let ck = ffkd::checkpoint::load_checkpoint(&a.last_checkpoint).unwrap();
    let (store, _) = ck.restore().unwrap();
    let resaved = root.join("resaved.ckpt");
    ffkd::checkpoint::save_checkpoint(&store, &ck.config, &ck.meta, &resaved).unwrap();
    let roundtrip_ok = h(&a.last_checkpoint) == h(&resaved);
    ok &= roundtrip_ok;
    detail.push(format!("checkpoint round trip: {roundtrip_ok}"));

    out.report("8 (determinism & persistence)", ok, detail.join("; "));
    fs::remove_dir_all(&root).ok();
}

// ── criterion 9: ablation identity ──────────────────────────────────────

fn criterion_9_ablation_identity(out: &mut Outcome) {
    let root = work_root().join("crit9");
    fs::create_dir_all(&root).unwrap();
    let spec = SceneSpec::default();
    make_splits(&spec, [12, 4, 4], 31, &root.join("data")).unwrap();

    let base = |out_dir: &str, mode: RunMode| -> TrainConfig {
        let mut cfg = TrainConfig::defaults();
        cfg.role = Role::Student;
        cfg.mode = mode;
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg.seed = 9;
        cfg.train_manifest = root.join("data/manifest_train.json");
        cfg.val_manifest = root.join("data/manifest_val.json");
        cfg.out_dir = root.join(out_dir);
        cfg
    };
    let mut tcfg = base("teacher", RunMode::Fusion);
    tcfg.role = Role::Teacher;
    tcfg.epochs = 1;
    let teacher = run_training(&tcfg).unwrap();

    let sup = run_training(&base("sup", RunMode::Fusion)).unwrap();
    let mut dcfg = base("dis", RunMode::Distill);
    dcfg.teacher_checkpoint = Some(teacher.best_checkpoint);
    dcfg.weights.beta = 0.0;
    dcfg.weights.gamma_kd = 0.0;
    let dis = run_training(&dcfg).unwrap();

    let finals = |p: &Path| -> Vec<f64> {
        fs::read_to_string(p).unwrap().lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect()
    };
    let a = finals(&sup.steps_csv);
    let b = finals(&dis.steps_csv);
    let mut max_diff = 0.0f64;
    for (x, y) in a.iter().zip(&b) {
        max_diff = max_diff.max((x - y).abs());
    }
    let ok = a.len() == b.len() && max_diff < 1e-6;
    out.report(
        "9 (ablation identity)",
        ok,
        format!("distill(beta=gamma=0) vs supervised: {} steps, max |d final| = {max_diff:.2e}", a.len()),
    );
    fs::remove_dir_all(&root).ok();
}

// ── criteria 4, 5, 6: trained-model properties ──────────────────────────

fn criteria_4_5_6_training(out: &mut Outcome) {
    let root = work_root().join("train");
    fs::create_dir_all(&root).unwrap();
    let repo = repo_root();

    let cpu0 = process_cpu_seconds();
    let gen = GenConfig::from_file(&repo.join("configs/acceptance/gen.conf")).unwrap();
    let data_dir = root.join("data");
    make_splits(&gen.spec, gen.counts, gen.seed, &data_dir).unwrap();

    let seeds = [0u64, 1, 2];
    let thresholds = DetectThresholds::default();
    let test_manifest = data_dir.join("manifest_test.json");

    let load_recipe = |file: &str| -> TrainConfig {
        TrainConfig::from_file(&repo.join("configs/acceptance").join(file)).unwrap()
    };

    let train_one = |recipe: &str, mode: RunMode, seed: u64, out_dir: &str, teacher: Option<PathBuf>| -> (PathBuf, Vec<f64>) {
        let mut cfg = load_recipe(recipe);
        cfg.mode = mode;
        if mode == RunMode::Distill {
            cfg.teacher_checkpoint = teacher;
        }
        cfg.seed = seed;
        cfg.train_manifest = data_dir.join("manifest_train.json");
        cfg.val_manifest = data_dir.join("manifest_val.json");
        cfg.out_dir = root.join(out_dir);
        let outcome = run_training(&cfg).unwrap();
        (outcome.best_checkpoint, outcome.val_map50_history)
    };

    // teachers: 3 modes x 3 seeds; fusion runs must improve by >= 10
    // val-mAP@0.5 points from the first epoch to the best
    let mut t_ckpts: Vec<Vec<PathBuf>> = Vec::new();
    let mut improvement_ok = true;
    for (mi, mode) in [RunMode::Fusion, RunMode::ThermalOnly, RunMode::RgbOnly].iter().enumerate() {
        let mut per_seed = Vec::new();
        for &seed in &seeds {
            let dir = format!("t{}_{}", mi, seed);
            let (ckpt, history) = train_one("teacher.conf", *mode, seed, &dir, None);
            if mi == 0 {
                let first = history.first().copied().unwrap_or(0.0);
                let best = history.iter().cloned().fold(0.0f64, f64::max);
                if best - first < 10.0 {
                    improvement_ok = false;
                }
            }
            per_seed.push(ckpt);
        }
        t_ckpts.push(per_seed);
    }
    let teacher_cpu_minutes = (process_cpu_seconds() - cpu0) / 60.0;

    // evaluate all teachers on the 500-frame test split
    let eval_map = |ckpt: &Path| -> (f64, f64) {
        let (report, _, _) = evaluate_checkpoint(ckpt, &test_manifest, &thresholds, 16, None).unwrap();
        (report.map_50, report.map_50_95)
    };
    let mut maps50 = vec![vec![0.0f64; seeds.len()]; 3];
    let mut t_fusion_5095 = vec![0.0f64; seeds.len()];
    for mi in 0..3 {
        for (si, ckpt) in t_ckpts[mi].iter().enumerate() {
            let (m50, m5095) = eval_map(ckpt);
            maps50[mi][si] = m50;
            if mi == 0 {
                t_fusion_5095[si] = m5095;
            }
        }
    }

    // criterion 4: fusion > thermal > rgb with gaps >= 2 on every seed
    let mut order_ok = true;
    let mut lines = Vec::new();
    for si in 0..seeds.len() {
        let (f, t, r) = (maps50[0][si], maps50[1][si], maps50[2][si]);
        let good = f >= t + 2.0 && t >= r + 2.0;
        order_ok &= good;
        lines.push(format!("seed {}: fusion {:.1} / thermal {:.1} / rgb {:.1}", seeds[si], f, t, r));
    }
    let budget_ok = teacher_cpu_minutes <= 90.0;

    // the trained fusion teacher finds cars: on frames containing a car, a
    // car detection overlaps some car box at IoU >= 0.5 most of the time
    let (_, fusion_sets, _) = evaluate_checkpoint(&t_ckpts[0][0], &test_manifest, &thresholds, 16, None).unwrap();
    let test_cache = DatasetCache::load(&test_manifest, 3).unwrap();
    let mut car_frames = 0usize;
    let mut car_hits = 0usize;
    for (fi, ann) in test_cache.annotations.iter().enumerate() {
        let cars: Vec<BoxXYWH> = ann.objects.iter().filter(|o| o.class_id == 2).map(|o| o.to_box()).collect();
        if cars.is_empty() {
            continue;
        }
        car_frames += 1;
        let hit = fusion_sets[fi].detections.iter().any(|d| {
            d.class_index == 1 && cars.iter().any(|c| iou(&d.bbox, c) >= 0.5)
        });
        if hit {
            car_hits += 1;
        }
    }
    let car_ok = car_frames > 0 && car_hits * 2 >= car_frames;
    out.report(
        "4 (modality ordering)",
        order_ok && budget_ok && car_ok && improvement_ok,
        format!(
            "{}; teacher training {:.1} cpu-min <= 90; car hits {}/{} frames; fusion val-mAP improved >= 10 pts: {}",
            lines.join("; "),
            teacher_cpu_minutes,
            car_hits,
            car_frames,
            improvement_ok
        ),
    );

    // criterion 5: distillation benefit
    let mut s_fusion_5095 = vec![0.0f64; seeds.len()];
    let mut s_distill_5095 = vec![0.0f64; seeds.len()];
    let mut s_distill_ckpts = Vec::new();
    for (si, &seed) in seeds.iter().enumerate() {
        let (sf, _) = train_one("student.conf", RunMode::Fusion, seed, &format!("sf_{seed}"), None);
        let (sd, _) = train_one(
            "student.conf",
            RunMode::Distill,
            seed,
            &format!("sd_{seed}"),
            Some(t_ckpts[0][si].clone()),
        );
        let (_, sf5095) = eval_map(&sf);
        let (_, sd5095) = eval_map(&sd);
        s_fusion_5095[si] = sf5095;
        s_distill_5095[si] = sd5095;
        s_distill_ckpts.push(sd);
    }
    let mut distill_ok = true;
    let mut lines5 = Vec::new();
    for si in 0..seeds.len() {
        let gain = s_distill_5095[si] - s_fusion_5095[si];
        let ratio = s_distill_5095[si] / t_fusion_5095[si].max(1e-9);
        let good = gain >= 1.0 && ratio >= 0.9;
        distill_ok &= good;
        lines5.push(format!(
            "seed {}: S-Distill {:.1} vs S-Fusion {:.1} (gain {:+.1}), {:.0}% of T-Fusion {:.1}",
            seeds[si],
            s_distill_5095[si],
            s_fusion_5095[si],
            gain,
            ratio * 100.0,
            t_fusion_5095[si]
        ));
    }
    out.report("5 (distillation benefit)", distill_ok, lines5.join("; "));

    // criterion 6: latency ratio at batch 32
    let cache = DatasetCache::load(&test_manifest, 3).unwrap();
    let bench_ckpt = |ckpt: &Path| -> ffkd::eval::LatencyReport {
        let ck = ffkd::checkpoint::load_checkpoint(ckpt).unwrap();
        let (mut store, det) = ck.restore().unwrap();
        let mode = RunMode::parse(&ck.meta.mode).unwrap().modality();
        let anchors = det.cfg.anchors.generate().unwrap();
        let indices: Vec<usize> = (0..32.min(cache.len())).collect();
        let (rgb, thm, _) = cache.batch(&indices);
        let ids: Vec<u64> = indices.iter().map(|&i| cache.frames[i].frame_id).collect();
        bench_latency(
            || {
                det.detect_batch(&mut store, &rgb, &thm, indices.len(), &ids, mode, &anchors, &thresholds)
                    .unwrap();
            },
            indices.len(),
            30,
            3,
        )
    };
    let t_lat = bench_ckpt(&t_ckpts[0][0]);
    let s_lat = bench_ckpt(&s_distill_ckpts[0]);
    let ratio = s_lat.mean_s_per_image / t_lat.mean_s_per_image;
    let lat_ok = ratio <= 0.7;
    out.report(
        "6 (latency ratio)",
        lat_ok,
        format!(
            "student {:.4}s (std {:.4}) vs teacher {:.4}s (std {:.4}) per image at batch 32, ratio {:.2} <= 0.70",
            s_lat.mean_s_per_image, s_lat.std_s_per_image, t_lat.mean_s_per_image, t_lat.std_s_per_image, ratio
        ),
    );

    fs::remove_dir_all(&root).ok();
}

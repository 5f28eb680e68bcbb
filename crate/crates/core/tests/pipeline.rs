//! Pipeline-level guarantees: training smoke runs, byte-identical
//! reproducibility, the distill-with-zero-weights ablation identity, teacher
//! immutability, and the CLI exit-code contract.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ffkd::config::{RunMode, TrainConfig};
use ffkd::data::{make_splits, SceneSpec};
use ffkd::model::Role;
use ffkd::params::fnv1a64;
use ffkd::train::run_training;

fn workdir(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("ffkd_pipe_{}_{name}", std::process::id()));
    fs::create_dir_all(&d).unwrap();
    d
}

fn tiny_dataset(dir: &Path, seed: u64) {
    let spec = SceneSpec::default();
    make_splits(&spec, [16, 4, 4], seed, dir).unwrap();
}

fn tiny_config(data: &Path, out: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::defaults();
    cfg.role = Role::Student;
    cfg.mode = RunMode::Fusion;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.seed = 11;
    cfg.train_manifest = data.join("manifest_train.json");
    cfg.val_manifest = data.join("manifest_val.json");
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn file_hash(p: &Path) -> u64 {
    fnv1a64(&format!("{:?}", fs::read(p).unwrap()))
}

#[test]
fn smoke_run_produces_finite_logs_and_checkpoints() {
    let root = workdir("smoke");
    tiny_dataset(&root.join("data"), 1);
    let mut cfg = tiny_config(&root.join("data"), &root.join("run"));
    cfg.epochs = 1;
    cfg.batch_size = 8;
    let outcome = run_training(&cfg).unwrap();
    assert!(outcome.best_checkpoint.exists());
    assert!(outcome.last_checkpoint.exists());
    let steps = fs::read_to_string(&outcome.steps_csv).unwrap();
    let mut rows = 0;
    for line in steps.lines().skip(1) {
        rows += 1;
        for field in line.split(',') {
            let v: f64 = field.parse().unwrap();
            assert!(v.is_finite(), "non-finite column in {line}");
        }
    }
    assert!(rows >= 2, "expected at least two steps, got {rows}");
    let epochs = fs::read_to_string(&outcome.epochs_csv).unwrap();
    assert!(epochs.lines().next().unwrap().starts_with("epoch,split,class_distill,box_distill,class_ce,box_reg,feature_distill,final"));
    assert!(epochs.lines().any(|l| l.contains(",train,")));
    assert!(epochs.lines().any(|l| l.contains(",val,")));
    fs::remove_dir_all(&root).ok();
}

#[test]
fn same_seed_runs_are_byte_identical() {
    let root = workdir("determinism");
    tiny_dataset(&root.join("data"), 3);
    let mut cfg_a = tiny_config(&root.join("data"), &root.join("a"));
    cfg_a.threads = Some(1);
    let mut cfg_b = tiny_config(&root.join("data"), &root.join("b"));
    cfg_b.threads = Some(1);
    let oa = run_training(&cfg_a).unwrap();
    let ob = run_training(&cfg_b).unwrap();
    assert_eq!(file_hash(&oa.steps_csv), file_hash(&ob.steps_csv), "step logs differ");
    assert_eq!(file_hash(&oa.epochs_csv), file_hash(&ob.epochs_csv), "epoch logs differ");
    assert_eq!(file_hash(&oa.last_checkpoint), file_hash(&ob.last_checkpoint), "checkpoints differ");
    assert_eq!(file_hash(&oa.best_checkpoint), file_hash(&ob.best_checkpoint));
    fs::remove_dir_all(&root).ok();
}

#[test]
fn ablation_identity_distill_with_zero_weights_matches_supervised() {
    let root = workdir("ablation");
    tiny_dataset(&root.join("data"), 5);

    // teacher to distill from (1 epoch is enough; only its presence matters)
    let mut tcfg = tiny_config(&root.join("data"), &root.join("teacher"));
    tcfg.role = Role::Teacher;
    tcfg.epochs = 1;
    tcfg.seed = 2;
    let teacher = run_training(&tcfg).unwrap();
    let teacher_hash_before = file_hash(&teacher.best_checkpoint);

    let mut sup = tiny_config(&root.join("data"), &root.join("sup"));
    sup.seed = 7;
    let sup_out = run_training(&sup).unwrap();

    let mut dis = tiny_config(&root.join("data"), &root.join("dis"));
    dis.seed = 7;
    dis.mode = RunMode::Distill;
    dis.teacher_checkpoint = Some(teacher.best_checkpoint.clone());
    dis.weights.beta = 0.0;
    dis.weights.gamma_kd = 0.0;
    let dis_out = run_training(&dis).unwrap();

    // per-step final losses agree within 1e-6
    let read_finals = |p: &Path| -> Vec<f64> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
            .collect()
    };
    let a = read_finals(&sup_out.steps_csv);
    let b = read_finals(&dis_out.steps_csv);
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        assert!((x - y).abs() < 1e-6, "step {i}: supervised {x} vs distill {y}");
    }

    // the teacher checkpoint is untouched by the distillation run
    assert_eq!(teacher_hash_before, file_hash(&teacher.best_checkpoint));
    fs::remove_dir_all(&root).ok();
}

#[test]
fn distill_refuses_anchor_mismatch() {
    let root = workdir("mismatch");
    tiny_dataset(&root.join("data"), 6);
    let mut tcfg = tiny_config(&root.join("data"), &root.join("teacher"));
    tcfg.role = Role::Teacher;
    tcfg.epochs = 1;
    let teacher = run_training(&tcfg).unwrap();

    // corrupt the teacher's anchor config in a re-saved checkpoint
    let ck = ffkd::checkpoint::load_checkpoint(&teacher.best_checkpoint).unwrap();
    let mut bad_cfg = ck.config.clone();
    bad_cfg.anchors.base_sizes = vec![10.0, 20.0, 40.0];
    let (store, _) = ck.restore().unwrap();
    let bad_path = root.join("bad_teacher.ckpt");
    ffkd::checkpoint::save_checkpoint(&store, &bad_cfg, &ck.meta, &bad_path).unwrap();

    let mut dis = tiny_config(&root.join("data"), &root.join("dis"));
    dis.mode = RunMode::Distill;
    dis.teacher_checkpoint = Some(bad_path);
    let err = match run_training(&dis) {
        Err(e) => e,
        Ok(_) => panic!("anchor mismatch must refuse to start"),
    };
    assert!(err.to_string().contains("anchor"), "{err}");
    fs::remove_dir_all(&root).ok();
}

// ── CLI exit-code contract ──────────────────────────────────────────────

fn ffkd_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ffkd"))
}

#[test]
fn cli_gen_data_rejects_bad_spec_with_exit_2() {
    let root = workdir("cli_gen");
    let conf = root.join("bad.conf");
    fs::write(&conf, "class_freq = 0.5, 0.2, 0.1\n").unwrap();
    let status = ffkd_bin()
        .args(["gen-data", "--config"])
        .arg(&conf)
        .arg("--out")
        .arg(root.join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    fs::remove_dir_all(&root).ok();
}

#[test]
fn cli_eval_missing_checkpoint_exits_2() {
    let root = workdir("cli_eval");
    let status = ffkd_bin()
        .args(["eval", "--checkpoint", "/nonexistent.ckpt", "--manifest", "/nonexistent.json"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    fs::remove_dir_all(&root).ok();
}

#[test]
fn cli_bench_missing_checkpoint_exits_2() {
    let status = ffkd_bin()
        .args(["bench", "--checkpoint", "/nope.ckpt", "--manifest", "/nope.json"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn cli_stats_empty_manifest_exits_2() {
    let root = workdir("cli_stats");
    let manifest = root.join("empty.json");
    fs::write(&manifest, r#"{"split":"test","items":[],"spec_hash":"0"}"#).unwrap();
    let status = ffkd_bin()
        .args(["stats", "--manifest"])
        .arg(&manifest)
        .arg("--out")
        .arg(root.join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    fs::remove_dir_all(&root).ok();
}

#[test]
fn cli_gen_data_same_seed_same_hash() {
    let root = workdir("cli_hash");
    let conf = root.join("gen.conf");
    fs::write(&conf, "counts = 4, 2, 2\nseed = 9\n").unwrap();
    let run = |out: &str| -> String {
        let output = ffkd_bin()
            .args(["gen-data", "--config"])
            .arg(&conf)
            .arg("--out")
            .arg(root.join(out))
            .output()
            .unwrap();
        assert!(output.status.success());
        String::from_utf8_lossy(&output.stdout)
            .lines()
            .find(|l| l.starts_with("spec_hash"))
            .unwrap()
            .to_string()
    };
    assert_eq!(run("a"), run("b"));
    fs::remove_dir_all(&root).ok();
}

#[test]
fn cli_stats_writes_one_kde_per_class_and_modality() {
    let root = workdir("cli_kde");
    tiny_dataset(&root.join("data"), 12);
    let out = root.join("stats");
    let status = ffkd_bin()
        .args(["stats", "--manifest"])
        .arg(root.join("data/manifest_train.json"))
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let kde_files: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| {
            let n = e.file_name().to_string_lossy().into_owned();
            n.starts_with("kde_") && n.ends_with(".csv")
        })
        .collect();
    assert_eq!(kde_files.len(), 6, "expected one KDE CSV per (class, modality)");
    assert!(out.join("prior_n.csv").exists());
    assert!(out.join("prior_centers.csv").exists());
    fs::remove_dir_all(&root).ok();
}

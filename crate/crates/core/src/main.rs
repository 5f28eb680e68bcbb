//! `ffkd` command line: generate synthetic paired RGB/thermal data, train
//! teacher and student detectors (supervised or distilled), evaluate mAP,
//! benchmark inference latency, and dump dataset statistics.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ffkd::checkpoint::load_checkpoint;
use ffkd::config::{GenConfig, TrainConfig};
use ffkd::data::{load_annotations, DatasetCache, DatasetManifest, CLASS_NAMES};
use ffkd::detect::DetectThresholds;
use ffkd::error::{Error, Result};
use ffkd::eval::bench_latency;
use ffkd::model::ModalityMode;
use ffkd::stats::{class_distribution, estimate_prior, kde_pixel_intensity, KdeModality};
use ffkd::train::{evaluate_checkpoint, run_training};

#[derive(Parser)]
#[command(name = "ffkd", version, about = "Feature-fusion + knowledge-distillation multi-modal detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test splits of synthetic paired RGB/thermal frames.
    GenData(GenDataArgs),
    /// Train a detector from a key-value config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest (mAP@0.5:0.95 / 0.5 / 0.75).
    Eval(EvalArgs),
    /// Benchmark per-image inference latency of a checkpoint.
    Bench(BenchArgs),
    /// Dataset statistics: class distribution, priors, per-class KDE curves.
    Stats(StatsArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Optional key-value config overriding the default scene spec.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Key-value training config.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rayon thread count (1 gives the documented bit-reproducible mode).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Report output path (JSON); a text table always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional JSON-lines dump of all detections.
    #[arg(long)]
    dump_detections: Option<PathBuf>,
    /// Override the modality mode stored in the checkpoint.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0.3)]
    score_thresh: f32,
    #[arg(long, default_value_t = 0.5)]
    nms_iou: f32,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 30)]
    batches: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Report output path (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for the KDE/prior CSV files.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Stats(a) => cmd_stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => GenConfig::from_file(p)?,
        None => GenConfig::defaults(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let manifests = ffkd::data::make_splits(&cfg.spec, cfg.counts, cfg.seed, &args.out)?;
    println!("spec_hash: {}", cfg.spec.content_hash(cfg.seed));
    for path in &manifests {
        let m = DatasetManifest::load(path)?;
        let anns: Vec<_> = m
            .resolved_items(path)
            .iter()
            .map(|(_, _, a)| load_annotations(a, cfg.spec.num_classes()))
            .collect::<Result<_>>()?;
        let dist = class_distribution(anns.iter(), cfg.spec.num_classes());
        println!(
            "{}: {} frames, {} objects, frequencies {:?}",
            m.split,
            m.items.len(),
            dist.total,
            dist.frequencies.iter().map(|f| (f * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    if let Some(threads) = args.threads {
        cfg.threads = Some(threads);
    }
    let outcome = run_training(&cfg)?;
    println!(
        "trained {} ({}): best val mAP@0.5 {:.2}, wall {:.1}s, cpu {:.1}s",
        match cfg.role {
            ffkd::model::Role::Teacher => "teacher",
            ffkd::model::Role::Student => "student",
        },
        cfg.mode.as_str(),
        outcome.best_val_map50,
        outcome.wall_seconds,
        outcome.cpu_seconds
    );
    println!("best checkpoint: {}", outcome.best_checkpoint.display());
    println!("last checkpoint: {}", outcome.last_checkpoint.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let thresholds = DetectThresholds {
        score: args.score_thresh,
        nms_iou: args.nms_iou,
        ..Default::default()
    };
    let mode = match &args.mode {
        Some(m) => Some(ModalityMode::parse(m)?),
        None => None,
    };
    let (report, sets, trained_mode) = evaluate_checkpoint(&args.checkpoint, &args.manifest, &thresholds, args.batch, mode)?;
    print!("{}", report.to_table(&format!("{} ({trained_mode})", args.checkpoint.display())));
    if let Some(out) = &args.out {
        write_file(out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    if let Some(dump) = &args.dump_detections {
        let mut lines = String::new();
        for s in &sets {
            lines.push_str(&s.to_json().to_string());
            lines.push('\n');
        }
        write_file(dump, lines.as_bytes())?;
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let (mut store, det) = ck.restore()?;
    let mode = ffkd::config::RunMode::parse(&ck.meta.mode)?.modality();
    let cache = DatasetCache::load(&args.manifest, det.cfg.num_classes)?;
    let anchors = det.cfg.anchors.generate()?;
    let thresholds = DetectThresholds::default();

    let indices: Vec<usize> = (0..args.batch.min(cache.len())).collect();
    let (rgb, thm, _) = cache.batch(&indices);
    let ids: Vec<u64> = indices.iter().map(|&i| cache.frames[i].frame_id).collect();
    let report = bench_latency(
        || {
            det.detect_batch(&mut store, &rgb, &thm, indices.len(), &ids, mode, &anchors, &thresholds)
                .expect("inference failed during benchmark");
        },
        indices.len(),
        args.batches,
        args.warmup,
    );
    println!(
        "{}: {:.6} s/image (std {:.6}) at batch {} over {} batches [{} logical cpus]",
        args.checkpoint.display(),
        report.mean_s_per_image,
        report.std_s_per_image,
        report.batch_size,
        report.batches_measured,
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    );
    if let Some(out) = &args.out {
        write_file(out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> Result<()> {
    let num_classes = CLASS_NAMES.len();
    let cache = DatasetCache::load(&args.manifest, num_classes)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(args.out.display().to_string(), e))?;

    let dist = class_distribution(cache.annotations.iter(), num_classes);
    if dist.empty {
        return Err(Error::Usage("manifest contains no annotated objects".into()));
    }
    println!("objects: {} over {} frames", dist.total, cache.len());
    for (i, name) in CLASS_NAMES.iter().enumerate() {
        println!("  {name}: {} ({:.3})", dist.counts[i], dist.frequencies[i]);
    }

    let prior = estimate_prior(cache.annotations.iter(), num_classes);
    let mut prior_csv = String::from("n,probability\n");
    for (n, p) in prior.n_hist.iter().enumerate() {
        prior_csv.push_str(&format!("{n},{p}\n"));
    }
    write_file(&args.out.join("prior_n.csv"), prior_csv.as_bytes())?;
    let mut center_csv = String::from("cell,count\n");
    for (i, c) in prior.center_hist.iter().enumerate() {
        center_csv.push_str(&format!("{i},{c}\n"));
    }
    write_file(&args.out.join("prior_centers.csv"), center_csv.as_bytes())?;

    let pairs: Vec<(&ffkd::data::MultiModalFrame, &ffkd::data::AnnotationSet)> =
        cache.frames.iter().zip(cache.annotations.iter()).collect();
    for (ci, name) in CLASS_NAMES.iter().enumerate() {
        for (modality, tag) in [(KdeModality::Rgb, "rgb"), (KdeModality::Thermal, "thm")] {
            match kde_pixel_intensity(&pairs, modality, ci + 1) {
                Ok(kde) => {
                    let path = args.out.join(format!("kde_{name}_{tag}.csv"));
                    write_file(&path, kde.to_csv().as_bytes())?;
                    println!(
                        "kde {name}/{tag}: bandwidth {:.2}, mode {:.0}, integral {:.4} -> {}",
                        kde.bandwidth,
                        kde.mode(),
                        kde.integral(),
                        path.display()
                    );
                }
                Err(e) => println!("kde {name}/{tag}: skipped ({e})"),
            }
        }
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

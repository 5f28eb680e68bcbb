//! Key-value text configuration (`key = value` lines, `#` comments) for the
//! training pipeline and the dataset generator.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::SceneSpec;
use crate::detect::DetectThresholds;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::{ModalityMode, Role} ;

/// Parse a `key = value` file; duplicate keys keep the last value.
pub fn parse_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_kv_str(&raw)
}

pub fn parse_kv_str(raw: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (ln, line) in raw.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", ln + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn take<T: std::str::FromStr>(map: &mut BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    match map.remove(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`"))),
    }
}

fn take_list(map: &mut BTreeMap<String, String>, key: &str) -> Result<Option<Vec<f32>>> {
    match map.remove(key) {
        None => Ok(None),
        Some(v) => v
            .split(',')
            .map(|s| s.trim().parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Some)
            .map_err(|_| Error::Config(format!("invalid list `{v}` for `{key}`"))),
    }
}

fn reject_unknown(map: &BTreeMap<String, String>) -> Result<()> {
    if let Some(k) = map.keys().next() {
        return Err(Error::Config(format!("unknown config key `{k}`")));
    }
    Ok(())
}

/// Training mode: one supervised modality setting or distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    RgbOnly,
    ThermalOnly,
    Fusion,
    Distill,
}

impl RunMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rgb" | "rgb-only" => Ok(RunMode::RgbOnly),
            "thermal" | "thermal-only" => Ok(RunMode::ThermalOnly),
            "fusion" => Ok(RunMode::Fusion),
            "distill" => Ok(RunMode::Distill),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RunMode::RgbOnly => "rgb-only",
            RunMode::ThermalOnly => "thermal-only",
            RunMode::Fusion => "fusion",
            RunMode::Distill => "distill",
        }
    }

    /// Which branches feed fusion at forward time.
    pub fn modality(&self) -> ModalityMode {
        match self {
            RunMode::RgbOnly => ModalityMode::RgbOnly,
            RunMode::ThermalOnly => ModalityMode::ThermalOnly,
            RunMode::Fusion | RunMode::Distill => ModalityMode::Fusion,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub role: Role,
    pub mode: RunMode,
    pub weights: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub lr_min: f32,
    pub seed: u64,
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    pub out_dir: PathBuf,
    pub teacher_checkpoint: Option<PathBuf>,
    pub thresholds: DetectThresholds,
    pub eval_batch: usize,
    pub threads: Option<usize>,
}

impl TrainConfig {
    pub fn defaults() -> Self {
        TrainConfig {
            role: Role::Teacher,
            mode: RunMode::Fusion,
            weights: LossWeights::default(),
            epochs: 50,
            batch_size: 16,
            lr: 1e-3,
            lr_min: 1e-5,
            seed: 0,
            train_manifest: PathBuf::from("data/manifest_train.json"),
            val_manifest: PathBuf::from("data/manifest_val.json"),
            out_dir: PathBuf::from("runs/out"),
            teacher_checkpoint: None,
            thresholds: DetectThresholds::default(),
            eval_batch: 16,
            threads: None,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut map = parse_kv(path)?;
        let mut cfg = Self::defaults();
        if let Some(role) = map.remove("role") {
            cfg.role = match role.as_str() {
                "teacher" => Role::Teacher,
                "student" => Role::Student,
                other => return Err(Error::Config(format!("unknown role `{other}`"))),
            };
        }
        if let Some(mode) = map.remove("mode") {
            cfg.mode = RunMode::parse(&mode)?;
        }
        cfg.epochs = take(&mut map, "epochs", cfg.epochs)?;
        cfg.batch_size = take(&mut map, "batch_size", cfg.batch_size)?;
        cfg.lr = take(&mut map, "lr", cfg.lr)?;
        cfg.lr_min = take(&mut map, "lr_min", cfg.lr_min)?;
        cfg.seed = take(&mut map, "seed", cfg.seed)?;
        cfg.eval_batch = take(&mut map, "eval_batch", cfg.eval_batch)?;
        if let Some(v) = map.remove("train_manifest") {
            cfg.train_manifest = PathBuf::from(v);
        }
        if let Some(v) = map.remove("val_manifest") {
            cfg.val_manifest = PathBuf::from(v);
        }
        if let Some(v) = map.remove("out_dir") {
            cfg.out_dir = PathBuf::from(v);
        }
        if let Some(v) = map.remove("teacher_checkpoint") {
            cfg.teacher_checkpoint = Some(PathBuf::from(v));
        }
        if let Some(v) = map.remove("threads") {
            cfg.threads = Some(v.parse().map_err(|_| Error::Config(format!("invalid threads `{v}`")))?);
        }
        cfg.weights.alpha = take(&mut map, "alpha", cfg.weights.alpha)?;
        cfg.weights.beta = take(&mut map, "beta", cfg.weights.beta)?;
        cfg.weights.gamma_kd = take(&mut map, "gamma_kd", cfg.weights.gamma_kd)?;
        cfg.weights.lambda_cls = take(&mut map, "lambda_cls", cfg.weights.lambda_cls)?;
        cfg.weights.lambda_reg = take(&mut map, "lambda_reg", cfg.weights.lambda_reg)?;
        cfg.weights.gamma_gt = take(&mut map, "gamma_gt", cfg.weights.gamma_gt)?;
        cfg.weights.tau = take(&mut map, "tau", cfg.weights.tau)?;
        cfg.weights.distill_prob_thresh = take(&mut map, "distill_prob_thresh", cfg.weights.distill_prob_thresh)?;
        cfg.thresholds.score = take(&mut map, "score_thresh", cfg.thresholds.score)?;
        cfg.thresholds.nms_iou = take(&mut map, "nms_iou", cfg.thresholds.nms_iou)?;
        cfg.thresholds.max_detections = take(&mut map, "max_detections", cfg.thresholds.max_detections)?;
        reject_unknown(&map)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config("epochs must be >= 1 and batch_size >= 2".into()));
        }
        if self.mode == RunMode::Distill {
            if self.role != Role::Student {
                return Err(Error::Config("distill mode trains the student role".into()));
            }
            if self.teacher_checkpoint.is_none() {
                return Err(Error::Config("distill mode requires teacher_checkpoint".into()));
            }
        }
        Ok(())
    }
}

/// Flat overrides for the synthetic dataset generator.
#[derive(Debug, Clone)]
pub struct GenConfig {
    pub spec: SceneSpec,
    pub counts: [usize; 3],
    pub seed: u64,
}

impl GenConfig {
    pub fn defaults() -> Self {
        GenConfig { spec: SceneSpec::default(), counts: [2000, 200, 500], seed: 0 }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut map = parse_kv(path)?;
        let mut cfg = Self::defaults();
        cfg.spec.width = take(&mut map, "width", cfg.spec.width)?;
        cfg.spec.height = take(&mut map, "height", cfg.spec.height)?;
        cfg.spec.lambda = take(&mut map, "lambda", cfg.spec.lambda)?;
        cfg.spec.max_targets = take(&mut map, "max_targets", cfg.spec.max_targets)?;
        cfg.seed = take(&mut map, "seed", cfg.seed)?;
        if let Some(freq) = take_list(&mut map, "class_freq")? {
            if freq.len() != cfg.spec.classes.len() {
                return Err(Error::Config(format!(
                    "class_freq has {} entries for {} classes",
                    freq.len(),
                    cfg.spec.classes.len()
                )));
            }
            cfg.spec.class_freq = freq;
        }
        if let Some(mix) = take_list(&mut map, "visibility_mix")? {
            if mix.len() != 3 {
                return Err(Error::Config("visibility_mix needs exactly 3 entries".into()));
            }
            cfg.spec.visibility_mix = [mix[0], mix[1], mix[2]];
        }
        if let Some(counts) = take_list(&mut map, "counts")? {
            if counts.len() != 3 {
                return Err(Error::Config("counts needs exactly 3 entries (train,val,test)".into()));
            }
            cfg.counts = [counts[0] as usize, counts[1] as usize, counts[2] as usize];
        }
        reject_unknown(&map)?;
        cfg.spec.validate()?;
        Ok(cfg)
    }
}

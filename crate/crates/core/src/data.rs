//! Deterministic synthetic paired RGB/thermal scenes with box annotations,
//! plus the on-disk dataset formats: binary PPM (P6) / PGM (P5) images, JSON
//! annotations, and split manifests.
//!
//! The generator draws class-shaped targets (person: tall ellipse, car: wide
//! rectangle, bike: thin frame) into each modality according to a
//! per-target visibility assignment, so single-modality models provably miss
//! a controlled fraction of targets. (spec, seed) determines every byte.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BoxXYWH;
use crate::error::{Error, Result};
use crate::params::fnv1a64;

pub const CLASS_NAMES: [&str; 3] = ["person", "car", "bike"];

/// Per-class appearance and size table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    /// Uniform width range in pixels.
    pub w_range: (u32, u32),
    /// Uniform height range in pixels.
    pub h_range: (u32, u32),
    /// Mean thermal intensity of the target body.
    pub emissivity: f32,
    /// RGB body color.
    pub color: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub classes: Vec<ClassSpec>,
    /// Class frequencies, must sum to 1.
    pub class_freq: Vec<f32>,
    /// Poisson mean of targets per frame, truncated at `max_targets`.
    pub lambda: f32,
    pub max_targets: usize,
    /// Fractions of targets visible in RGB only / thermal only / both; sums to 1.
    pub visibility_mix: [f32; 3],
    /// Thermal background mean and noise sigma.
    pub thermal_bg: f32,
    pub thermal_noise: f32,
    /// RGB background base, ramp amplitude and noise sigma.
    pub rgb_bg: [f32; 3],
    pub rgb_ramp: f32,
    pub rgb_noise: f32,
    /// Muted clutter rectangles drawn into the RGB background only; thermal
    /// stays clean, so fusion can disambiguate what RGB alone cannot.
    pub rgb_clutter: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 128,
            height: 128,
            classes: vec![
                ClassSpec {
                    name: "person".into(),
                    w_range: (10, 18),
                    h_range: (22, 40),
                    emissivity: 220.0,
                    color: [185.0, 70.0, 60.0],
                },
                ClassSpec {
                    name: "car".into(),
                    w_range: (22, 46),
                    h_range: (12, 26),
                    emissivity: 170.0,
                    color: [60.0, 80.0, 190.0],
                },
                ClassSpec {
                    name: "bike".into(),
                    w_range: (12, 26),
                    h_range: (14, 28),
                    emissivity: 140.0,
                    color: [60.0, 170.0, 70.0],
                },
            ],
            class_freq: vec![0.35, 0.55, 0.10],
            lambda: 3.0,
            max_targets: 8,
            visibility_mix: [0.2, 0.3, 0.5],
            thermal_bg: 60.0,
            thermal_noise: 6.0,
            rgb_bg: [95.0, 100.0, 92.0],
            rgb_ramp: 10.0,
            rgb_noise: 10.0,
            rgb_clutter: 12,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.classes.len() != self.class_freq.len() {
            return Err(Error::Config("class table and frequencies must align".into()));
        }
        let s: f32 = self.class_freq.iter().sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(Error::Config(format!("class frequencies sum to {s}, expected 1")));
        }
        let v: f32 = self.visibility_mix.iter().sum();
        if (v - 1.0).abs() > 1e-4 {
            return Err(Error::Config(format!("visibility mix sums to {v}, expected 1")));
        }
        for c in &self.classes {
            if c.w_range.0 == 0 || c.h_range.0 == 0 || c.w_range.1 as usize > self.width || c.h_range.1 as usize > self.height {
                return Err(Error::Config(format!("class `{}` size range exceeds the image", c.name)));
            }
            if c.w_range.0 > c.w_range.1 || c.h_range.0 > c.h_range.1 {
                return Err(Error::Config(format!("class `{}` has an empty size range", c.name)));
            }
        }
        Ok(())
    }

    /// Stable content hash over the spec plus master seed.
    pub fn content_hash(&self, seed: u64) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        format!("{:016x}", fnv1a64(&json) ^ seed.rotate_left(17))
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

/// Paired RGB + thermal frame, byte pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalFrame {
    pub frame_id: u64,
    pub width: usize,
    pub height: usize,
    /// RGB, interleaved, row-major: height*width*3 bytes.
    pub rgb: Vec<u8>,
    /// Thermal, row-major: height*width bytes.
    pub thm: Vec<u8>,
}

/// One ground-truth object: pixel box plus 1-based class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: [f32; 4],
    pub class_id: usize,
}

impl Annotation {
    pub fn to_box(&self) -> BoxXYWH {
        BoxXYWH::from_slice(&self.bbox)
    }
}

/// Ground truth for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub frame_id: u64,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<Annotation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Visibility {
    RgbOnly,
    ThermalOnly,
    Both,
}

/// A placed target before rendering.
#[derive(Debug, Clone)]
pub struct PlacedTarget {
    pub bbox: BoxXYWH,
    pub class_index: usize,
    pub visibility: Visibility,
}

fn sample_poisson(rng: &mut ChaCha8Rng, lambda: f32) -> usize {
    // Knuth's product method; fine for small lambda.
    let l = (-lambda).exp();
    let mut k = 0usize;
    let mut p = 1.0f32;
    loop {
        p *= rng.random_range(0.0..1.0f32);
        if p <= l {
            return k;
        }
        k += 1;
    }
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller.
    let u1: f32 = rng.random_range(f32::EPSILON..1.0);
    let u2: f32 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

fn sample_class(rng: &mut ChaCha8Rng, freq: &[f32]) -> usize {
    let u: f32 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &f) in freq.iter().enumerate() {
        acc += f;
        if u < acc {
            return i;
        }
    }
    freq.len() - 1
}

fn sample_visibility(rng: &mut ChaCha8Rng, mix: &[f32; 3]) -> Visibility {
    let u: f32 = rng.random_range(0.0..1.0);
    if u < mix[0] {
        Visibility::RgbOnly
    } else if u < mix[0] + mix[1] {
        Visibility::ThermalOnly
    } else {
        Visibility::Both
    }
}

/// Sample target placements: N ~ truncated Poisson, classes ~ class_freq,
/// sizes per-class uniform, positions uniform with full containment and
/// bounded pairwise overlap (resampling N after 100 failed placements).
pub fn sample_targets(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<PlacedTarget> {
    'scene: loop {
        let mut n = sample_poisson(rng, spec.lambda);
        while n > spec.max_targets {
            n = sample_poisson(rng, spec.lambda);
        }
        let mut placed: Vec<PlacedTarget> = Vec::with_capacity(n);
        for _ in 0..n {
            let class_index = sample_class(rng, &spec.class_freq);
            let c = &spec.classes[class_index];
            let w = rng.random_range(c.w_range.0..=c.w_range.1) as f32;
            let h = rng.random_range(c.h_range.0..=c.h_range.1) as f32;
            let mut tries = 0;
            let bbox = loop {
                let x = rng.random_range(0.0..=(spec.width as f32 - w));
                let y = rng.random_range(0.0..=(spec.height as f32 - h));
                let candidate = BoxXYWH::new(x.floor(), y.floor(), w, h);
                if placed.iter().all(|p| crate::boxes::iou(&p.bbox, &candidate) <= 0.2) {
                    break candidate;
                }
                tries += 1;
                if tries >= 100 {
                    // unplaceable target: resample the whole scene
                    continue 'scene;
                }
            };
            let visibility = sample_visibility(rng, &spec.visibility_mix);
            placed.push(PlacedTarget { bbox, class_index, visibility });
        }
        return placed;
    }
}

/// Draw one target's shape into a per-pixel mask (1 = body pixel).
/// The drawn support's bounding extent spans the annotation box.
pub fn draw_shape_mask(class_name: &str, w: usize, h: usize) -> Vec<bool> {
    let mut mask = vec![false; w * h];
    match class_name {
        "person" => {
            // tall ellipse inscribed in the box
            let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
            let (rx, ry) = (w as f32 / 2.0, h as f32 / 2.0);
            for y in 0..h {
                for x in 0..w {
                    let dx = (x as f32 + 0.5 - cx) / rx;
                    let dy = (y as f32 + 0.5 - cy) / ry;
                    if dx * dx + dy * dy <= 1.0 {
                        mask[y * w + x] = true;
                    }
                }
            }
        }
        "bike" => {
            // thin frame: 2px outline plus one diagonal strut
            let t = 2usize.min(w).min(h);
            for y in 0..h {
                for x in 0..w {
                    let edge = x < t || y < t || x >= w - t || y >= h - t;
                    let diag = (x as f32 / w as f32 - y as f32 / h as f32).abs() < 0.12;
                    if edge || diag {
                        mask[y * w + x] = true;
                    }
                }
            }
        }
        _ => {
            // car and anything else: filled rectangle
            for m in mask.iter_mut() {
                *m = true;
            }
        }
    }
    mask
}

/// Render a sampled scene into both modalities.
pub fn render_scene(spec: &SceneSpec, targets: &[PlacedTarget], frame_id: u64, rng: &mut ChaCha8Rng) -> MultiModalFrame {
    let (w, h) = (spec.width, spec.height);
    let mut thm = vec![0.0f32; w * h];
    let mut rgb = vec![0.0f32; w * h * 3];

    // backgrounds: thermal flat + noise; RGB smooth ramp + noise
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            thm[i] = spec.thermal_bg + spec.thermal_noise * sample_normal(rng);
            let ramp = spec.rgb_ramp * ((x as f32 / w as f32) - 0.5 + (y as f32 / h as f32) - 0.5);
            for c in 0..3 {
                rgb[i * 3 + c] = spec.rgb_bg[c] + ramp + spec.rgb_noise * sample_normal(rng);
            }
        }
    }

    // RGB-only clutter: muted rectangles that never appear in thermal
    const CLUTTER_COLORS: [[f32; 3]; 6] = [
        [120.0, 110.0, 95.0],
        [70.0, 75.0, 85.0],
        [135.0, 125.0, 70.0],
        [60.0, 95.0, 80.0],
        [150.0, 80.0, 75.0],
        [75.0, 85.0, 150.0],
    ];
    for _ in 0..spec.rgb_clutter {
        let cw = rng.random_range(8..30usize).min(w);
        let chh = rng.random_range(8..30usize).min(h);
        let cx = rng.random_range(0..=(w - cw) as u64) as usize;
        let cy = rng.random_range(0..=(h - chh) as u64) as usize;
        let color = CLUTTER_COLORS[rng.random_range(0..CLUTTER_COLORS.len() as u64) as usize];
        for dy in 0..chh {
            for dx in 0..cw {
                let i = (cy + dy) * w + (cx + dx);
                for c in 0..3 {
                    rgb[i * 3 + c] = color[c] + spec.rgb_noise * 0.5 * sample_normal(rng);
                }
            }
        }
    }

    for t in targets {
        let cls = &spec.classes[t.class_index];
        let bw = t.bbox.w as usize;
        let bh = t.bbox.h as usize;
        let mask = draw_shape_mask(&cls.name, bw, bh);
        let (x0, y0) = (t.bbox.x as usize, t.bbox.y as usize);
        let in_thm = t.visibility != Visibility::RgbOnly;
        let in_rgb = t.visibility != Visibility::ThermalOnly;
        for dy in 0..bh {
            for dx in 0..bw {
                if !mask[dy * bw + dx] {
                    continue;
                }
                let i = (y0 + dy) * w + (x0 + dx);
                if in_thm {
                    thm[i] = cls.emissivity + spec.thermal_noise * 0.5 * sample_normal(rng);
                }
                if in_rgb {
                    for c in 0..3 {
                        rgb[i * 3 + c] = cls.color[c] + spec.rgb_noise * 0.5 * sample_normal(rng);
                    }
                }
            }
        }
    }

    MultiModalFrame {
        frame_id,
        width: w,
        height: h,
        rgb: rgb.iter().map(|&v| v.clamp(0.0, 255.0) as u8).collect(),
        thm: thm.iter().map(|&v| v.clamp(0.0, 255.0) as u8).collect(),
    }
}

/// Generate one frame plus its annotations from a dedicated RNG stream.
pub fn generate_scene(spec: &SceneSpec, frame_id: u64, rng: &mut ChaCha8Rng) -> (MultiModalFrame, AnnotationSet) {
    let targets = sample_targets(spec, rng);
    let frame = render_scene(spec, &targets, frame_id, rng);
    let objects = targets
        .iter()
        .map(|t| Annotation { bbox: t.bbox.as_array(), class_id: t.class_index + 1 })
        .collect();
    (
        frame,
        AnnotationSet { frame_id, width: spec.width, height: spec.height, objects },
    )
}

/// Counter-based per-frame RNG: one independent stream per (seed, split, frame).
pub fn frame_rng(seed: u64, split_index: u64, frame_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split_index << 32) | frame_index);
    rng
}

// ── image I/O: binary PPM (P6) and PGM (P5) ─────────────────────────────

fn write_pnm(path: &Path, magic: &str, w: usize, h: usize, bytes: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(bytes.len() + 32);
    write!(buf, "{magic}\n{w} {h}\n255\n").expect("in-memory write");
    buf.extend_from_slice(bytes);
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

fn parse_pnm(path: &Path, expect_magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let raw = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let perr = |offset: usize, msg: &str| Error::Parse {
        path: path.display().to_string(),
        offset,
        msg: msg.to_string(),
    };
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<String> {
        while *pos < raw.len() && raw[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < raw.len() && !raw[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(perr(start, "unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&raw[start..*pos]).into_owned())
    };
    let magic = token(&mut pos)?;
    if magic != expect_magic {
        return Err(perr(0, &format!("bad magic `{magic}`, expected `{expect_magic}`")));
    }
    let w: usize = token(&mut pos)?.parse().map_err(|_| perr(pos, "bad width"))?;
    let h: usize = token(&mut pos)?.parse().map_err(|_| perr(pos, "bad height"))?;
    let maxval: usize = token(&mut pos)?.parse().map_err(|_| perr(pos, "bad maxval"))?;
    if maxval != 255 {
        return Err(perr(pos, &format!("unsupported maxval {maxval}")));
    }
    if pos >= raw.len() || !raw[pos].is_ascii_whitespace() {
        return Err(perr(pos, "missing header terminator"));
    }
    pos += 1;
    let need = w * h * channels;
    if raw.len() - pos < need {
        return Err(perr(raw.len(), &format!("truncated pixel data: have {}, need {need}", raw.len() - pos)));
    }
    Ok((w, h, raw[pos..pos + need].to_vec()))
}

/// Write the pair as `<stem>.ppm` (RGB) and `<stem>.pgm` (thermal).
pub fn write_frame(frame: &MultiModalFrame, rgb_path: &Path, thm_path: &Path) -> Result<()> {
    write_pnm(rgb_path, "P6", frame.width, frame.height, &frame.rgb)?;
    write_pnm(thm_path, "P5", frame.width, frame.height, &frame.thm)
}

pub fn read_frame(frame_id: u64, rgb_path: &Path, thm_path: &Path) -> Result<MultiModalFrame> {
    let (w, h, rgb) = parse_pnm(rgb_path, "P6", 3)?;
    let (w2, h2, thm) = parse_pnm(thm_path, "P5", 1)?;
    if (w, h) != (w2, h2) {
        return Err(Error::invalid("read_frame", format!("modality size mismatch {w}x{h} vs {w2}x{h2}")));
    }
    Ok(MultiModalFrame { frame_id, width: w, height: h, rgb, thm })
}

// ── annotations ─────────────────────────────────────────────────────────

pub fn save_annotations(set: &AnnotationSet, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(set)?;
    fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load and validate annotations: boxes fully inside the image, class ids in
/// range 1..=num_classes.
pub fn load_annotations(path: &Path, num_classes: usize) -> Result<AnnotationSet> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let set: AnnotationSet = serde_json::from_str(&raw)?;
    for (i, obj) in set.objects.iter().enumerate() {
        let [x, y, w, h] = obj.bbox;
        if x < 0.0 || y < 0.0 || w <= 0.0 || h <= 0.0 || x + w > set.width as f32 || y + h > set.height as f32 {
            return Err(Error::invalid(
                "load_annotations",
                format!("frame {} object {i}: box {:?} outside {}x{}", set.frame_id, obj.bbox, set.width, set.height),
            ));
        }
        if obj.class_id == 0 || obj.class_id > num_classes {
            return Err(Error::invalid(
                "load_annotations",
                format!("frame {} object {i}: unknown class_id {}", set.frame_id, obj.class_id),
            ));
        }
    }
    Ok(set)
}

// ── manifests & splits ──────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestItem {
    pub rgb: String,
    pub thm: String,
    pub ann: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub items: Vec<ManifestItem>,
    pub spec_hash: String,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&raw)?)
    }

    /// Resolve item paths relative to the manifest location.
    pub fn resolved_items(&self, manifest_path: &Path) -> Vec<(PathBuf, PathBuf, PathBuf)> {
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        self.items
            .iter()
            .map(|it| (base.join(&it.rgb), base.join(&it.thm), base.join(&it.ann)))
            .collect()
    }
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Generate train/val/test splits under `out_dir` with disjoint RNG
/// substreams per split; returns the three manifest paths.
pub fn make_splits(spec: &SceneSpec, counts: [usize; 3], seed: u64, out_dir: &Path) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Config("every split needs at least one frame".into()));
    }
    let hash = spec.content_hash(seed);
    let mut manifest_paths = Vec::new();
    let mut next_frame_id = 0u64;
    for (si, (&count, name)) in counts.iter().zip(SPLIT_NAMES).enumerate() {
        let split_dir = out_dir.join(name);
        fs::create_dir_all(&split_dir).map_err(|e| Error::io(split_dir.display().to_string(), e))?;
        let mut items = Vec::with_capacity(count);
        for fi in 0..count {
            let frame_id = next_frame_id;
            next_frame_id += 1;
            let mut rng = frame_rng(seed, si as u64, fi as u64);
            let (frame, ann) = generate_scene(spec, frame_id, &mut rng);
            let stem = format!("frame_{frame_id:06}");
            let rgb_rel = format!("{name}/{stem}.ppm");
            let thm_rel = format!("{name}/{stem}.pgm");
            let ann_rel = format!("{name}/{stem}.json");
            write_frame(&frame, &out_dir.join(&rgb_rel), &out_dir.join(&thm_rel))?;
            save_annotations(&ann, &out_dir.join(&ann_rel))?;
            items.push(ManifestItem { rgb: rgb_rel, thm: thm_rel, ann: ann_rel });
        }
        let manifest = DatasetManifest { split: name.to_string(), items, spec_hash: hash.clone() };
        let mpath = out_dir.join(format!("manifest_{name}.json"));
        manifest.save(&mpath)?;
        manifest_paths.push(mpath);
    }
    Ok(manifest_paths)
}

/// A frame pair normalized to [0,1] f32, CHW layout per modality.
pub struct LoadedFrame {
    pub frame_id: u64,
    pub rgb_chw: Vec<f32>,
    pub thm_chw: Vec<f32>,
    pub annotations: AnnotationSet,
}

/// Load a manifest item and convert to network input layout.
pub fn load_item(rgb: &Path, thm: &Path, ann: &Path, num_classes: usize) -> Result<LoadedFrame> {
    let annotations = load_annotations(ann, num_classes)?;
    let frame = read_frame(annotations.frame_id, rgb, thm)?;
    let (w, h) = (frame.width, frame.height);
    let mut rgb_chw = vec![0.0f32; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                rgb_chw[c * w * h + y * w + x] = frame.rgb[(y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    let thm_chw: Vec<f32> = frame.thm.iter().map(|&v| v as f32 / 255.0).collect();
    Ok(LoadedFrame { frame_id: frame.frame_id, rgb_chw, thm_chw, annotations })
}

/// A whole split held as raw bytes; batches are converted to f32 on demand.
pub struct DatasetCache {
    pub frames: Vec<MultiModalFrame>,
    pub annotations: Vec<AnnotationSet>,
    pub width: usize,
    pub height: usize,
}

impl DatasetCache {
    pub fn load(manifest_path: &Path, num_classes: usize) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        if manifest.items.is_empty() {
            return Err(Error::Usage(format!("manifest {} lists no frames", manifest_path.display())));
        }
        let mut frames = Vec::with_capacity(manifest.items.len());
        let mut annotations = Vec::with_capacity(manifest.items.len());
        for (rgb, thm, ann) in manifest.resolved_items(manifest_path) {
            let a = load_annotations(&ann, num_classes)?;
            let f = read_frame(a.frame_id, &rgb, &thm)?;
            frames.push(f);
            annotations.push(a);
        }
        let (width, height) = (frames[0].width, frames[0].height);
        Ok(DatasetCache { frames, annotations, width, height })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Build [n,3,H,W] and [n,1,H,W] f32 batches for the given frame indices.
    pub fn batch(&self, indices: &[usize]) -> (Vec<f32>, Vec<f32>, Vec<&AnnotationSet>) {
        let (w, h) = (self.width, self.height);
        let mut rgb = vec![0.0f32; indices.len() * 3 * w * h];
        let mut thm = vec![0.0f32; indices.len() * w * h];
        for (bi, &fi) in indices.iter().enumerate() {
            let f = &self.frames[fi];
            let rbase = bi * 3 * w * h;
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        rgb[rbase + c * w * h + y * w + x] = f.rgb[(y * w + x) * 3 + c] as f32 / 255.0;
                    }
                }
            }
            let tbase = bi * w * h;
            for (i, &v) in f.thm.iter().enumerate() {
                thm[tbase + i] = v as f32 / 255.0;
            }
        }
        let anns = indices.iter().map(|&i| &self.annotations[i]).collect();
        (rgb, thm, anns)
    }
}

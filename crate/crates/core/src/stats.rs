//! Probabilistic characterization of the dataset: per-class pixel-intensity
//! likelihoods via Gaussian KDE, empirical class frequencies, and the
//! annotation prior (target count, box placement, box area).

use serde::Serialize;

use crate::data::{AnnotationSet, MultiModalFrame};
use crate::error::{Error, Result};

pub const KDE_GRID_POINTS: usize = 256;
/// Minimum in-box pixel count for a usable density estimate.
pub const KDE_MIN_PIXELS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum KdeModality {
    Rgb,
    Thermal,
}

/// Gaussian-kernel density over the intensity axis [0, 255].
#[derive(Debug, Clone, Serialize)]
pub struct KDEstimate {
    pub grid: Vec<f32>,
    pub density: Vec<f32>,
    pub bandwidth: f32,
    pub class_id: usize,
    pub modality: KdeModality,
    pub samples: usize,
}

impl KDEstimate {
    /// Trapezoidal integral over the grid (unit spacing).
    pub fn integral(&self) -> f64 {
        trapezoid(&self.density)
    }

    /// Mean intensity under the density, via trapezoidal quadrature.
    pub fn mean(&self) -> f64 {
        let weighted: Vec<f32> = self.grid.iter().zip(&self.density).map(|(x, d)| x * d).collect();
        trapezoid(&weighted) / self.integral()
    }

    /// Grid point with maximum density.
    pub fn mode(&self) -> f32 {
        let mut best = 0usize;
        for (i, &d) in self.density.iter().enumerate() {
            if d > self.density[best] {
                best = i;
            }
        }
        self.grid[best]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("intensity,density\n");
        for (g, d) in self.grid.iter().zip(&self.density) {
            s.push_str(&format!("{g},{d}\n"));
        }
        s
    }
}

fn trapezoid(values: &[f32]) -> f64 {
    let s: f64 = values.iter().map(|&v| v as f64).sum();
    s - (values[0] as f64 + values[values.len() - 1] as f64) / 2.0
}

/// Silverman's rule of thumb with an interquartile-range guard, floored at
/// 0.75 so the unit-spaced evaluation grid still resolves the kernel.
pub fn silverman_bandwidth(samples: &[f32]) -> f32 {
    let n = samples.len() as f32;
    let mean = samples.iter().sum::<f32>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / (n - 1.0).max(1.0);
    let sigma = var.sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let q = |p: f32| -> f32 {
        let idx = (p * (sorted.len() - 1) as f32).round() as usize;
        sorted[idx]
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sigma.min(iqr / 1.34) } else { sigma };
    (0.9 * spread * n.powf(-0.2)).max(0.75)
}

/// Gaussian KDE of raw samples on the 256-point intensity grid.
pub fn kde_from_samples(samples: &[f32], class_id: usize, modality: KdeModality) -> Result<KDEstimate> {
    if samples.len() < KDE_MIN_PIXELS {
        return Err(Error::invalid(
            "kde_pixel_intensity",
            format!("{} in-box pixels, need at least {KDE_MIN_PIXELS}", samples.len()),
        ));
    }
    let bandwidth = silverman_bandwidth(samples);
    let grid: Vec<f32> = (0..KDE_GRID_POINTS).map(|i| i as f32).collect();
    let norm = 1.0 / (samples.len() as f32 * bandwidth * (2.0 * std::f32::consts::PI).sqrt());
    let density: Vec<f32> = grid
        .iter()
        .map(|&x| {
            let mut acc = 0.0f32;
            for &s in samples {
                let z = (x - s) / bandwidth;
                acc += (-0.5 * z * z).exp();
            }
            acc * norm
        })
        .collect();
    Ok(KDEstimate { grid, density, bandwidth, class_id, modality, samples: samples.len() })
}

/// Collect in-box pixel intensities for one class across frames: raw thermal
/// values, or per-pixel RGB luminance (channel mean).
pub fn class_pixels(frames: &[(&MultiModalFrame, &AnnotationSet)], modality: KdeModality, class_id: usize) -> Vec<f32> {
    let mut out = Vec::new();
    for (frame, ann) in frames {
        for obj in &ann.objects {
            if obj.class_id != class_id {
                continue;
            }
            let [x, y, w, h] = obj.bbox;
            let (x0, y0, x1, y1) = (x as usize, y as usize, (x + w) as usize, (y + h) as usize);
            for yy in y0..y1.min(frame.height) {
                for xx in x0..x1.min(frame.width) {
                    let i = yy * frame.width + xx;
                    match modality {
                        KdeModality::Thermal => out.push(frame.thm[i] as f32),
                        KdeModality::Rgb => {
                            let r = frame.rgb[i * 3] as f32;
                            let g = frame.rgb[i * 3 + 1] as f32;
                            let b = frame.rgb[i * 3 + 2] as f32;
                            out.push((r + g + b) / 3.0);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-class likelihood estimate straight from frames + annotations.
pub fn kde_pixel_intensity(frames: &[(&MultiModalFrame, &AnnotationSet)], modality: KdeModality, class_id: usize) -> Result<KDEstimate> {
    let samples = class_pixels(frames, modality, class_id);
    kde_from_samples(&samples, class_id, modality)
}

/// Exact class counts and frequencies.
#[derive(Debug, Clone, Serialize)]
pub struct ClassDistribution {
    pub counts: Vec<usize>,
    pub frequencies: Vec<f32>,
    pub total: usize,
    /// Set when the dataset contained no objects at all.
    pub empty: bool,
}

pub fn class_distribution<'a>(annotations: impl Iterator<Item = &'a AnnotationSet>, num_classes: usize) -> ClassDistribution {
    let mut counts = vec![0usize; num_classes];
    for ann in annotations {
        for obj in &ann.objects {
            counts[obj.class_id - 1] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let frequencies = if total == 0 {
        vec![0.0; num_classes]
    } else {
        counts.iter().map(|&c| c as f32 / total as f32).collect()
    };
    ClassDistribution { counts, frequencies, total, empty: total == 0 }
}

/// Empirical annotation prior: target-count distribution, class frequencies,
/// normalized box-center histogram (feasible-placement coordinates, so a
/// containment-constrained uniform sampler is exactly uniform here), and a
/// box-area histogram.
#[derive(Debug, Clone, Serialize)]
pub struct PriorEstimate {
    /// P(N) over 0..=max observed count, sums to 1.
    pub n_hist: Vec<f32>,
    pub pi_hat: Vec<f32>,
    /// 4x4 grid over normalized center coordinates, row-major counts.
    pub center_hist: Vec<usize>,
    /// 16-bin histogram of box areas, up to the image area.
    pub area_hist: Vec<usize>,
    pub frames: usize,
}

pub const CENTER_GRID: usize = 4;

pub fn estimate_prior<'a>(annotations: impl Iterator<Item = &'a AnnotationSet>, num_classes: usize) -> PriorEstimate {
    let mut n_counts: Vec<usize> = Vec::new();
    let mut class_counts = vec![0usize; num_classes];
    let mut center_hist = vec![0usize; CENTER_GRID * CENTER_GRID];
    let mut area_hist = vec![0usize; 16];
    let mut frames = 0usize;
    for ann in annotations {
        frames += 1;
        let n = ann.objects.len();
        if n_counts.len() <= n {
            n_counts.resize(n + 1, 0);
        }
        n_counts[n] += 1;
        let (iw, ih) = (ann.width as f32, ann.height as f32);
        for obj in &ann.objects {
            class_counts[obj.class_id - 1] += 1;
            let [x, y, w, h] = obj.bbox;
            let u = if iw > w { (x / (iw - w)).clamp(0.0, 1.0) } else { 0.5 };
            let v = if ih > h { (y / (ih - h)).clamp(0.0, 1.0) } else { 0.5 };
            let gu = ((u * CENTER_GRID as f32) as usize).min(CENTER_GRID - 1);
            let gv = ((v * CENTER_GRID as f32) as usize).min(CENTER_GRID - 1);
            center_hist[gv * CENTER_GRID + gu] += 1;
            let area_frac = (w * h) / (iw * ih);
            let bin = ((area_frac * 16.0) as usize).min(15);
            area_hist[bin] += 1;
        }
    }
    let total_frames = frames.max(1) as f32;
    let n_hist = n_counts.iter().map(|&c| c as f32 / total_frames).collect();
    let total_objs: usize = class_counts.iter().sum();
    let pi_hat = if total_objs == 0 {
        vec![0.0; num_classes]
    } else {
        class_counts.iter().map(|&c| c as f32 / total_objs as f32).collect()
    };
    PriorEstimate { n_hist, pi_hat, center_hist, area_hist, frames }
}

/// Pearson chi-square statistic of observed counts against a uniform
/// expectation.
pub fn chi_square_uniform(observed: &[usize]) -> f64 {
    let total: usize = observed.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let expected = total as f64 / observed.len() as f64;
    observed
        .iter()
        .map(|&o| {
            let d = o as f64 - expected;
            d * d / expected
        })
        .sum()
}

/// 5% critical value of chi-square with 15 degrees of freedom (4x4 grid).
pub const CHI2_CRIT_DF15_P05: f64 = 24.996;

//! Procedural chest-radiograph stand-ins. Each class carries an oriented
//! texture signature (normal 0°, pneumonia 90° plus blobs, COVID-19 45° plus
//! a ring); an optional marker glyph on one class reenacts the artifact
//! confound of annotated clinical images.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xens_core::curation::RawLabel;
use xens_core::sampling::rng_from;
use xens_core::tsv::Table;
use xens_core::XensError;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassCounts {
    pub normal: usize,
    pub pneumonia: usize,
    pub covid19: usize,
}

impl ClassCounts {
    pub fn get(&self, label: RawLabel) -> usize {
        match label {
            RawLabel::Normal => self.normal,
            RawLabel::Pneumonia => self.pneumonia,
            RawLabel::Covid19 => self.covid19,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfoundSpec {
    pub class: RawLabel,
    /// Share of that class's images carrying the marker.
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusSpec {
    pub seed: u64,
    /// Square image side in pixels.
    pub size: usize,
    pub counts: ClassCounts,
    /// Scales every class signature; 0 leaves only the shared anatomy.
    pub signal: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Texture cycles across the image width.
    pub frequency: f64,
    pub confound: Option<ConfoundSpec>,
    /// Minimum images per class (two per cross-validation fold).
    pub min_per_class: usize,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec {
            seed: 7,
            size: 96,
            counts: ClassCounts {
                normal: 100,
                pneumonia: 100,
                covid19: 100,
            },
            signal: 1.0,
            noise: 0.05,
            frequency: 6.0,
            confound: None,
            min_per_class: 10,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| XensError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.to_string().trim())))
    }

    pub fn validate(&self) -> CliResult<()> {
        for l in RawLabel::ALL {
            let n = self.counts.get(l);
            if n < self.min_per_class {
                return Err(CliError::Synth(format!(
                    "{l} count {n} is below the minimum of {} per class",
                    self.min_per_class
                )));
            }
        }
        if self.size < 16 {
            return Err(CliError::Synth(format!("image size {} is below 16 pixels", self.size)));
        }
        if let Some(c) = &self.confound {
            if !(0.0..=1.0).contains(&c.fraction) {
                return Err(CliError::Synth(format!("confound fraction {} outside [0, 1]", c.fraction)));
            }
        }
        if !(self.noise >= 0.0 && self.signal >= 0.0) {
            return Err(CliError::Synth("signal and noise must be non-negative".into()));
        }
        Ok(())
    }
}

const PIXEL_STREAM: u64 = 0x5049_58;
const MARKER_STREAM: u64 = 0x4d41_524b;

fn class_code(label: RawLabel) -> u64 {
    match label {
        RawLabel::Normal => 0,
        RawLabel::Pneumonia => 1,
        RawLabel::Covid19 => 2,
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Whether image `index` of `label` carries the marker. Drawn from its own
/// stream so toggling the confound never changes any other pixel.
pub fn has_marker(spec: &SyntheticCorpusSpec, label: RawLabel, index: usize) -> bool {
    match &spec.confound {
        Some(c) if c.class == label => {
            let mut rng = rng_from(&[spec.seed, MARKER_STREAM, class_code(label), index as u64]);
            rng.gen::<f64>() < c.fraction
        }
        _ => false,
    }
}

/// Renders one image; `marker` stamps the confound glyph.
pub fn render_image(spec: &SyntheticCorpusSpec, label: RawLabel, index: usize, marker: bool) -> GrayImage {
    let s = spec.size;
    let mut rng: ChaCha8Rng = rng_from(&[spec.seed, PIXEL_STREAM, class_code(label), index as u64]);
    let brightness = rng.gen_range(-0.05..0.05);
    let base_angle: f64 = match label {
        RawLabel::Normal => 0.0,
        RawLabel::Pneumonia => 90.0,
        RawLabel::Covid19 => 45.0,
    };
    let theta = (base_angle + 5.0 * gaussian(&mut rng)).to_radians();
    let phase = rng.gen_range(0.0..2.0 * PI);
    let amp = 0.12 * spec.signal;

    // pneumonia: consolidation blobs; covid: ground-glass ring
    let blobs: Vec<(f64, f64, f64)> = if label == RawLabel::Pneumonia {
        let n = rng.gen_range(2..=4);
        (0..n)
            .map(|_| {
                let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                (side * rng.gen_range(0.1..0.24), rng.gen_range(-0.2..0.2), rng.gen_range(0.04..0.08))
            })
            .collect()
    } else {
        Vec::new()
    };
    let ring = if label == RawLabel::Covid19 {
        let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        Some((side * rng.gen_range(0.12..0.22), rng.gen_range(-0.15..0.15), rng.gen_range(0.08..0.12)))
    } else {
        None
    };

    let mut pixels = vec![0f64; s * s];
    for y in 0..s {
        for x in 0..s {
            let u = (x as f64 + 0.5) / s as f64 - 0.5;
            let v = (y as f64 + 0.5) / s as f64 - 0.5;
            let body = 1.0 - smoothstep(0.38, 0.46, ((u / 0.95).powi(2) + (v / 1.05).powi(2)).sqrt());
            let lung = |cx: f64| 1.0 - smoothstep(0.85, 1.0, (((u - cx) / 0.14).powi(2) + (v / 0.3).powi(2)).sqrt());
            let lungs = lung(-0.17).max(lung(0.17));
            let mut p = 0.12 + 0.4 * body - 0.22 * lungs + brightness;
            p += amp * body * (2.0 * PI * spec.frequency * (u * theta.cos() + v * theta.sin()) + phase).sin();
            for &(bx, by, r) in &blobs {
                let d2 = (u - bx).powi(2) + (v - by).powi(2);
                p += 0.15 * spec.signal * (-d2 / (2.0 * r * r)).exp();
            }
            if let Some((rx, ry, r)) = ring {
                let d = ((u - rx).powi(2) + (v - ry).powi(2)).sqrt();
                p += 0.15 * spec.signal * (-((d - r) / 0.015).powi(2)).exp();
            }
            pixels[y * s + x] = p;
        }
    }
    for p in &mut pixels {
        *p += spec.noise * gaussian(&mut rng);
    }
    if marker {
        stamp_marker(&mut pixels, s);
    }
    let raw = pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    GrayImage::from_raw(s as u32, s as u32, raw).expect("buffer matches size")
}

/// Bright square frame in the upper left lung field, placed so it survives
/// resizing and cropping.
fn stamp_marker(pixels: &mut [f64], s: usize) {
    let lo = (0.24 * s as f64).round() as usize;
    let hi = (0.38 * s as f64).round() as usize;
    let t = ((0.035 * s as f64).round() as usize).max(1);
    for y in lo..hi {
        for x in lo..hi {
            let edge = x < lo + t || x >= hi - t || y < lo + t || y >= hi - t;
            pixels[y * s + x] = if edge { 1.0 } else { 0.0 };
        }
    }
}

pub fn relative_path(label: RawLabel, index: usize) -> PathBuf {
    PathBuf::from(label.as_str()).join(format!("{label}_{index:04}.png"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TruthEntry {
    pub path: PathBuf,
    pub label: RawLabel,
    pub marker: bool,
}

pub const TRUTH_FILE: &str = "truth.tsv";

/// Writes `<out>/<class>/<class>_NNNN.png` for every image plus `truth.tsv`.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec, out: &Path) -> CliResult<Vec<TruthEntry>> {
    spec.validate()?;
    let mut truth = Vec::new();
    for label in RawLabel::ALL {
        let dir = out.join(label.as_str());
        std::fs::create_dir_all(&dir).map_err(|e| XensError::io(&dir, e))?;
        for i in 0..spec.counts.get(label) {
            let marker = has_marker(spec, label, i);
            let rel = relative_path(label, i);
            let path = out.join(&rel);
            render_image(spec, label, i, marker)
                .save_with_format(&path, image::ImageFormat::Png)
                .map_err(|e| CliError::Synth(format!("writing {}: {e}", path.display())))?;
            truth.push(TruthEntry { path: rel, label, marker });
        }
    }
    let mut t = Table::new(&["path", "label", "marker"]);
    t.push_meta("format", "xens-synth-v1");
    t.push_meta("spec", serde_json::to_string(spec).expect("spec serializes"));
    for e in &truth {
        t.rows.push(vec![e.path.display().to_string(), e.label.to_string(), e.marker.to_string()]);
    }
    t.write(&out.join(TRUTH_FILE))?;
    Ok(truth)
}

/// Source arguments (`<dir>:<label>:<source_id>`) for a generated corpus.
pub fn source_specs(corpus: &Path, source_id: &str) -> Vec<String> {
    RawLabel::ALL
        .iter()
        .map(|l| format!("{}:{l}:{source_id}", corpus.join(l.as_str()).display()))
        .collect()
}

/// Gradient-direction statistics: mean |dx|, |dy|, both diagonal
/// differences, intensity mean, and intensity standard deviation.
pub fn pixel_statistics(img: &GrayImage) -> [f64; 6] {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px = |x: usize, y: usize| img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0;
    let (mut dx, mut dy, mut d1, mut d2, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = px(x, y);
            dx += (px(x + 1, y) - c).abs();
            dy += (px(x, y + 1) - c).abs();
            d1 += (px(x + 1, y + 1) - c).abs();
            d2 += (px(x + 1, y - 1) - c).abs();
            n += 1.0;
        }
    }
    let all: Vec<f64> = img.as_raw().iter().map(|&p| p as f64 / 255.0).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / all.len() as f64;
    [dx / n, dy / n, d1 / n, d2 / n, mean, var.sqrt()]
}

/// Held-out accuracy of a softmax-regression probe on [`pixel_statistics`].
/// Even-indexed images train the probe, odd-indexed images score it.
pub fn probe_accuracy(features: &[[f64; 6]], labels: &[usize], classes: usize) -> f64 {
    let d = 6;
    let train: Vec<usize> = (0..labels.len()).step_by(2).collect();
    let test: Vec<usize> = (1..labels.len()).step_by(2).collect();
    let mut mean = [0.0; 6];
    let mut std = [0.0; 6];
    for j in 0..d {
        mean[j] = train.iter().map(|&i| features[i][j]).sum::<f64>() / train.len() as f64;
        let var = train.iter().map(|&i| (features[i][j] - mean[j]).powi(2)).sum::<f64>() / train.len() as f64;
        std[j] = var.sqrt().max(1e-12);
    }
    let z = |i: usize| -> Vec<f64> { (0..d).map(|j| (features[i][j] - mean[j]) / std[j]).collect() };
    let mut w = vec![vec![0.0; d + 1]; classes];
    let logits = |w: &Vec<Vec<f64>>, x: &[f64]| -> Vec<f64> {
        w.iter().map(|wc| wc[d] + wc[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).collect()
    };
    for _ in 0..2000 {
        let mut grad = vec![vec![0.0; d + 1]; classes];
        for &i in &train {
            let x = z(i);
            let l = logits(&w, &x);
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..classes {
                let g = e[c] / s - if c == labels[i] { 1.0 } else { 0.0 };
                for j in 0..d {
                    grad[c][j] += g * x[j];
                }
                grad[c][d] += g;
            }
        }
        for c in 0..classes {
            for j in 0..=d {
                w[c][j] -= 0.5 * grad[c][j] / train.len() as f64;
            }
        }
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            let l = logits(&w, &z(i));
            let pred = (0..classes).fold(0, |b, c| if l[c] > l[b] { c } else { b });
            pred == labels[i]
        })
        .count();
    correct as f64 / test.len() as f64
}

/// Probe accuracy over an in-memory rendering of the corpus.
pub fn corpus_probe_accuracy(spec: &SyntheticCorpusSpec) -> f64 {
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (c, label) in RawLabel::ALL.iter().enumerate() {
        for i in 0..spec.counts.get(*label) {
            feats.push(pixel_statistics(&render_image(spec, *label, i, has_marker(spec, *label, i))));
            labels.push(c);
        }
    }
    // interleave classes so the parity split is stratified
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| {
        let c = labels[i];
        let within = i - labels.iter().position(|&l| l == c).unwrap();
        (within, c)
    });
    let f: Vec<[f64; 6]> = order.iter().map(|&i| feats[i]).collect();
    let l: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    probe_accuracy(&f, &l, 3)
}

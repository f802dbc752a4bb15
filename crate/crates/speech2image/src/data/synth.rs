//! Synthetic paired image/speech-feature corpus.
//!
//! Images are colored geometric shapes on textured backgrounds; the class is
//! the (shape, color) pair. Each caption is rendered as a pseudo-speech
//! feature sequence: every attribute word owns a characteristic mel band and
//! contributes a multi-frame spectral bump; consecutive word patterns
//! overlap and cross-fade (no hard word boundaries), and the whole sequence
//! carries additive noise.

use super::pngio;
use super::{Manifest, ManifestRecord, Split};
use crate::error::{Error, Result};
use crate::rng::Rng;
use std::path::{Path, PathBuf};

pub const SHAPE_NAMES: [&str; 4] = ["circle", "square", "triangle", "cross"];

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthCorpusConfig {
    /// Total classes; factored as (shapes x colors) with at most 4 shapes.
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    /// Frames contributed by each attribute word before overlap.
    pub frames_per_word: usize,
    pub n_mels: usize,
    /// Standard deviation of the additive feature noise.
    pub noise_level: f64,
    pub captions_per_image: usize,
    /// Fraction of each class assigned to the train split.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        SynthCorpusConfig {
            n_classes: 16,
            samples_per_class: 125,
            image_size: 64,
            frames_per_word: 12,
            n_mels: 40,
            noise_level: 0.25,
            captions_per_image: 1,
            train_fraction: 0.8,
            seed: 7,
        }
    }
}

impl SynthCorpusConfig {
    /// Factor the class count into (n_shapes, n_colors).
    pub fn grid(&self) -> Result<(usize, usize)> {
        for s in (1..=SHAPE_NAMES.len().min(self.n_classes)).rev() {
            if self.n_classes % s == 0 {
                return Ok((s, self.n_classes / s));
            }
        }
        Err(Error::Config(format!(
            "cannot factor {} classes into a shape x color grid",
            self.n_classes
        )))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.samples_per_class == 0 {
            return Err(Error::Config("empty corpus configuration".into()));
        }
        if self.image_size < 16 || !self.image_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "image_size must be a power of two >= 16, got {}",
                self.image_size
            )));
        }
        if self.frames_per_word < 6 {
            return Err(Error::Config("frames_per_word must be at least 6".into()));
        }
        if self.n_mels < 16 {
            return Err(Error::Config("n_mels must be at least 16".into()));
        }
        if !(0.05..=0.95).contains(&self.train_fraction) {
            return Err(Error::Config("train_fraction must be in [0.05, 0.95]".into()));
        }
        if self.captions_per_image == 0 {
            return Err(Error::Config("captions_per_image must be positive".into()));
        }
        self.grid()?;
        Ok(())
    }

    /// Sequence length of every caption: two words, overlapped by a third
    /// of a word to blur the boundary.
    pub fn frames_per_caption(&self) -> usize {
        2 * self.frames_per_word - self.frames_per_word / 3
    }
}

/// Evenly spaced saturated palette entries.
fn color_palette(n: usize) -> Vec<[f32; 3]> {
    (0..n)
        .map(|i| {
            let hue = i as f32 / n as f32 * 6.0;
            let sector = hue.floor() as usize % 6;
            let f = hue - hue.floor();
            let (r, g, b) = match sector {
                0 => (1.0, f, 0.0),
                1 => (1.0 - f, 1.0, 0.0),
                2 => (0.0, 1.0, f),
                3 => (0.0, 1.0 - f, 1.0),
                4 => (f, 0.0, 1.0),
                _ => (1.0, 0.0, 1.0 - f),
            };
            [r, g, b]
        })
        .collect()
}

fn render_image(
    size: usize,
    shape: usize,
    color: [f32; 3],
    rng: &mut Rng,
) -> Vec<u8> {
    let mut img = vec![0f32; size * size * 3];
    // Smooth low-frequency background texture in muted tones.
    let (fx, fy) = (rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0));
    let (px, py) = (rng.uniform(0.0, 6.28), rng.uniform(0.0, 6.28));
    let base = rng.uniform(0.25, 0.45);
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 / size as f64;
            let v = y as f64 / size as f64;
            let tex = base
                + 0.08 * (6.28 * fx * u + px).sin()
                + 0.08 * (6.28 * fy * v + py).sin();
            for c in 0..3 {
                img[(y * size + x) * 3 + c] = tex as f32 + rng.uniform(-0.02, 0.02) as f32;
            }
        }
    }

    // Shape placement with jitter, kept inside the frame.
    let radius = rng.uniform(0.18, 0.30) * size as f64;
    let cx = rng.uniform(0.35, 0.65) * size as f64;
    let cy = rng.uniform(0.35, 0.65) * size as f64;
    let brightness = rng.uniform(0.8, 1.0) as f32;
    let paint = |img: &mut [f32], x: usize, y: usize| {
        for c in 0..3 {
            img[(y * size + x) * 3 + c] = color[c] * brightness;
        }
    };
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let inside = match shape {
                0 => dx * dx + dy * dy <= radius * radius, // circle
                1 => dx.abs() <= radius && dy.abs() <= radius, // square
                2 => {
                    // upward triangle
                    let h = radius * 1.6;
                    let yy = dy + h / 2.0;
                    yy >= 0.0 && yy <= h && dx.abs() <= (yy / h) * radius
                }
                _ => {
                    // cross
                    let arm = radius * 0.45;
                    (dx.abs() <= arm && dy.abs() <= radius)
                        || (dy.abs() <= arm && dx.abs() <= radius)
                }
            };
            if inside {
                paint(&mut img, x, y);
            }
        }
    }
    img.iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Mel band center assigned to each attribute word, spread across the bank.
fn word_band(word: usize, vocab: usize, n_mels: usize) -> f64 {
    let lo = 4.0;
    let hi = n_mels as f64 - 5.0;
    lo + (hi - lo) * word as f64 / (vocab.max(2) - 1) as f64
}

/// Render a caption (sequence of attribute word indices) into overlapping
/// per-word spectral bumps plus noise.
fn render_speech(
    words: &[usize],
    vocab: usize,
    cfg: &SynthCorpusConfig,
    rng: &mut Rng,
) -> Vec<f32> {
    let fpw = cfg.frames_per_word;
    let overlap = fpw / 3;
    let t_total = words.len() * fpw - (words.len() - 1) * overlap;
    let mut feat = vec![0f32; t_total * cfg.n_mels];
    for (wi, &word) in words.iter().enumerate() {
        let start = wi * (fpw - overlap);
        let center = word_band(word, vocab, cfg.n_mels) + rng.uniform(-0.4, 0.4);
        let width = rng.uniform(1.8, 2.6);
        let amp = rng.uniform(1.6, 2.2);
        for dt in 0..fpw {
            // Smooth temporal envelope so adjacent words cross-fade.
            let env = (std::f64::consts::PI * (dt as f64 + 0.5) / fpw as f64).sin();
            for m in 0..cfg.n_mels {
                let d = (m as f64 - center) / width;
                let bump = amp * env * (-0.5 * d * d).exp();
                feat[(start + dt) * cfg.n_mels + m] += bump as f32;
            }
        }
    }
    for v in feat.iter_mut() {
        *v += (rng.normal() * cfg.noise_level) as f32;
    }
    feat
}

/// Generate the corpus under `out_dir`: images/, features/, manifest.tsv.
/// Byte-identical for identical configs.
pub fn synth_corpus(cfg: &SynthCorpusConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let (n_shapes, n_colors) = cfg.grid()?;
    let palette = color_palette(n_colors);
    let vocab = n_shapes + n_colors;
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("features"))?;

    let mut records = Vec::new();
    let mut caption_id: u64 = 0;
    let mut image_id: u64 = 0;
    let train_per_class =
        ((cfg.samples_per_class as f64) * cfg.train_fraction).round() as usize;

    for class in 0..cfg.n_classes {
        let (shape, color) = (class % n_shapes, class / n_shapes);
        for k in 0..cfg.samples_per_class {
            // One independent stream per sample: corpus content does not
            // depend on generation order.
            let mut rng = Rng::seed_from(
                cfg.seed ^ (class as u64).wrapping_mul(0x9E3779B97F4A7C15)
                    ^ (k as u64).wrapping_mul(0xD1B54A32D192ED03),
            );
            let split = if k < train_per_class {
                Split::Train
            } else {
                Split::Test
            };
            let img = render_image(cfg.image_size, shape, palette[color], &mut rng);
            let image_path = PathBuf::from(format!("images/img_{image_id:06}.png"));
            pngio::write_rgb(&out_dir.join(&image_path), cfg.image_size, cfg.image_size, &img)?;

            for _ in 0..cfg.captions_per_image {
                // The two attribute words in caption order; order varies.
                let shape_word = shape;
                let color_word = n_shapes + color;
                let words = if rng.next_f64() < 0.5 {
                    [color_word, shape_word]
                } else {
                    [shape_word, color_word]
                };
                let feat = render_speech(&words, vocab, cfg, &mut rng);
                let t = cfg.frames_per_caption();
                let feat_path = PathBuf::from(format!("features/cap_{caption_id:06}.bin"));
                super::write_feature_file(&out_dir.join(&feat_path), t, cfg.n_mels, &feat)?;
                records.push(ManifestRecord {
                    split,
                    class_id: class,
                    image: image_path.clone(),
                    features: feat_path,
                    caption_id,
                });
                caption_id += 1;
            }
            image_id += 1;
        }
    }

    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

//! Dataset plumbing: manifests, speech-feature files, deterministic
//! batching, and the synthetic corpus generator.
//!
//! A manifest is line-delimited text, one (split, class, image, features,
//! caption) record per line, with paths relative to the manifest directory.
//! Loading validates eagerly: referenced files must exist and parse, and
//! caption ids must be unique within a split.

pub mod audio;
pub mod pngio;
pub mod synth;

use crate::error::{Error, Result};
use crate::speech::SpeechFeatures;
use crate::tensor::Tensor;
use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManifestRecord {
    pub split: Split,
    pub class_id: usize,
    /// Image path, relative to the manifest directory.
    pub image: PathBuf,
    /// Speech-feature path, relative to the manifest directory.
    pub features: PathBuf,
    pub caption_id: u64,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Indices (into `records`) of one split.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn n_classes(&self) -> usize {
        self.records.iter().map(|r| r.class_id + 1).max().unwrap_or(0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.split,
                r.class_id,
                r.image.display(),
                r.features.display(),
                r.caption_id
            ));
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    /// Parse and eagerly validate a manifest.
    pub fn load(path: &Path) -> Result<Manifest> {
        let root = path
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."));
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let mut records = Vec::new();
        let mut seen: HashSet<(Split, u64)> = HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(Error::Data(format!(
                    "{}:{}: expected 5 tab-separated fields, got {}",
                    path.display(),
                    lineno + 1,
                    cols.len()
                )));
            }
            let rec = ManifestRecord {
                split: cols[0].parse()?,
                class_id: cols[1]
                    .parse()
                    .map_err(|_| Error::Data(format!("bad class id '{}'", cols[1])))?,
                image: PathBuf::from(cols[2]),
                features: PathBuf::from(cols[3]),
                caption_id: cols[4]
                    .parse()
                    .map_err(|_| Error::Data(format!("bad caption id '{}'", cols[4])))?,
            };
            if !seen.insert((rec.split, rec.caption_id)) {
                return Err(Error::Data(format!(
                    "duplicate caption id {} in {} split",
                    rec.caption_id, rec.split
                )));
            }
            validate_image_file(&root.join(&rec.image))?;
            validate_feature_file(&root.join(&rec.features))?;
            records.push(rec);
        }
        if records.is_empty() {
            return Err(Error::Data(format!("{} holds no records", path.display())));
        }
        Ok(Manifest { root, records })
    }
}

fn validate_image_file(path: &Path) -> Result<()> {
    let mut sig = [0u8; 8];
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("missing image {}: {e}", path.display())))?
        .read_exact(&mut sig)
        .map_err(|_| Error::Data(format!("{} is not a PNG", path.display())))?;
    if sig != [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a] {
        return Err(Error::Data(format!("{} is not a PNG", path.display())));
    }
    Ok(())
}

fn validate_feature_file(path: &Path) -> Result<()> {
    let meta = std::fs::metadata(path)
        .map_err(|e| Error::Data(format!("missing features {}: {e}", path.display())))?;
    let mut head = [0u8; 8];
    std::fs::File::open(path)?.read_exact(&mut head).map_err(|_| {
        Error::Data(format!("{} truncated feature header", path.display()))
    })?;
    let t = u32::from_le_bytes(head[0..4].try_into().unwrap()) as u64;
    let f = u32::from_le_bytes(head[4..8].try_into().unwrap()) as u64;
    let expect = 8 + t * f * 4;
    if meta.len() != expect {
        return Err(Error::Data(format!(
            "{}: header says {t} x {f} frames ({expect} bytes) but file has {}",
            path.display(),
            meta.len()
        )));
    }
    Ok(())
}

/// Speech-feature record: u32 frame count, u32 mel count, then row-major
/// little-endian f32 frames.
pub fn write_feature_file(path: &Path, t: usize, n_mels: usize, data: &[f32]) -> Result<()> {
    if data.len() != t * n_mels {
        return Err(Error::Contract(format!(
            "feature buffer {} values, expected {t} x {n_mels}",
            data.len()
        )));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut buf = Vec::with_capacity(8 + data.len() * 4);
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(n_mels as u32).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<SpeechFeatures> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(Error::Data(format!("{} truncated", path.display())));
    }
    let t = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + t * f * 4 {
        return Err(Error::Data(format!(
            "{}: payload does not match {t} x {f} header",
            path.display()
        )));
    }
    let frames: Vec<f32> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    SpeechFeatures::new(frames, t, f)
}

/// A loaded minibatch: images in [-1, 1], equal-length feature sequences,
/// labels, and the manifest record indices it was built from.
pub struct Batch {
    pub images: Tensor<f32>,
    pub frames: Tensor<f32>,
    pub class_ids: Vec<usize>,
    pub caption_ids: Vec<u64>,
    pub record_indices: Vec<usize>,
}

/// Deterministic batch plan: groups records by image, shuffles image order
/// as a pure function of (seed, epoch), picks one caption per image by
/// epoch round-robin, chunks to full batches, drops the remainder.
pub fn epoch_batches(
    manifest: &Manifest,
    split: Split,
    batch: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    // Group caption records by image path, first-appearance order.
    let mut groups: Vec<(PathBuf, Vec<usize>)> = Vec::new();
    for (i, rec) in manifest.records.iter().enumerate() {
        if rec.split != split {
            continue;
        }
        match groups.iter_mut().find(|(p, _)| p == &rec.image) {
            Some((_, v)) => v.push(i),
            None => groups.push((rec.image.clone(), vec![i])),
        }
    }
    if groups.is_empty() {
        return Err(Error::Data(format!("split {split} is empty")));
    }
    if batch > groups.len() {
        return Err(Error::Config(format!(
            "batch {batch} exceeds {} images in split {split}",
            groups.len()
        )));
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let mut rng = crate::rng::Rng::seed_from(
        seed ^ epoch.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(0x2545F4914F6CDD1D),
    );
    rng.shuffle(&mut order);

    let picked: Vec<usize> = order
        .into_iter()
        .map(|gi| {
            let captions = &groups[gi].1;
            captions[(epoch as usize) % captions.len()]
        })
        .collect();
    Ok(picked
        .chunks_exact(batch)
        .map(|c| c.to_vec())
        .collect())
}

/// Materialize one batch from manifest record indices.
pub fn load_batch(manifest: &Manifest, indices: &[usize]) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut images = Vec::new();
    let mut frames = Vec::new();
    let mut class_ids = Vec::new();
    let mut caption_ids = Vec::new();
    let mut img_dims: Option<(usize, usize)> = None;
    let mut seq: Option<(usize, usize)> = None;
    for &i in indices {
        let rec = manifest
            .records
            .get(i)
            .ok_or_else(|| Error::Contract(format!("record index {i} out of range")))?;
        let (w, h, rgb) = pngio::read_rgb(&manifest.root.join(&rec.image))?;
        match img_dims {
            None => img_dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(Error::Data(format!(
                    "mixed image sizes in batch: {d:?} vs ({w}, {h})"
                )))
            }
            _ => {}
        }
        images.push(pngio::rgb_to_tensor(w, h, &rgb));
        let f = read_feature_file(&manifest.root.join(&rec.features))?;
        match seq {
            None => seq = Some((f.t, f.n_mels)),
            Some(d) if d != (f.t, f.n_mels) => {
                return Err(Error::Data(format!(
                    "mixed feature shapes in batch: {d:?} vs ({}, {})",
                    f.t, f.n_mels
                )))
            }
            _ => {}
        }
        frames.extend_from_slice(&f.frames);
        class_ids.push(rec.class_id);
        caption_ids.push(rec.caption_id);
    }
    let (w, h) = img_dims.unwrap();
    let (t, m) = seq.unwrap();
    let n = indices.len();
    let mut img_data = Vec::with_capacity(n * 3 * h * w);
    for img in &images {
        img_data.extend_from_slice(&img.to_vec());
    }
    Ok(Batch {
        images: Tensor::from_vec(img_data, &[n, 3, h, w]),
        frames: Tensor::from_vec(frames, &[n, t, m]),
        class_ids,
        caption_ids,
        record_indices: indices.to_vec(),
    })
}

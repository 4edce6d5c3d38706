//! Dataset manifests, sample loading, batching and easy-sample mining.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifestKind {
    Sod,
    Cod,
    Connection,
}

impl ManifestKind {
    pub fn needs_masks(self) -> bool {
        !matches!(self, ManifestKind::Connection)
    }
}

impl fmt::Display for ManifestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ManifestKind::Sod => "sod",
            ManifestKind::Cod => "cod",
            ManifestKind::Connection => "connection",
        })
    }
}

impl FromStr for ManifestKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sod" => Ok(ManifestKind::Sod),
            "cod" => Ok(ManifestKind::Cod),
            "connection" => Ok(ManifestKind::Connection),
            other => Err(Error::argument(format!("unknown manifest kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub kind: ManifestKind,
    pub entries: Vec<Entry>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, kind: ManifestKind, entries: Vec<Entry>) -> Result<Self> {
        let m = Self {
            name: name.into(),
            kind,
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::argument(format!("manifest {} is empty", self.name)));
        }
        let mut seen = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            match (self.kind.needs_masks(), &e.mask) {
                (true, None) => {
                    return Err(Error::argument(format!(
                        "{} entry {i} ({}) has no mask",
                        self.name,
                        e.image.display()
                    )))
                }
                (false, Some(_)) => {
                    return Err(Error::argument(format!(
                        "connection manifest {} entry {i} must not carry a mask",
                        self.name
                    )))
                }
                _ => {}
            }
            if !seen.insert(&e.image) {
                return Err(Error::argument(format!(
                    "duplicate image {} in manifest {}",
                    e.image.display(),
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Reads `image[TAB]mask` lines; relative paths resolve against the manifest's directory.
    pub fn read(path: &Path, kind: ManifestKind) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let mut entries = Vec::new();
        for line in text.lines() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let image = resolve(fields.next().unwrap_or_default());
            let mask = fields.next().filter(|m| !m.is_empty()).map(resolve);
            entries.push(Entry { image, mask });
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| kind.to_string());
        Self::new(name, kind, entries)
    }

    /// Writes the manifest with paths exactly as stored.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.image.to_string_lossy());
            if let Some(m) = &e.mask {
                out.push('\t');
                out.push_str(&m.to_string_lossy());
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Per-channel normalization applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// One decoded sample in channels-first layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `3×H×W`, normalized.
    pub image: Vec<f32>,
    /// `H×W` with values in `{0, 1}`.
    pub mask: Option<Vec<f32>>,
    pub height: usize,
    pub width: usize,
}

impl Sample {
    pub fn flip_horizontal(&mut self) {
        let w = self.width;
        for row in self.image.chunks_mut(w) {
            row.reverse();
        }
        if let Some(m) = &mut self.mask {
            for row in m.chunks_mut(w) {
                row.reverse();
            }
        }
    }
}

/// Whether `path` has an extension of a supported raster format.
pub fn is_raster(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
        .unwrap_or(false)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Nearest-neighbour resize of a single-channel plane (source index `⌊i·in/out⌋`).
pub fn resize_nearest(src: &[f32], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f32> {
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let si = (i * h / oh).min(h - 1);
        for j in 0..ow {
            let sj = (j * w / ow).min(w - 1);
            out.push(src[si * w + sj]);
        }
    }
    out
}

/// Reads an 8-bit-or-wider grayscale raster as values in `[0, 1]`, returning `(pixels, h, w)`.
pub fn read_gray(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = open_image(path)?.to_luma32f();
    let (w, h) = img.dimensions();
    Ok((img.into_raw(), h as usize, w as usize))
}

pub fn load_image(path: &Path, (h, w): (usize, usize), norm: &Normalization) -> Result<Vec<f32>> {
    let img = open_image(path)?.to_rgb32f();
    let img = if img.dimensions() == (w as u32, h as u32) {
        img
    } else {
        image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
    };
    let mut out = vec![0f32; 3 * h * w];
    for (idx, px) in img.pixels().enumerate() {
        for c in 0..3 {
            let v = px.0[c].clamp(0.0, 1.0);
            out[c * h * w + idx] = (v - norm.mean[c]) / norm.std[c];
        }
    }
    Ok(out)
}

pub fn load_mask(path: &Path, target: (usize, usize)) -> Result<Vec<f32>> {
    let (raw, h, w) = read_gray(path)?;
    Ok(resize_nearest(&raw, (h, w), target)
        .into_iter()
        .map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
        .collect())
}

pub fn load_sample(entry: &Entry, target: (usize, usize), norm: &Normalization) -> Result<Sample> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::argument("target size must be positive"));
    }
    Ok(Sample {
        image: load_image(&entry.image, target, norm)?,
        mask: entry.mask.as_deref().map(|m| load_mask(m, target)).transpose()?,
        height: target.0,
        width: target.1,
    })
}

/// Seeded epoch ordering with a resumable cursor.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    len: usize,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

/// Where a [`BatchIterator`] stands, for checkpointing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Position {
    pub epoch: u64,
    pub cursor: usize,
}

impl BatchIterator {
    pub fn new(len: usize, batch_size: usize, shuffle: bool, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::argument("cannot iterate an empty manifest"));
        }
        if batch_size == 0 {
            return Err(Error::argument("batch size must be at least 1"));
        }
        let mut it = Self {
            len,
            batch_size,
            shuffle,
            seed,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
        };
        it.order = it.epoch_order(0);
        Ok(it)
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len).collect();
        if self.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch);
            order.shuffle(&mut rng);
        }
        order
    }

    pub fn position(&self) -> Position {
        Position {
            epoch: self.epoch,
            cursor: self.cursor,
        }
    }

    pub fn seek(&mut self, pos: Position) -> Result<()> {
        if pos.cursor > self.len {
            return Err(Error::argument(format!(
                "cursor {} beyond {} entries",
                pos.cursor, self.len
            )));
        }
        self.epoch = pos.epoch;
        self.cursor = pos.cursor;
        self.order = self.epoch_order(pos.epoch);
        Ok(())
    }

    /// Entry indices of the next batch; an epoch's last batch may be short.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor >= self.len {
            self.epoch += 1;
            self.cursor = 0;
            self.order = self.epoch_order(self.epoch);
        }
        let end = (self.cursor + self.batch_size).min(self.len);
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }
}

/// A stacked batch: images `B×3×H×W`, masks `B×1×H×W`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub images: Tensor,
    pub masks: Option<Tensor>,
}

pub fn stack(samples: &[Sample], ids: Vec<usize>) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::argument("cannot stack an empty batch"))?;
    let (h, w) = (first.height, first.width);
    let b = samples.len();
    let mut images = Vec::with_capacity(b * 3 * h * w);
    for s in samples {
        images.extend_from_slice(&s.image);
    }
    let masks = if samples.iter().all(|s| s.mask.is_some()) {
        let mut m = Vec::with_capacity(b * h * w);
        for s in samples {
            m.extend_from_slice(s.mask.as_ref().expect("checked"));
        }
        Some(Tensor::from_vec(m, (b, 1, h, w), &Device::Cpu)?)
    } else {
        None
    };
    Ok(Batch {
        ids,
        images: Tensor::from_vec(images, (b, 3, h, w), &Device::Cpu)?,
        masks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoaderConfig {
    pub image_size: usize,
    pub batch_size: usize,
    pub shuffle: bool,
    pub flip: bool,
    pub cache: bool,
    pub normalization: Normalization,
}

/// Loads batches in the iterator's order, decoding in parallel.
pub struct DataLoader {
    manifest: DatasetManifest,
    iter: BatchIterator,
    config: LoaderConfig,
    seed: u64,
    cache: HashMap<usize, Sample>,
}

impl DataLoader {
    pub fn new(manifest: DatasetManifest, config: LoaderConfig, seed: u64) -> Result<Self> {
        manifest.validate()?;
        let iter = BatchIterator::new(manifest.len(), config.batch_size, config.shuffle, seed)?;
        Ok(Self {
            manifest,
            iter,
            config,
            seed,
            cache: HashMap::new(),
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn position(&self) -> Position {
        self.iter.position()
    }

    pub fn seek(&mut self, pos: Position) -> Result<()> {
        self.iter.seek(pos)
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let pos = self.iter.position();
        let ids = self.iter.next_indices();
        let size = (self.config.image_size, self.config.image_size);
        let missing: Vec<usize> = ids.iter().copied().filter(|i| !self.cache.contains_key(i)).collect();
        let loaded = missing
            .par_iter()
            .map(|&i| load_sample(&self.manifest.entries[i], size, &self.config.normalization))
            .collect::<Result<Vec<_>>>()?;
        let mut fresh: HashMap<usize, Sample> = missing.into_iter().zip(loaded).collect();
        let mut samples = Vec::with_capacity(ids.len());
        for &i in &ids {
            let s = match fresh.remove(&i) {
                Some(s) => {
                    if self.config.cache {
                        self.cache.insert(i, s.clone());
                    }
                    s
                }
                None => self.cache[&i].clone(),
            };
            samples.push(s);
        }
        if self.config.flip {
            // flips depend only on the seed and the batch position, never on worker timing
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_f11b);
            rng.set_stream(pos.epoch.wrapping_mul(1 << 32).wrapping_add(pos.cursor as u64));
            for s in &mut samples {
                if rng.random_bool(0.5) {
                    s.flip_horizontal();
                }
            }
        }
        stack(&samples, ids)
    }
}

/// Any map from an image batch to saliency probabilities `B×1×H×W`.
pub trait SaliencyModel {
    fn predict(&mut self, images: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    /// `(entry id, mae)` ascending by MAE, ties in manifest order.
    pub scored: Vec<(usize, f64)>,
    pub selected_ids: Vec<usize>,
    pub replaced_ids: Vec<usize>,
    pub seed: u64,
}

impl MiningReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub struct MiningConfig {
    pub count: usize,
    pub seed: u64,
    pub image_size: usize,
    pub batch_size: usize,
    pub normalization: Normalization,
}

/// Scores every COD sample by the model's MAE, then swaps the `count` easiest into
/// seed-chosen positions of the SOD manifest.
pub fn mine_easy_cod_samples(
    cod: &DatasetManifest,
    sod: &DatasetManifest,
    model: &mut dyn SaliencyModel,
    config: &MiningConfig,
) -> Result<(DatasetManifest, MiningReport)> {
    let m = config.count;
    if m > cod.len() || m > sod.len() {
        return Err(Error::argument(format!(
            "cannot mine {m} samples from manifests of size {} (cod) and {} (sod)",
            cod.len(),
            sod.len()
        )));
    }
    if m == 0 {
        let report = MiningReport {
            scored: Vec::new(),
            selected_ids: Vec::new(),
            replaced_ids: Vec::new(),
            seed: config.seed,
        };
        return Ok((sod.clone(), report));
    }

    let size = (config.image_size, config.image_size);
    let mut scored = Vec::with_capacity(cod.len());
    let ids: Vec<usize> = (0..cod.len()).collect();
    for chunk in ids.chunks(config.batch_size.max(1)) {
        let samples = chunk
            .par_iter()
            .map(|&i| load_sample(&cod.entries[i], size, &config.normalization))
            .collect::<Result<Vec<_>>>()?;
        let batch = stack(&samples, chunk.to_vec())?;
        let probs = model.predict(&batch.images)?;
        let probs = probs
            .flatten_from(1)?
            .to_dtype(candle_core::DType::F32)?
            .to_vec2::<f32>()?;
        for ((&id, s), p) in chunk.iter().zip(&samples).zip(&probs) {
            let gt = s.mask.as_ref().expect("validated manifest");
            scored.push((id, crate::metrics::mae(p, gt)?));
        }
    }
    // stable sort keeps manifest order among equal errors
    scored.sort_by(|a, b| a.1.total_cmp(&b.1));
    let selected_ids: Vec<usize> = scored[..m].iter().map(|(id, _)| *id).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut replaced_ids = rand::seq::index::sample(&mut rng, sod.len(), m).into_vec();
    replaced_ids.sort_unstable();

    let mut augmented = sod.clone();
    augmented.name = format!("{}+{}", sod.name, cod.name);
    for (&dst, &src) in replaced_ids.iter().zip(&selected_ids) {
        augmented.entries[dst] = cod.entries[src].clone();
    }
    augmented.validate()?;
    Ok((
        augmented,
        MiningReport {
            scored,
            selected_ids,
            replaced_ids,
            seed: config.seed,
        },
    ))
}

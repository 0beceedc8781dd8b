//! Corpus scanning, patch sampling with augmentation, and on-the-fly
//! degradation into `(LR, HR)` training batches.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;

use crate::degradation::{degrade, DegradationConfig, DegradationMeta};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::SeededRng;
use crate::tensor::FeatureMap;

/// Lossless raster extensions picked up by a scan.
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "tif", "tiff", "bmp"];

// Stream tags keep training, validation and degradation draws independent.
const TRAIN_STREAM: u64 = 0x7472_6169_6e;
const VAL_STREAM: u64 = 0x76_616c;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl ImageRecord {
    pub fn file_name(&self) -> String {
        self.path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    }
}

/// A file that looked like an image but did not decode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanFailure {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    root: PathBuf,
    records: Vec<ImageRecord>,
    failures: Vec<ScanFailure>,
    cache: Vec<Option<Arc<ImageTensor>>>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Scans `<root>/<split>`.
pub fn scan_corpus(root: &Path, split: Split) -> Result<Corpus> {
    scan_dir(&root.join(split.dir_name()))
}

/// Scans every lossless raster directly inside `dir`, in lexicographic order.
pub fn scan_dir(dir: &Path) -> Result<Corpus> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            paths.push(path);
        }
    }
    paths.sort();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for path in paths {
        match ImageTensor::load(&path) {
            Ok(im) => records.push(ImageRecord { path, width: im.width(), height: im.height(), channels: im.channels() }),
            Err(e) => failures.push(ScanFailure { path, reason: e.to_string() }),
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyCorpus(dir.to_path_buf()));
    }
    let cache = vec![None; records.len()];
    Ok(Corpus { root: dir.to_path_buf(), records, failures, cache })
}

impl Corpus {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn failures(&self) -> &[ScanFailure] {
        &self.failures
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Decodes every image once and keeps it in memory.
    pub fn preload(&mut self) -> Result<()> {
        for i in 0..self.records.len() {
            if self.cache[i].is_none() {
                self.cache[i] = Some(Arc::new(ImageTensor::load(&self.records[i].path)?));
            }
        }
        Ok(())
    }

    /// Image `index` converted to `channels` (1 = luminance, 3 = RGB).
    pub fn load(&self, index: usize, channels: usize) -> Result<ImageTensor> {
        let record = self
            .records
            .get(index)
            .ok_or_else(|| Error::invalid(format!("corpus has no image {index}")))?;
        let img = match &self.cache[index] {
            Some(im) => im.as_ref().clone(),
            None => ImageTensor::load(&record.path)?,
        };
        img.with_channels(channels)
    }

    /// Smallest side over all records.
    pub fn min_side(&self) -> usize {
        self.records.iter().map(|r| r.width.min(r.height)).min().unwrap_or(0)
    }

    /// Tab-separated `path width height channels` lines.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.records {
            writeln!(f, "{}\t{}\t{}\t{}", r.path.display(), r.width, r.height, r.channels).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    /// Rebuilds a corpus from a manifest without decoding the images.
    pub fn read_manifest(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |line: &str| Error::Format(format!("{}: malformed manifest line `{line}`", path.display()));
        let mut records = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(bad(line));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(line));
            records.push(ImageRecord {
                path: PathBuf::from(fields[0]),
                width: num(fields[1])?,
                height: num(fields[2])?,
                channels: num(fields[3])?,
            });
        }
        if records.is_empty() {
            return Err(Error::EmptyCorpus(path.to_path_buf()));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let cache = vec![None; records.len()];
        Ok(Self { root, records, failures: Vec::new(), cache })
    }
}

/// Uniformly placed `size×size` window.
pub fn random_crop(hr: &ImageTensor, size: usize, rng: &mut SeededRng) -> Result<ImageTensor> {
    Ok(random_crop_at(hr, size, rng)?.0)
}

fn random_crop_at(hr: &ImageTensor, size: usize, rng: &mut SeededRng) -> Result<(ImageTensor, usize, usize)> {
    let (_, h, w) = hr.shape();
    if size == 0 || h < size || w < size {
        return Err(Error::invalid(format!("cannot crop {size}x{size} from {h}x{w} image")));
    }
    let top = rng.gen_range(0..=h - size);
    let left = rng.gen_range(0..=w - size);
    Ok((hr.crop(top, left, size, size)?, top, left))
}

/// What [`augment`] drew.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentDraw {
    pub flip: bool,
    /// Counter-clockwise quarter turns, 0 when no rotation was drawn.
    pub quarter_turns: u32,
}

impl AugmentDraw {
    pub fn sample(rng: &mut SeededRng) -> Self {
        let flip = rng.gen_bool(0.5);
        let quarter_turns = if rng.gen_bool(0.5) { rng.gen_range(1..=3) } else { 0 };
        Self { flip, quarter_turns }
    }

    pub fn apply(self, hr: &ImageTensor) -> Result<ImageTensor> {
        if self.quarter_turns % 2 == 1 && hr.height() != hr.width() {
            return Err(Error::invalid(format!("cannot rotate non-square {}x{} patch", hr.height(), hr.width())));
        }
        let flipped = if self.flip { hr.flip_horizontal() } else { hr.clone() };
        Ok(flipped.rotate90(self.quarter_turns))
    }
}

/// Horizontal flip with p = 0.5, then a rotation by a random non-zero
/// multiple of 90° with p = 0.5.
pub fn augment(hr: &ImageTensor, rng: &mut SeededRng) -> Result<ImageTensor> {
    AugmentDraw::sample(rng).apply(hr)
}

#[derive(Debug, Clone)]
pub struct PatchPair {
    pub hr: ImageTensor,
    pub lr: ImageTensor,
    pub meta: DegradationMeta,
    pub source: usize,
}

/// A stacked training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub lr: FeatureMap<f32>,
    pub hr: FeatureMap<f32>,
    pub pairs: Vec<PatchPair>,
}

/// Draws batches as a pure function of `(corpus, settings, seed, step)`.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    pub degradation: DegradationConfig,
    pub batch: usize,
    pub patch: usize,
    pub channels: usize,
    pub augment: bool,
    pub seed: u64,
}

impl BatchSampler {
    /// Sample `index` of batch `step`; independent of how many samples
    /// other workers draw.
    pub fn pair(&self, corpus: &Corpus, step: u64, index: usize) -> Result<PatchPair> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus(corpus.root().to_path_buf()));
        }
        let mut rng = SeededRng::derive(self.seed, &[TRAIN_STREAM, step, index as u64]);
        let source = rng.gen_range(0..corpus.len());
        let image = corpus.load(source, self.channels)?;
        let (mut hr, _, _) = random_crop_at(&image, self.patch, &mut rng)?;
        if self.augment {
            hr = augment(&hr, &mut rng)?;
        }
        let (lr, meta) = degrade(&hr, &self.degradation, &mut rng)?;
        Ok(PatchPair { hr, lr, meta, source })
    }

    pub fn sample(&self, corpus: &Corpus, step: u64) -> Result<Batch> {
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        let pairs = (0..self.batch).map(|i| self.pair(corpus, step, i)).collect::<Result<Vec<_>>>()?;
        let lr: Vec<ImageTensor> = pairs.iter().map(|p| p.lr.clone()).collect();
        let hr: Vec<ImageTensor> = pairs.iter().map(|p| p.hr.clone()).collect();
        Ok(Batch { lr: FeatureMap::from_images(&lr)?, hr: FeatureMap::from_images(&hr)?, pairs })
    }
}

/// One RGB batch of `batch` pairs with `patch`-sized HR crops.
pub fn next_batch(corpus: &Corpus, cfg: &DegradationConfig, batch: usize, patch: usize, seed: u64, step: u64) -> Result<Batch> {
    BatchSampler { degradation: cfg.clone(), batch, patch, channels: 3, augment: true, seed }.sample(corpus, step)
}

#[derive(Debug, Clone)]
pub struct ValPair {
    pub name: String,
    pub lr: ImageTensor,
    pub hr: ImageTensor,
    pub meta: DegradationMeta,
}

/// Validation pairs degraded once with a per-image fixed seed.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub pairs: Vec<ValPair>,
    pub degradation: DegradationConfig,
    pub seed: u64,
}

impl ValidationSet {
    /// Center-crops each HR image to at most `crop` pixels per side, trims
    /// it to a multiple of `scale · divisor`, and degrades it.
    pub fn build(corpus: &Corpus, cfg: &DegradationConfig, seed: u64, channels: usize, crop: Option<usize>, divisor: usize) -> Result<Self> {
        let multiple = cfg.scale * divisor.max(1);
        let mut pairs = Vec::with_capacity(corpus.len());
        for (i, record) in corpus.records().iter().enumerate() {
            let image = corpus.load(i, channels)?;
            let (_, h, w) = image.shape();
            let limit = |n: usize| crop.map_or(n, |c| c.min(n)) / multiple * multiple;
            let (ch, cw) = (limit(h), limit(w));
            if ch == 0 || cw == 0 {
                return Err(Error::invalid(format!("{} is smaller than {multiple} pixels", record.file_name())));
            }
            let hr = image.crop((h - ch) / 2, (w - cw) / 2, ch, cw)?;
            let mut rng = SeededRng::derive(seed, &[VAL_STREAM, i as u64]);
            let (lr, meta) = degrade(&hr, cfg, &mut rng)?;
            pairs.push(ValPair { name: record.file_name(), lr, hr, meta });
        }
        Ok(Self { pairs, degradation: cfg.clone(), seed })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

//! Paired dataset ingestion, shadow masks, alpha-composited shadow synthesis,
//! corpus statistics and seeded training batches.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::FsenetConfig;
use crate::error::{Error, Result};
use crate::image::{is_image_path, load_gray, load_image, resize_bilinear, Image};
use crate::tensor::Tensor;

/// Small constant guarding the luminance ratio against division by zero.
pub const RATIO_EPS: f64 = 1e-6;
/// Radius of the disc used by the mask morphology (a 5-pixel-wide disc).
pub const MORPH_RADIUS: isize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Parameter(format!("unknown split {other:?}, expected train or test"))),
        }
    }
}

/// Shadow image, shadow-free target, and an optional binary mask (1 = shadow).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTriplet {
    pub shadow: Image,
    pub target: Image,
    pub mask: Option<Image>,
}

impl SampleTriplet {
    pub fn new(shadow: Image, target: Image, mask: Option<Image>) -> Result<Self> {
        if shadow.dims() != target.dims() {
            return Err(Error::Structure(format!(
                "shadow {:?} and target {:?} differ in size",
                shadow.dims(),
                target.dims()
            )));
        }
        if let Some(m) = &mask {
            if (m.height(), m.width(), m.channels()) != (shadow.height(), shadow.width(), 1) {
                return Err(Error::Structure("mask must be single-channel and match the images".into()));
            }
        }
        Ok(SampleTriplet { shadow, target, mask })
    }

    /// The stored mask, or one extracted from the pair.
    pub fn mask_or_extract(&self, tau: f64) -> Result<Image> {
        match &self.mask {
            Some(m) => Ok(m.clone()),
            None => extract_mask(&self.shadow, &self.target, tau),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub name: String,
    pub input: PathBuf,
    pub target: PathBuf,
    pub mask: Option<PathBuf>,
}

impl Record {
    pub fn load(&self) -> Result<SampleTriplet> {
        let shadow = load_image(&self.input)?;
        let target = load_image(&self.target)?;
        let mask = match &self.mask {
            Some(p) => Some(binarize(&load_gray(p)?)),
            None => None,
        };
        SampleTriplet::new(shadow, target, mask)
    }
}

/// Matched file triples of one split, sorted by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: Split,
    pub records: Vec<Record>,
    /// Names that could not be matched across the sub-directories.
    pub warnings: Vec<String>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || !is_image_path(&path) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Index `root/<split>/{input,target[,mask]}`; files are matched by name
/// without extension.
pub fn scan_dataset(root: impl AsRef<Path>, split: Split) -> Result<DatasetIndex> {
    let root = root.as_ref();
    let base = root.join(split.as_str());
    let (input_dir, target_dir, mask_dir) = (base.join("input"), base.join("target"), base.join("mask"));
    for dir in [&input_dir, &target_dir] {
        if !dir.is_dir() {
            return Err(Error::Dataset(format!("missing directory {}", dir.display())));
        }
    }
    let inputs = list_images(&input_dir)?;
    let targets = list_images(&target_dir)?;
    let masks = if mask_dir.is_dir() {
        Some(list_images(&mask_dir)?)
    } else {
        None
    };
    let names: BTreeSet<&String> = inputs.keys().chain(targets.keys()).collect();
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for name in names {
        match (inputs.get(name), targets.get(name)) {
            (Some(i), Some(t)) => {
                let mask = masks.as_ref().and_then(|m| m.get(name)).cloned();
                if masks.is_some() && mask.is_none() {
                    warnings.push(format!("{name}: no mask, will be extracted"));
                }
                records.push(Record {
                    name: name.clone(),
                    input: i.clone(),
                    target: t.clone(),
                    mask,
                });
            }
            (Some(_), None) => warnings.push(format!("{name}: input without target, skipped")),
            (None, _) => warnings.push(format!("{name}: target without input, skipped")),
        }
    }
    for w in &warnings {
        log::warn!("{}: {w}", base.display());
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        split,
        records,
        warnings,
    })
}

/// Threshold a gray image at 0.5 into {0, 1}.
pub fn binarize(img: &Image) -> Image {
    img.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

fn disc_offsets() -> Vec<(isize, isize)> {
    let r = MORPH_RADIUS;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Binary erosion (`min`) or dilation (`max`) with the disc; pixels outside the
/// image are ignored.
fn morph(img: &Image, dilate: bool) -> Image {
    let (h, w, _) = img.dims();
    let disc = disc_offsets();
    Image::from_fn(h, w, 1, |y, x, _| {
        let mut acc = if dilate { 0.0 } else { 1.0 };
        for &(dy, dx) in &disc {
            let (sy, sx) = (y as isize + dy, x as isize + dx);
            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                continue;
            }
            let v = img.get(sy as usize, sx as usize, 0);
            acc = if dilate { f64::max(acc, v) } else { f64::min(acc, v) };
        }
        acc
    })
}

pub fn erode(img: &Image) -> Image {
    morph(img, false)
}

pub fn dilate(img: &Image) -> Image {
    morph(img, true)
}

/// Mask of pixels whose luminance ratio shadow/target falls below `tau`,
/// cleaned by a morphological opening then closing.
pub fn extract_mask(shadow: &Image, target: &Image, tau: f64) -> Result<Image> {
    if (shadow.height(), shadow.width()) != (target.height(), target.width()) {
        return Err(Error::Structure(format!(
            "shadow {:?} and target {:?} differ in size",
            shadow.dims(),
            target.dims()
        )));
    }
    let ls = shadow.to_rgb().luminance();
    let lt = target.to_rgb().luminance();
    let raw = Image::from_fn(ls.height(), ls.width(), 1, |y, x, _| {
        let r = ls.get(y, x, 0) / lt.get(y, x, 0).max(RATIO_EPS);
        if r < tau {
            1.0
        } else {
            0.0
        }
    });
    let opened = dilate(&erode(&raw));
    Ok(erode(&dilate(&opened)))
}

/// Darken `target` under `mask`: `target * (1 - alpha * mask)`.
pub fn synthesize_shadow(target: &Image, mask: &Image, alpha: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha {alpha} outside [0, 1]")));
    }
    if mask.channels() != 1 || (mask.height(), mask.width()) != (target.height(), target.width()) {
        return Err(Error::Structure(format!(
            "mask {:?} does not match target {:?}",
            mask.dims(),
            target.dims()
        )));
    }
    let plane = target.height() * target.width();
    let m = mask.data();
    let data = target
        .data()
        .iter()
        .enumerate()
        .map(|(i, &t)| t * (1.0 - alpha * m[i % plane]))
        .collect();
    Image::from_planar(target.height(), target.width(), target.channels(), data)
}

/// Draw a compositing strength uniformly from `[lo, hi]`.
pub fn sample_alpha(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub name: String,
    /// Fraction of pixels inside the shadow mask.
    pub fraction: f64,
    /// Whether the mask came from the dataset or was extracted from the pair.
    pub extracted: bool,
}

/// Shadow coverage and resolution statistics of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub count: usize,
    pub coverage: Vec<Coverage>,
    /// Mean and population standard deviation of the coverage, absent when no
    /// mask could be obtained.
    pub coverage_mean: Option<f64>,
    pub coverage_std: Option<f64>,
    /// Count of images per `HxW` resolution.
    pub resolutions: BTreeMap<String, usize>,
    pub errors: Vec<String>,
}

impl CorpusStats {
    pub fn from_coverage(coverage: Vec<Coverage>, resolutions: BTreeMap<String, usize>, errors: Vec<String>) -> Self {
        let fractions: Vec<f64> = coverage.iter().map(|c| c.fraction).collect();
        let ms = mean_std(&fractions);
        CorpusStats {
            count: coverage.len(),
            coverage,
            coverage_mean: ms.map(|m| m.0),
            coverage_std: ms.map(|m| m.1),
            resolutions,
            errors,
        }
    }
}

pub fn mask_fraction(mask: &Image) -> f64 {
    mask.data().iter().sum::<f64>() / mask.data().len() as f64
}

/// Per-image shadow coverage (stored masks, else extracted with `tau`) and resolutions.
pub fn corpus_stats(index: &DatasetIndex, tau: f64) -> CorpusStats {
    let mut coverage = Vec::new();
    let mut resolutions = BTreeMap::new();
    let mut errors = Vec::new();
    for rec in &index.records {
        match rec.load() {
            Ok(s) => {
                *resolutions
                    .entry(format!("{}x{}", s.shadow.height(), s.shadow.width()))
                    .or_insert(0) += 1;
                match s.mask_or_extract(tau) {
                    Ok(m) => coverage.push(Coverage {
                        name: rec.name.clone(),
                        fraction: mask_fraction(&m),
                        extracted: s.mask.is_none(),
                    }),
                    Err(e) => errors.push(format!("{}: {e}", rec.name)),
                }
            }
            Err(e) => errors.push(format!("{}: {e}", rec.name)),
        }
    }
    CorpusStats::from_coverage(coverage, resolutions, errors)
}

/// Random access to training samples.
pub trait SampleSource: Send + Sync {
    fn len(&self) -> usize;
    fn load(&self, index: usize) -> Result<SampleTriplet>;
    fn name(&self, index: usize) -> String;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for DatasetIndex {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn load(&self, index: usize) -> Result<SampleTriplet> {
        self.records[index].load()
    }

    fn name(&self, index: usize) -> String {
        self.records[index].name.clone()
    }
}

/// Samples held in memory.
pub struct InMemory(pub Vec<(String, SampleTriplet)>);

impl SampleSource for InMemory {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn load(&self, index: usize) -> Result<SampleTriplet> {
        Ok(self.0[index].1.clone())
    }

    fn name(&self, index: usize) -> String {
        self.0[index].0.clone()
    }
}

/// Procedural page: tinted paper with rows of dark glyph-like bars.
pub fn synthetic_page(h: usize, w: usize, rng: &mut impl Rng) -> Image {
    let paper = [rng.gen_range(0.85..0.97), rng.gen_range(0.85..0.97), rng.gen_range(0.82..0.95)];
    let ink = rng.gen_range(0.05..0.3);
    let mut img = Image::from_fn(h, w, 3, |_, _, c| paper[c]);
    let line = rng.gen_range(10..18usize);
    let margin = w / 12;
    let mut y = rng.gen_range(4..12usize);
    while y + line < h {
        let mut x = margin;
        let glyph_h = line * 3 / 5;
        while x + 4 < w.saturating_sub(margin) {
            let gw = rng.gen_range(2..7usize);
            if rng.gen_bool(0.8) {
                let top = y + rng.gen_range(0..=line - glyph_h);
                for yy in top..(top + glyph_h).min(h) {
                    for xx in x..(x + gw).min(w) {
                        for c in 0..3 {
                            img.set(yy, xx, c, ink);
                        }
                    }
                }
            }
            x += gw + rng.gen_range(1..4usize);
        }
        y += line + rng.gen_range(2..8usize);
    }
    img
}

/// Binary shadow mask covering the region on one side of a random line,
/// plus a random ellipse.
pub fn synthetic_mask(h: usize, w: usize, rng: &mut impl Rng) -> Image {
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (nx, ny) = (angle.cos(), angle.sin());
    let (cx, cy) = (rng.gen_range(0.2..0.8) * w as f64, rng.gen_range(0.2..0.8) * h as f64);
    let (ex, ey) = (rng.gen_range(0.0..1.0) * w as f64, rng.gen_range(0.0..1.0) * h as f64);
    let (ax, ay) = (rng.gen_range(0.1..0.3) * w as f64, rng.gen_range(0.1..0.3) * h as f64);
    Image::from_fn(h, w, 1, |y, x, _| {
        let (fx, fy) = (x as f64, y as f64);
        let side = (fx - cx) * nx + (fy - cy) * ny < 0.0;
        let blob = ((fx - ex) / ax).powi(2) + ((fy - ey) / ay).powi(2) < 1.0;
        if side || blob {
            1.0
        } else {
            0.0
        }
    })
}

/// `count` synthesized training pairs with masks, fully determined by `seed`.
pub fn synthetic_pairs(count: usize, h: usize, w: usize, seed: u64, alpha_range: [f64; 2]) -> Result<InMemory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let target = synthetic_page(h, w, &mut rng);
        let mask = synthetic_mask(h, w, &mut rng);
        let alpha = sample_alpha(&mut rng, alpha_range);
        let shadow = synthesize_shadow(&target, &mask, alpha)?;
        out.push((format!("synthetic_{i:03}"), SampleTriplet::new(shadow, target, Some(mask))?));
    }
    Ok(InMemory(out))
}

const EPOCH_DOMAIN: u64 = 0x5eed_0e90_c4a1_0001;
const SAMPLE_DOMAIN: u64 = 0x5eed_5a3b_1e00_0002;

/// Generator for `(seed, domain, index)`: the index selects an independent
/// ChaCha stream, so any sample can be regenerated without replaying others.
pub fn derived_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain);
    rng.set_stream(index);
    rng
}

/// Dataset order for one epoch.
pub fn epoch_permutation(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut derived_rng(seed, EPOCH_DOMAIN, epoch));
    order
}

/// Crop, flip and shadow-synthesis policy for training batches.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPolicy {
    pub batch_size: usize,
    pub crop: usize,
    pub flip: bool,
    pub synth_prob: f64,
    pub alpha_range: [f64; 2],
    pub mask_threshold: f64,
    pub seed: u64,
}

impl BatchPolicy {
    pub fn from_config(cfg: &FsenetConfig) -> Self {
        BatchPolicy {
            batch_size: cfg.batch_size,
            crop: cfg.crop_size,
            flip: true,
            synth_prob: cfg.synth_prob,
            alpha_range: cfg.alpha_range,
            mask_threshold: cfg.mask_threshold,
            seed: cfg.seed,
        }
    }
}

/// Where a training crop came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropInfo {
    pub index: usize,
    pub top: usize,
    pub left: usize,
    pub flipped: bool,
    /// Compositing strength when the input was synthesized.
    pub alpha: Option<f64>,
}

/// `N x 3 x crop x crop` inputs and targets plus provenance of each item.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub step: u64,
    pub input: Tensor,
    pub target: Tensor,
    pub items: Vec<CropInfo>,
}

impl Batch {
    pub fn indices(&self) -> Vec<usize> {
        self.items.iter().map(|c| c.index).collect()
    }
}

/// Upscale so that both sides are at least `crop`, keeping the aspect ratio.
fn ensure_min_side(img: &Image, crop: usize) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    if h >= crop && w >= crop {
        return Ok(img.clone());
    }
    let scale = crop as f64 / h.min(w) as f64;
    let nh = ((h as f64 * scale).ceil() as usize).max(crop);
    let nw = ((w as f64 * scale).ceil() as usize).max(crop);
    resize_bilinear(img, nh, nw)
}

/// Prepare one training pair from a sample using `rng` for every random choice.
pub fn augment(sample: &SampleTriplet, policy: &BatchPolicy, index: usize, rng: &mut ChaCha8Rng) -> Result<(Image, Image, CropInfo)> {
    let c = policy.crop;
    let shadow = ensure_min_side(&sample.shadow, c)?;
    let target = ensure_min_side(&sample.target, c)?;
    let (h, w) = (shadow.height(), shadow.width());
    let top = rng.gen_range(0..=h - c);
    let left = rng.gen_range(0..=w - c);
    let flipped = policy.flip && rng.gen_bool(0.5);
    let synth = rng.gen::<f64>() < policy.synth_prob;
    let alpha = sample_alpha(rng, policy.alpha_range);
    let mut input = shadow.crop(top, left, c, c)?;
    let mut tgt = target.crop(top, left, c, c)?;
    let mut info = CropInfo {
        index,
        top,
        left,
        flipped,
        alpha: None,
    };
    if synth {
        let mask = match &sample.mask {
            Some(m) => binarize(&ensure_min_side(m, c)?.crop(top, left, c, c)?),
            None => extract_mask(&input, &tgt, policy.mask_threshold)?,
        };
        input = synthesize_shadow(&tgt, &mask, alpha)?;
        info.alpha = Some(alpha);
    }
    if flipped {
        input = input.flip_horizontal();
        tgt = tgt.flip_horizontal();
    }
    Ok((input, tgt, info))
}

/// The batch consumed at optimizer step `step`. Depends only on the source,
/// the policy and `step`.
pub fn training_batch(source: &dyn SampleSource, policy: &BatchPolicy, step: u64) -> Result<Batch> {
    let n = source.len();
    if n == 0 {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let mut inputs = Vec::with_capacity(policy.batch_size);
    let mut targets = Vec::with_capacity(policy.batch_size);
    let mut items = Vec::with_capacity(policy.batch_size);
    let mut perm_cache: Option<(u64, Vec<usize>)> = None;
    for j in 0..policy.batch_size as u64 {
        let global = step * policy.batch_size as u64 + j;
        let epoch = global / n as u64;
        if perm_cache.as_ref().map(|p| p.0) != Some(epoch) {
            perm_cache = Some((epoch, epoch_permutation(n, policy.seed, epoch)));
        }
        let index = perm_cache.as_ref().expect("cached").1[(global % n as u64) as usize];
        let sample = source.load(index)?;
        let mut rng = derived_rng(policy.seed, SAMPLE_DOMAIN, global);
        let (i, t, info) = augment(&sample, policy, index, &mut rng)?;
        inputs.push(i);
        targets.push(t);
        items.push(info);
    }
    Ok(Batch {
        step,
        input: Tensor::from_images(&inputs),
        target: Tensor::from_images(&targets),
        items,
    })
}

/// Background loader producing the batches for `start .. end` in order through
/// a bounded queue.
pub struct Prefetcher {
    rx: Receiver<Result<Batch>>,
    handle: Option<JoinHandle<()>>,
}

impl Prefetcher {
    pub fn spawn(source: Arc<dyn SampleSource>, policy: BatchPolicy, start: u64, end: u64, depth: usize) -> Self {
        let (tx, rx) = sync_channel(depth.max(1));
        let handle = std::thread::spawn(move || {
            for step in start..end {
                let batch = training_batch(source.as_ref(), &policy, step);
                let failed = batch.is_err();
                if tx.send(batch).is_err() || failed {
                    break;
                }
            }
        });
        Prefetcher {
            rx,
            handle: Some(handle),
        }
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        self.rx
            .recv()
            .map_err(|_| Error::Dataset("batch loader stopped unexpectedly".into()))?
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // unblock the worker, then wait for it
        let (_, dummy) = sync_channel(1);
        drop(std::mem::replace(&mut self.rx, dummy));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

//! CIFAR-10 binary loading, augmentation, seeded batching and synthetic data.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const SIDE: usize = 32;
pub const PLANE: usize = SIDE * SIDE;
pub const IMAGE_LEN: usize = CHANNELS * PLANE;
pub const RECORD_LEN: usize = 1 + IMAGE_LEN;
pub const RECORDS_PER_FILE: usize = 10_000;
pub const FILE_LEN: u64 = (RECORDS_PER_FILE * RECORD_LEN) as u64;
pub const NUM_CLASSES: usize = 10;

pub const TRAIN_FILES: [&str; 5] = ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const TEST_FILE: &str = "test_batch.bin";

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"];

/// One 3x32x32 image stored as its raw bytes (R, G, B planes, row-major).
/// Pixel values are `byte / 255`, so decoding and re-encoding is lossless.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImage {
    pixels: Box<[u8]>,
    label: u8,
}

impl LabeledImage {
    pub fn new(pixels: Vec<u8>, label: usize) -> Result<Self> {
        if pixels.len() != IMAGE_LEN {
            return Err(Error::InvalidShape(format!("image has {} bytes, expected {IMAGE_LEN}", pixels.len())));
        }
        if label >= NUM_CLASSES {
            return Err(Error::LabelOutOfRange { label, classes: NUM_CLASSES });
        }
        Ok(LabeledImage { pixels: pixels.into_boxed_slice(), label: label as u8 })
    }

    /// Quantizes values in [0, 1] (clamped) to bytes.
    pub fn from_unit(values: &[f32], label: usize) -> Result<Self> {
        let bytes = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Self::new(bytes, label)
    }

    pub fn label(&self) -> usize {
        self.label as usize
    }

    pub fn bytes(&self) -> &[u8] {
        &self.pixels
    }

    /// Pixel values in [0, 1], CHW order.
    pub fn to_unit(&self) -> Vec<f32> {
        self.pixels.iter().map(|&b| b as f32 / 255.0).collect()
    }
}

pub fn decode_record(record: &[u8]) -> Result<LabeledImage> {
    if record.len() != RECORD_LEN {
        return Err(Error::InvalidShape(format!("record has {} bytes, expected {RECORD_LEN}", record.len())));
    }
    LabeledImage::new(record[1..].to_vec(), record[0] as usize)
}

pub fn encode_record(img: &LabeledImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(RECORD_LEN);
    out.push(img.label);
    out.extend_from_slice(&img.pixels);
    out
}

/// Reads one batch file of exactly 10,000 records.
pub fn read_batch_file(path: &Path) -> Result<Vec<LabeledImage>> {
    let meta = fs::metadata(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    if meta.len() != FILE_LEN {
        return Err(Error::FileSize { path: path.to_path_buf(), expected: FILE_LEN, actual: meta.len() });
    }
    let bytes = fs::read(path)?;
    bytes
        .chunks_exact(RECORD_LEN)
        .enumerate()
        .map(|(record, r)| {
            if r[0] as usize >= NUM_CLASSES {
                return Err(Error::BadLabel { path: path.to_path_buf(), record, label: r[0] });
            }
            decode_record(r)
        })
        .collect()
}

pub fn write_batch_file(path: &Path, images: &[LabeledImage]) -> Result<()> {
    let mut bytes = Vec::with_capacity(images.len() * RECORD_LEN);
    for img in images {
        bytes.extend_from_slice(&encode_record(img));
    }
    crate::io::write_atomic(path, &bytes)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

/// Loads `data_batch_1..5.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let paths: Vec<PathBuf> = TRAIN_FILES.iter().chain([&TEST_FILE]).map(|f| dir.join(f)).collect();
    // Check every file up front so a bad directory fails before any decoding.
    for p in &paths {
        let meta = fs::metadata(p).map_err(|_| Error::MissingFile(p.clone()))?;
        if meta.len() != FILE_LEN {
            return Err(Error::FileSize { path: p.clone(), expected: FILE_LEN, actual: meta.len() });
        }
    }
    let mut train = Vec::with_capacity(TRAIN_FILES.len() * RECORDS_PER_FILE);
    for p in &paths[..TRAIN_FILES.len()] {
        train.extend(read_batch_file(p)?);
    }
    let test = read_batch_file(&paths[TRAIN_FILES.len()])?;
    Ok(Dataset { train, test })
}

/// Writes a dataset in the standard six-file layout. `train` must hold
/// 50,000 images and `test` 10,000.
pub fn write_cifar10(dir: &Path, data: &Dataset) -> Result<()> {
    let want = (TRAIN_FILES.len() * RECORDS_PER_FILE, RECORDS_PER_FILE);
    if (data.train.len(), data.test.len()) != want {
        return Err(Error::InvalidShape(format!(
            "need {} train and {} test images, got {} and {}",
            want.0,
            want.1,
            data.train.len(),
            data.test.len()
        )));
    }
    for (name, chunk) in TRAIN_FILES.iter().zip(data.train.chunks(RECORDS_PER_FILE)) {
        write_batch_file(&dir.join(name), chunk)?;
    }
    write_batch_file(&dir.join(TEST_FILE), &data.test)
}

pub fn class_counts(data: &[LabeledImage], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for img in data {
        counts[img.label()] += 1;
    }
    counts
}

/// Draws up to `per_class` items of every class without replacement,
/// keeping the original relative order.
pub fn stratified_subset(data: &[LabeledImage], per_class: usize, seed: u64) -> Vec<LabeledImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, img) in data.iter().enumerate() {
        by_class[img.label()].push(i);
    }
    let mut keep: Vec<usize> = Vec::new();
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
        keep.extend(idx.iter().take(per_class));
    }
    keep.sort_unstable();
    keep.into_iter().map(|i| data[i].clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub mean: [f32; CHANNELS],
    pub std: [f32; CHANNELS],
}

impl NormalizationParams {
    pub fn cifar10() -> Self {
        NormalizationParams { mean: [0.4914, 0.4822, 0.4465], std: [0.2023, 0.1994, 0.2010] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::Config(format!("normalization std must be positive, got {:?}", self.std)));
        }
        Ok(())
    }
}

impl Default for NormalizationParams {
    fn default() -> Self {
        Self::cifar10()
    }
}

pub fn normalize(img: &mut [f32], params: &NormalizationParams) {
    for (c, plane) in img.chunks_exact_mut(PLANE).enumerate() {
        let (m, s) = (params.mean[c], params.std[c]);
        plane.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
}

pub fn denormalize(img: &mut [f32], params: &NormalizationParams) {
    for (c, plane) in img.chunks_exact_mut(PLANE).enumerate() {
        let (m, s) = (params.mean[c], params.std[c]);
        plane.iter_mut().for_each(|v| *v = *v * s + m);
    }
}

/// Window at offset (dy, dx) of the image zero-padded by `padding` on each side.
pub fn crop_at(img: &[f32], padding: usize, dy: usize, dx: usize) -> Vec<f32> {
    let mut out = vec![0.0; IMAGE_LEN];
    for c in 0..CHANNELS {
        for y in 0..SIDE {
            let sy = (y + dy) as isize - padding as isize;
            if !(0..SIDE as isize).contains(&sy) {
                continue;
            }
            for x in 0..SIDE {
                let sx = (x + dx) as isize - padding as isize;
                if (0..SIDE as isize).contains(&sx) {
                    out[c * PLANE + y * SIDE + x] = img[c * PLANE + sy as usize * SIDE + sx as usize];
                }
            }
        }
    }
    out
}

/// Random 32x32 crop of the zero-padded image; offsets are uniform on
/// `0..=2*padding` in each axis. Returns the crop and the offsets drawn.
pub fn random_crop(img: &[f32], padding: usize, rng: &mut impl Rng) -> (Vec<f32>, (usize, usize)) {
    let dy = rng.gen_range(0..=2 * padding);
    let dx = rng.gen_range(0..=2 * padding);
    (crop_at(img, padding, dy, dx), (dy, dx))
}

pub fn flip(img: &mut [f32]) {
    img.chunks_exact_mut(SIDE).for_each(|row| row.reverse());
}

/// Flips in place with probability `p`; returns whether it flipped.
pub fn horizontal_flip(img: &mut [f32], p: f64, rng: &mut impl Rng) -> bool {
    let flipped = rng.gen_bool(p.clamp(0.0, 1.0));
    if flipped {
        flip(img);
    }
    flipped
}

pub const CROP_PADDING: usize = 2;
pub const FLIP_PROB: f64 = 0.5;

/// Independent stream for one (seed, epoch, item) triple.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    // splitmix64 finalizer over the folded words
    let mut h = seed;
    for &p in parts {
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD1B5_4A32_D192_ED03));
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

const SHUFFLE_STREAM: u64 = 0;
const AUGMENT_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub shuffle: bool,
    /// Crop + flip before normalizing.
    pub augment: bool,
    pub seed: u64,
    pub epoch: u64,
    pub norm: NormalizationParams,
}

impl BatchPlan {
    pub fn train(batch_size: usize, seed: u64, epoch: u64) -> Self {
        BatchPlan { batch_size, shuffle: true, augment: true, seed, epoch, norm: NormalizationParams::cifar10() }
    }

    /// Fixed order, normalization only; consumes no randomness.
    pub fn eval(batch_size: usize) -> Self {
        BatchPlan { batch_size, shuffle: false, augment: false, seed: 0, epoch: 0, norm: NormalizationParams::cifar10() }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Lazily assembled batches over a fixed (possibly shuffled) order.
pub struct Batches<'a> {
    data: &'a [LabeledImage],
    plan: BatchPlan,
    order: Vec<usize>,
    next: usize,
}

pub fn make_batches<'a>(data: &'a [LabeledImage], plan: &BatchPlan) -> Result<Batches<'a>> {
    if plan.batch_size < 1 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    plan.norm.validate()?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    if plan.shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, &[plan.epoch, SHUFFLE_STREAM]));
        order.shuffle(&mut rng);
    }
    Ok(Batches { data, plan: plan.clone(), order, next: 0 })
}

impl Batches<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.plan.batch_size)
    }

    fn prepare(&self, pos: usize) -> Vec<f32> {
        let img = &self.data[self.order[pos]];
        let mut px = img.to_unit();
        if self.plan.augment {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.plan.seed, &[self.plan.epoch, AUGMENT_STREAM, pos as u64]));
            px = random_crop(&px, CROP_PADDING, &mut rng).0;
            horizontal_flip(&mut px, FLIP_PROB, &mut rng);
        }
        normalize(&mut px, &self.plan.norm);
        px
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let start = self.next * self.plan.batch_size;
        if start >= self.order.len() {
            return None;
        }
        let end = (start + self.plan.batch_size).min(self.order.len());
        self.next += 1;
        // Each item has its own RNG stream, so preparing items in parallel
        // gives the same pixels as a sequential pass.
        let items = par::map_range(end - start, |i| self.prepare(start + i));
        let labels = self.order[start..end].iter().map(|&i| self.data[i].label()).collect();
        let images = Tensor::from_vec(&[end - start, CHANNELS, SIDE, SIDE], items.concat()).expect("batch shape");
        Some(Batch { images, labels })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.num_batches() - self.next;
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}

/// Class-conditional Gaussian blobs: every class has its own per-channel
/// mean drawn from a 3x3x3 grid (levels 0.2 / 0.5 / 0.8), pixel noise sd 0.1.
/// Labels cycle through the classes so every class is present when
/// `n >= num_classes`.
pub fn synthetic_dataset(num_classes: usize, n: usize, rng: &mut impl Rng) -> Result<Vec<LabeledImage>> {
    if !(2..=NUM_CLASSES).contains(&num_classes) {
        return Err(Error::Config(format!("synthetic data supports 2..={NUM_CLASSES} classes, got {num_classes}")));
    }
    let noise = Normal::new(0.0f32, 0.1).expect("valid sd");
    (0..n)
        .map(|i| {
            let label = i % num_classes;
            let means = synthetic_class_means(label);
            let px: Vec<f32> = (0..IMAGE_LEN).map(|j| means[j / PLANE] + noise.sample(rng)).collect();
            LabeledImage::from_unit(&px, label)
        })
        .collect()
}

/// Mean per channel for a synthetic class. Distinct classes differ by at
/// least 0.3 in some channel.
pub fn synthetic_class_means(label: usize) -> [f32; CHANNELS] {
    const LEVELS: [f32; 3] = [0.2, 0.5, 0.8];
    // Step through the grid with stride 7 (coprime to 27) so consecutive
    // classes differ in more than one channel.
    let code = (label * 7 + 13) % 27;
    [LEVELS[code % 3], LEVELS[(code / 3) % 3], LEVELS[code / 9]]
}

//! Seeded synthetic scenes for the four decision-space classes.
//!
//! Every image is `1×1×32×32` with pixels in `[0, 1]`:
//!
//! * background: uniform noise in `[0, 0.1]`;
//! * small: noise plus one to three bright `2×2` blobs (amplitude 0.9–1.0);
//! * large: noise plus one soft-edged disk of radius 8–12 (amplitude 0.4–0.6);
//! * mixed: noise plus one blob and one disk.
//!
//! Layers are added and clipped at 1.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dso::{channel_stats, Region, RegionConfig};
use crate::error::{Error, Result};
use crate::io::{load_tensor, save_tensor};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor4};

pub const IMAGE_SIZE: usize = 32;
pub const NUM_CLASSES: usize = 4;
pub const LABELS_FILE: &str = "labels.csv";

const VALIDATION_STREAM: u64 = 0x7a1d_0000_0000_0001;

/// Seed of the held-out set paired with a training set generated from `seed`.
pub fn validation_seed(seed: u64) -> u64 {
    seed ^ VALIDATION_STREAM
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Class {
    Background = 0,
    Small = 1,
    Large = 2,
    Mixed = 3,
}

impl Class {
    pub const ALL: [Class; NUM_CLASSES] = [Class::Background, Class::Small, Class::Large, Class::Mixed];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Class> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Background => "background",
            Class::Small => "small",
            Class::Large => "large",
            Class::Mixed => "mixed",
        }
    }

    /// The decision-space region this class is built to occupy.
    pub fn region(self) -> Region {
        match self {
            Class::Background => Region::Background,
            Class::Small => Region::Small,
            Class::Large => Region::Large,
            Class::Mixed => Region::Mixed,
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Class {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Ok(i) = s.parse::<usize>() {
            return Class::from_index(i).ok_or_else(|| Error::Domain(format!("class index {i} out of range")));
        }
        Class::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Domain(format!("unknown class '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample<T> {
    /// `(1, 1, 32, 32)`.
    pub image: Tensor4<T>,
    pub label: Class,
}

fn add_blob(img: &mut [f64], rng: &mut ChaCha8Rng) {
    let amp = rng.random_range(0.9..=1.0);
    let top = rng.random_range(0..=IMAGE_SIZE - 2);
    let left = rng.random_range(0..=IMAGE_SIZE - 2);
    for h in top..top + 2 {
        for w in left..left + 2 {
            img[h * IMAGE_SIZE + w] += amp;
        }
    }
}

fn add_disk(img: &mut [f64], rng: &mut ChaCha8Rng) {
    let amp = rng.random_range(0.4..=0.6);
    let radius: f64 = rng.random_range(8.0..=12.0);
    let lo = radius - 0.5;
    let hi = IMAGE_SIZE as f64 - radius - 0.5;
    let cy = rng.random_range(lo..=hi);
    let cx = rng.random_range(lo..=hi);
    for h in 0..IMAGE_SIZE {
        for w in 0..IMAGE_SIZE {
            let dist = ((h as f64 - cy).powi(2) + (w as f64 - cx).powi(2)).sqrt();
            // one-pixel linear falloff across the rim
            let cover = (radius + 0.5 - dist).clamp(0.0, 1.0);
            img[h * IMAGE_SIZE + w] += amp * cover;
        }
    }
}

fn render(label: Class, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img: Vec<f64> = (0..IMAGE_SIZE * IMAGE_SIZE).map(|_| rng.random_range(0.0..=0.1)).collect();
    match label {
        Class::Background => {}
        Class::Small => {
            for _ in 0..rng.random_range(1..=3) {
                add_blob(&mut img, rng);
            }
        }
        Class::Large => add_disk(&mut img, rng),
        Class::Mixed => {
            add_disk(&mut img, rng);
            add_blob(&mut img, rng);
        }
    }
    for v in &mut img {
        *v = v.min(1.0);
    }
    img
}

/// Generates `count` samples whose class counts differ by at most one, in a
/// seeded shuffled order.
pub fn gen_dataset<T: Scalar>(seed: u64, count: usize) -> Result<Vec<SceneSample<T>>> {
    if count < NUM_CLASSES {
        return Err(Error::Domain(format!("dataset needs at least {NUM_CLASSES} samples, got {count}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<Class> = (0..count).map(|i| Class::ALL[i % NUM_CLASSES]).collect();
    labels.shuffle(&mut rng);
    let dims = Dims::new(1, 1, IMAGE_SIZE, IMAGE_SIZE);
    labels
        .into_iter()
        .map(|label| {
            let data = render(label, &mut rng).into_iter().map(T::c).collect();
            Ok(SceneSample { image: Tensor4::new(dims, data)?, label })
        })
        .collect()
}

pub fn class_counts<T>(samples: &[SceneSample<T>]) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for s in samples {
        counts[s.label.index()] += 1;
    }
    counts
}

/// Region of the raw image's single channel under `cfg`.
pub fn raw_region<T: Scalar>(sample: &SceneSample<T>, cfg: &RegionConfig) -> Region {
    let s = channel_stats(&sample.image);
    cfg.classify(s.mu.data()[0], s.d.data()[0], s.phi.data()[0])
}

/// Mean `(mu, d)` of the raw images of each class, indexed by class.
pub fn class_centroids<T: Scalar>(samples: &[SceneSample<T>]) -> [(f64, f64); NUM_CLASSES] {
    let mut sums = [(0.0, 0.0); NUM_CLASSES];
    let counts = class_counts(samples);
    for s in samples {
        let st = channel_stats(&s.image);
        let e = &mut sums[s.label.index()];
        e.0 += st.mu.data()[0].to_f64_lossy();
        e.1 += st.d.data()[0].to_f64_lossy();
    }
    let mut out = [(0.0, 0.0); NUM_CLASSES];
    for i in 0..NUM_CLASSES {
        let n = counts[i].max(1) as f64;
        out[i] = (sums[i].0 / n, sums[i].1 / n);
    }
    out
}

/// Writes one DST1 file per sample plus `labels.csv` (`index,label`, numeric labels).
pub fn save_dataset<T: Scalar>(samples: &[SceneSample<T>], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut labels = String::from("index,label\n");
    for (i, s) in samples.iter().enumerate() {
        save_tensor(&s.image, dir.join(sample_file(i)))?;
        labels.push_str(&format!("{i},{}\n", s.label.index()));
    }
    fs::write(dir.join(LABELS_FILE), labels)?;
    Ok(())
}

pub fn sample_file(index: usize) -> String {
    format!("{index:06}.dst")
}

pub fn load_dataset<T: Scalar>(dir: impl AsRef<Path>) -> Result<Vec<SceneSample<T>>> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(LABELS_FILE))?;
    let mut lines = text.lines();
    let mut offset = 0;
    match lines.next() {
        Some(h) if h.trim() == "index,label" => offset += h.len() + 1,
        _ => return Err(Error::format(0, "labels.csv must start with 'index,label'")),
    }
    let mut out = Vec::new();
    for line in lines {
        if !line.trim().is_empty() {
            let (idx, label) = line
                .split_once(',')
                .ok_or_else(|| Error::format(offset, format!("malformed labels row '{line}'")))?;
            let idx: usize = idx
                .trim()
                .parse()
                .map_err(|_| Error::format(offset, format!("bad index '{idx}'")))?;
            let label: Class = label.trim().parse().map_err(|e: Error| Error::format(offset, e.to_string()))?;
            let image: Tensor4<T> = load_tensor(dir.join(sample_file(idx)))?;
            if image.dims() != Dims::new(1, 1, IMAGE_SIZE, IMAGE_SIZE) {
                return Err(Error::shape("load_dataset", Dims::new(1, 1, IMAGE_SIZE, IMAGE_SIZE), image.dims()));
            }
            out.push(SceneSample { image, label });
        }
        offset += line.len() + 1;
    }
    if out.is_empty() {
        return Err(Error::Domain("dataset directory lists no samples".into()));
    }
    Ok(out)
}

/// Stacks sample images into one `(B, 1, 32, 32)` batch.
pub fn stack_images<T: Scalar>(samples: &[&SceneSample<T>]) -> Result<Tensor4<T>> {
    let mut data = Vec::with_capacity(samples.len() * IMAGE_SIZE * IMAGE_SIZE);
    for s in samples {
        data.extend_from_slice(s.image.data());
    }
    Tensor4::new(Dims::new(samples.len(), 1, IMAGE_SIZE, IMAGE_SIZE), data)
}

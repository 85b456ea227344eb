//! Dataset ingestion and batching: the CIFAR-10 binary layout, a synthetic
//! oriented-grating generator for desk-scale runs, deterministic half-splits,
//! and per-epoch batch index streams.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::{Element, Tensor};

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3×32×32 pixel bytes

/// Images stored as normalized f32 planes in (count, 3, H, W) order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    pub fn count(&self) -> usize {
        self.labels.len()
    }

    fn image_len(&self) -> usize {
        3 * self.height * self.width
    }

    /// Assembles a batch tensor (B, 3, H, W) plus labels. When `augment` is
    /// given, each image gets a random 4-pixel-padded crop and a coin-flip
    /// horizontal mirror first.
    pub fn gather<E: Element>(
        &self,
        indices: &[usize],
        mut augment: Option<&mut ChaCha12Rng>,
    ) -> Result<(Tensor<E>, Vec<usize>)> {
        let il = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * il);
        let mut labels = Vec::with_capacity(indices.len());
        for &idx in indices {
            if idx >= self.count() {
                return Err(Error::Data(format!(
                    "index {idx} out of range for {} examples",
                    self.count()
                )));
            }
            let img = &self.images[idx * il..(idx + 1) * il];
            match augment.as_deref_mut() {
                Some(rng) => data.extend(crop_flip(img, self.height, self.width, rng)),
                None => data.extend_from_slice(img),
            }
            labels.push(self.labels[idx]);
        }
        let tensor = Tensor::from_vec(
            vec![indices.len(), 3, self.height, self.width],
            data.into_iter().map(|v| E::from_f64(v as f64)).collect(),
        )?;
        Ok((tensor, labels))
    }
}

const AUG_PAD: usize = 4;

fn crop_flip(img: &[f32], h: usize, w: usize, rng: &mut ChaCha12Rng) -> Vec<f32> {
    let dy = rng.random_range(0..=2 * AUG_PAD);
    let dx = rng.random_range(0..=2 * AUG_PAD);
    let flip = rng.random::<bool>();
    let mut out = vec![0.0f32; img.len()];
    for c in 0..3 {
        for y in 0..h {
            // source row in the zero-padded image
            let sy = y + dy;
            if sy < AUG_PAD || sy >= h + AUG_PAD {
                continue;
            }
            for x in 0..w {
                let sx = x + dx;
                if sx < AUG_PAD || sx >= w + AUG_PAD {
                    continue;
                }
                let v = img[(c * h + (sy - AUG_PAD)) * w + (sx - AUG_PAD)];
                let tx = if flip { w - 1 - x } else { x };
                out[(c * h + y) * w + tx] = v;
            }
        }
    }
    out
}

/// Parses the binary-version batch files (`data_batch_1.bin` …
/// `data_batch_5.bin`) under `dir`: records of exactly 3073 bytes, one label
/// byte then 3072 pixel bytes in planar R,G,B row-major order. Pixels are
/// scaled to [0,1] and normalized per channel with the given constants.
pub fn read_cifar10(dir: &Path, mean: [f64; 3], std: [f64; 3]) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut any = false;
    for batch in 1..=5 {
        let path = dir.join(format!("data_batch_{batch}.bin"));
        if !path.exists() {
            continue;
        }
        any = true;
        let bytes = fs::read(&path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            let offset = (bytes.len() / CIFAR_RECORD) * CIFAR_RECORD;
            return Err(Error::Data(format!(
                "{}: file size {} is not a multiple of {CIFAR_RECORD}; truncated record starts at byte offset {offset}",
                path.display(),
                bytes.len()
            )));
        }
        for (rec, chunk) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = chunk[0] as usize;
            if label >= 10 {
                return Err(Error::Data(format!(
                    "{}: label {label} out of range at record index {rec}",
                    path.display()
                )));
            }
            labels.push(label);
            for (i, &b) in chunk[1..].iter().enumerate() {
                let c = i / 1024;
                images.push((((b as f64) / 255.0 - mean[c]) / std[c]) as f32);
            }
        }
    }
    if !any {
        return Err(Error::Data(format!(
            "{}: no data_batch_*.bin files found",
            dir.display()
        )));
    }
    Ok(Dataset {
        name: "cifar10".to_string(),
        images,
        labels,
        classes: 10,
        height: 32,
        width: 32,
    })
}

/// Class-conditional oriented gratings plus Gaussian pixel noise. Class k's
/// pattern is a sinusoid at angle π·k/classes, identical across channels, so
/// classes are separable by template matching whenever the noise is small.
pub fn make_synthetic(
    classes: usize,
    resolution: usize,
    count: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Data("synthetic data needs ≥ 2 classes".into()));
    }
    if count < classes {
        return Err(Error::Data(format!(
            "count {count} smaller than class count {classes}"
        )));
    }
    if resolution == 0 {
        return Err(Error::Data("resolution must be ≥ 1".into()));
    }
    let templates: Vec<Vec<f32>> = (0..classes)
        .map(|k| grating(k, classes, resolution))
        .collect();
    let mut rng = stream(seed, "synthetic");
    let gauss = Normal::new(0.0, 1.0).unwrap();
    let mut images = Vec::with_capacity(count * 3 * resolution * resolution);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % classes; // balanced within ±1 by construction
        labels.push(class);
        for _ in 0..3 {
            for &t in &templates[class] {
                images.push(t + (noise * gauss.sample(&mut rng)) as f32);
            }
        }
    }
    Ok(Dataset {
        name: "synthetic".to_string(),
        images,
        labels,
        classes,
        height: resolution,
        width: resolution,
    })
}

/// The noiseless class pattern (one channel plane), exposed so tests can
/// template-match against it.
pub fn grating(class: usize, classes: usize, resolution: usize) -> Vec<f32> {
    let theta = std::f64::consts::PI * class as f64 / classes as f64;
    let freq = 2.0 / resolution as f64; // two cycles across the image
    let (s, c) = theta.sin_cos();
    let mut out = Vec::with_capacity(resolution * resolution);
    for y in 0..resolution {
        for x in 0..resolution {
            let u = x as f64 * c + y as f64 * s;
            out.push((2.0 * std::f64::consts::PI * freq * u).sin() as f32);
        }
    }
    out
}

/// Disjoint equal halves: W trains network weights, A trains architecture
/// parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Half {
    W,
    A,
}

#[derive(Debug, Clone)]
pub struct SplitPlan {
    pub w: Vec<usize>,
    pub a: Vec<usize>,
}

impl SplitPlan {
    pub fn half(&self, half: Half) -> &[usize] {
        match half {
            Half::W => &self.w,
            Half::A => &self.a,
        }
    }
}

/// Randomly permutes indices and cuts the list in half (dropping the last
/// element of an odd-sized set first).
pub fn split_half(count: usize, seed: u64) -> Result<SplitPlan> {
    if count < 2 {
        return Err(Error::Data(format!("cannot split {count} examples into two halves")));
    }
    let even = count - count % 2;
    let mut indices: Vec<usize> = (0..even).collect();
    indices.shuffle(&mut stream(seed, "split"));
    let a = indices.split_off(even / 2);
    Ok(SplitPlan { w: indices, a })
}

/// Batch index stream for one half and one epoch: a fresh deterministic
/// shuffle per epoch seed, cut into full batches (partial tail dropped).
pub fn batches(
    plan: &SplitPlan,
    half: Half,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let indices = plan.half(half);
    if batch_size == 0 {
        return Err(Error::Data("batch size must be ≥ 1".into()));
    }
    if batch_size > indices.len() {
        return Err(Error::Data(format!(
            "batch size {batch_size} exceeds half size {}",
            indices.len()
        )));
    }
    let label = match half {
        Half::W => "batches-w",
        Half::A => "batches-a",
    };
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(&mut stream(epoch_seed, label));
    Ok(shuffled
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect())
}

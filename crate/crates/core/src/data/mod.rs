//! Datasets, augmentation, deterministic batching and label corruption.

mod augment;
pub mod cifar;
mod corrupt;
pub mod mnist;
mod synthetic;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Float, Tensor};
use crate::error::{Error, Result};

pub use augment::{augment_train, normalize, Augmentation, PAD};
pub use corrupt::{corrupt_labels, CorruptionPlan};
pub use synthetic::{synthetic_pair, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel mean and standard deviation of pixel values scaled to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Images stored as bytes `[N, C, H, W]` with integer labels in `[0, M)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub split: Split,
    /// Normalization constants, always those of the training split.
    pub stats: ChannelStats,
}

/// Training and test splits sharing training-split normalization.
#[derive(Debug, Clone)]
pub struct DatasetPair {
    pub train: Dataset,
    pub test: Dataset,
}

impl Dataset {
    /// Builds a dataset and fits statistics on it; use
    /// [`Dataset::with_stats`] to impose another split's constants.
    pub fn new(
        images: Vec<u8>,
        labels: Vec<u8>,
        [channels, height, width]: [usize; 3],
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        if images.len() != n * channels * height * width {
            return Err(Error::InvalidArgument(format!(
                "{} image bytes for {n} samples of {channels}x{height}x{width}",
                images.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y as usize >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut ds = Dataset {
            images,
            labels,
            channels,
            height,
            width,
            classes,
            split,
            stats: ChannelStats {
                mean: vec![0.0; channels],
                std: vec![1.0; channels],
            },
        };
        ds.stats = ds.channel_stats();
        Ok(ds)
    }

    pub fn with_stats(mut self, stats: ChannelStats) -> Self {
        self.stats = stats;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let len = self.image_len();
        &self.images[i * len..(i + 1) * len]
    }

    /// Population mean and standard deviation per channel over this split.
    pub fn channel_stats(&self) -> ChannelStats {
        let plane = self.height * self.width;
        let mut sum = vec![0f64; self.channels];
        let mut sq = vec![0f64; self.channels];
        for img in self.images.chunks(self.image_len()) {
            for (c, px) in img.chunks(plane).enumerate() {
                for &v in px {
                    let v = v as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (self.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt())
            .collect();
        ChannelStats { mean, std }
    }

    /// Samples at `indices`, in that order, keeping this split's statistics.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            classes: self.classes,
            split: self.split,
            stats: self.stats.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y as usize] += 1;
        }
        counts
    }
}

/// Seeded class-balanced subset of `size` samples. Each class contributes
/// `size / M` samples, the first `size % M` classes one more. Returned
/// indices are ascending.
pub fn stratified_subset(ds: &Dataset, size: usize, seed: u64) -> Result<(Dataset, Vec<usize>)> {
    if size == 0 || size > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "subset size {size} must be in 1..={}",
            ds.len()
        )));
    }
    let m = ds.classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y as usize].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(size);
    for (c, members) in by_class.iter_mut().enumerate() {
        let want = size / m + usize::from(c < size % m);
        if members.len() < want {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} samples, subset needs {want}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..want]);
    }
    chosen.sort_unstable();
    let mut subset = ds.select(&chosen);
    subset.stats = subset.channel_stats();
    Ok((subset, chosen))
}

/// Sample order for one epoch: a permutation keyed on `(seed, epoch)`,
/// cut into batches of `batch_size`; the last batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// A batch of normalized images and their labels.
#[derive(Debug, Clone)]
pub struct LabeledBatch<F: Float = f32> {
    pub images: Tensor<F>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

const AUGMENT_SALT: u64 = 0x5eed_a06e_17a7_1000;

/// Random stream for the augmentations of one batch. Depends only on
/// `(seed, epoch, batch)`.
pub fn augmentation_rng(seed: u64, epoch: usize, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ AUGMENT_SALT);
    rng.set_stream(((epoch as u64) << 32) | batch as u64);
    rng
}

/// Assembles a batch; augments when `rng` is given, otherwise only
/// normalizes.
pub fn make_batch<F: Float>(
    ds: &Dataset,
    indices: &[usize],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<LabeledBatch<F>> {
    let dims = [ds.channels, ds.height, ds.width];
    let mut values = Vec::with_capacity(indices.len() * ds.image_len());
    for &i in indices {
        let img = ds.image(i);
        match rng.as_deref_mut() {
            Some(r) => values.extend(augment_train::<F, _>(img, dims, r, &ds.stats)),
            None => values.extend(normalize::<F>(img, dims, &ds.stats)),
        }
    }
    Ok(LabeledBatch {
        images: Tensor::new(&[indices.len(), ds.channels, ds.height, ds.width], values)?,
        labels: indices.iter().map(|&i| ds.labels[i] as usize).collect(),
        indices: indices.to_vec(),
    })
}

/// Iterator over the batches of one epoch.
pub struct BatchIter<'a, F: Float = f32> {
    ds: &'a Dataset,
    batches: std::vec::IntoIter<Vec<usize>>,
    seed: u64,
    epoch: usize,
    next: usize,
    augment: bool,
    _marker: std::marker::PhantomData<F>,
}

impl<'a, F: Float> BatchIter<'a, F> {
    pub fn new(ds: &'a Dataset, batch_size: usize, seed: u64, epoch: usize, augment: bool) -> Result<Self> {
        Ok(BatchIter {
            ds,
            batches: epoch_batches(ds.len(), batch_size, seed, epoch)?.into_iter(),
            seed,
            epoch,
            next: 0,
            augment,
            _marker: std::marker::PhantomData,
        })
    }
}

impl<F: Float> Iterator for BatchIter<'_, F> {
    type Item = Result<LabeledBatch<F>>;

    fn next(&mut self) -> Option<Self::Item> {
        let indices = self.batches.next()?;
        let b = self.next;
        self.next += 1;
        let mut rng = self.augment.then(|| augmentation_rng(self.seed, self.epoch, b));
        Some(make_batch(self.ds, &indices, rng.as_mut()))
    }
}

/// In-order, unaugmented batches (evaluation).
pub fn eval_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

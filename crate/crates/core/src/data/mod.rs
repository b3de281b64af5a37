//! Datasets, loaders and the synthetic shift task.

mod idx;
mod pgm;
mod synth;

use rand::seq::SliceRandom;

pub use idx::{load_idx, write_idx, IdxSplit, IMAGE_MAGIC, LABEL_MAGIC};
pub use pgm::{load_manifest, parse_pgm, write_pgm, Pgm};
pub use synth::{make_shift_task, render, Domain, SHAPES, SHIFT_CHANNELS, SHIFT_IMAGE_SIZE};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{derive_rng, Scalar, Tensor};
use crate::vit::patchify;

/// Raw `u8` images (`[C, H, W]` each, concatenated) with class labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub images: Vec<u8>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// New split holding the examples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Split {
        let per = self.images.len() / self.len().max(1);
        let mut out = Split::default();
        for &i in indices {
            out.images.extend_from_slice(&self.images[i * per..(i + 1) * per]);
            out.labels.push(self.labels[i]);
        }
        out
    }

    /// Concatenation of `self` then `other`.
    pub fn merged(&self, other: &Split) -> Split {
        let mut out = self.clone();
        out.images.extend_from_slice(&other.images);
        out.labels.extend_from_slice(&other.labels);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub channels: usize,
    pub image_size: usize,
    pub class_names: Vec<String>,
    pub train: Split,
    pub val: Option<Split>,
    pub test: Option<Split>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn validate(&self) -> Result<()> {
        let splits = [Some(("train", &self.train)), self.val.as_ref().map(|s| ("val", s)), self.test.as_ref().map(|s| ("test", s))];
        for (name, s) in splits.into_iter().flatten() {
            if s.images.len() != s.len() * self.pixels() {
                return Err(Error::Data(format!(
                    "{} split {name}: {} pixels for {} images of {} values",
                    self.name,
                    s.images.len(),
                    s.len(),
                    self.pixels()
                )));
            }
            if let Some(&l) = s.labels.iter().find(|&&l| l >= self.num_classes()) {
                return Err(Error::Data(format!(
                    "{} split {name}: label {l} with {} classes",
                    self.name,
                    self.num_classes()
                )));
            }
        }
        Ok(())
    }

    /// Checks that images fit a model's input geometry.
    pub fn check_model(&self, config: &ModelConfig) -> Result<()> {
        if self.channels != config.channels || self.image_size != config.image_size {
            return Err(Error::Config(format!(
                "dataset {} has {}×{}×{} images, model expects {}×{}×{}",
                self.name,
                self.channels,
                self.image_size,
                self.image_size,
                config.channels,
                config.image_size,
                config.image_size
            )));
        }
        Ok(())
    }

    /// Resizes every split to `size × size` by nearest neighbour.
    pub fn resized(&self, size: usize) -> Dataset {
        if size == self.image_size {
            return self.clone();
        }
        let (c, h) = (self.channels, self.image_size);
        let resize = |s: &Split| Split {
            images: s
                .images
                .chunks_exact(self.pixels().max(1))
                .flat_map(|img| resize_nearest(img, c, h, h, size))
                .collect(),
            labels: s.labels.clone(),
        };
        Dataset {
            image_size: size,
            train: resize(&self.train),
            val: self.val.as_ref().map(resize),
            test: self.test.as_ref().map(resize),
            ..self.clone()
        }
    }
}

/// Nearest-neighbour resize of one `[C, H, W]` image to `[C, size, size]`.
pub fn resize_nearest(img: &[u8], channels: usize, height: usize, width: usize, size: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(channels * size * size);
    for c in 0..channels {
        for y in 0..size {
            let sy = (y * height) / size;
            for x in 0..size {
                let sx = (x * width) / size;
                out.push(img[c * height * width + sy * width + sx]);
            }
        }
    }
    out
}

/// Stratified 80/20 split indices, deterministic in `seed`.
///
/// The validation size is `round(n / 5)`, shared out over classes by
/// largest remainder (ties to the lower class id). A class with a single
/// example keeps it in training.
pub fn split_indices_800_200(labels: &[usize], seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = labels.len();
    if n < 2 {
        return Err(Error::Data(format!("cannot split {n} examples, need at least 2")));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let eligible: usize = members.iter().filter(|m| m.len() >= 2).map(Vec::len).sum();
    let total_val = ((n as f64) / 5.0).round() as usize;
    let total_val = total_val.min(eligible.saturating_sub(members.iter().filter(|m| m.len() >= 2).count()));
    let mut quota: Vec<usize> = vec![0; classes];
    let mut remainders = Vec::new();
    for (c, m) in members.iter().enumerate() {
        if m.len() < 2 {
            continue;
        }
        let exact = total_val as f64 * m.len() as f64 / eligible as f64;
        quota[c] = (exact.floor() as usize).min(m.len() - 1);
        remainders.push((exact - exact.floor(), c));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = total_val - quota.iter().sum::<usize>();
    while left > 0 {
        for &(_, c) in &remainders {
            if left > 0 && quota[c] < members[c].len() - 1 {
                quota[c] += 1;
                left -= 1;
            }
        }
    }
    let mut rng = derive_rng(seed, "split-800-200");
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (c, m) in members.iter_mut().enumerate() {
        m.shuffle(&mut rng);
        val.extend_from_slice(&m[..quota[c]]);
        train.extend_from_slice(&m[quota[c]..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Splits a training set into `(train', val)` with [`split_indices_800_200`].
pub fn split_800_200(split: &Split, seed: u64) -> Result<(Split, Split)> {
    let (t, v) = split_indices_800_200(&split.labels, seed)?;
    Ok((split.select(&t), split.select(&v)))
}

/// Per-channel mean and standard deviation over pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn fit(split: &Split, channels: usize) -> Result<Self> {
        if split.is_empty() {
            return Err(Error::Data("cannot fit normalization on an empty split".into()));
        }
        let plane = split.images.len() / (split.len() * channels);
        let mut sum = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        for img in split.images.chunks_exact(channels * plane) {
            for c in 0..channels {
                for &p in &img[c * plane..(c + 1) * plane] {
                    let v = p as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (split.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt().max(1e-3))
            .collect();
        Ok(Normalization { mean, std })
    }

    pub fn apply<T: Scalar>(&self, split: &Split) -> Samples<T> {
        let channels = self.mean.len();
        let pixels = split.images.len() / split.len().max(1);
        let plane = pixels / channels.max(1);
        let images = split
            .images
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let c = (i % pixels) / plane;
                T::of((p as f64 / 255.0 - self.mean[c]) / self.std[c])
            })
            .collect();
        Samples {
            images,
            labels: split.labels.clone(),
            pixels,
        }
    }
}

/// Normalized images ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples<T> {
    pub images: Vec<T>,
    pub labels: Vec<usize>,
    pub pixels: usize,
}

/// Patches and labels for one optimisation or evaluation step.
#[derive(Debug, Clone)]
pub struct Batch<T: Scalar> {
    pub patches: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Samples<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, config: &ModelConfig, indices: &[usize]) -> Result<Batch<T>> {
        let mut images = Vec::with_capacity(indices.len() * self.pixels);
        for &i in indices {
            images.extend_from_slice(&self.images[i * self.pixels..(i + 1) * self.pixels]);
        }
        Ok(Batch {
            patches: patchify(config, &images, indices.len())?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Consecutive batches in storage order.
    pub fn batches(&self, config: &ModelConfig, batch_size: usize) -> Result<Vec<Batch<T>>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(|c| self.batch(config, c)).collect()
    }
}

/// Train/val/test samples after normalization fit on the training split.
#[derive(Debug, Clone)]
pub struct Prepared<T> {
    pub train: Samples<T>,
    pub val: Option<Samples<T>>,
    pub test: Option<Samples<T>>,
    pub norm: Normalization,
    pub num_classes: usize,
}

impl<T: Scalar> Prepared<T> {
    pub fn new(ds: &Dataset) -> Result<Self> {
        ds.validate()?;
        let norm = Normalization::fit(&ds.train, ds.channels)?;
        Ok(Prepared {
            train: norm.apply(&ds.train),
            val: ds.val.as_ref().map(|s| norm.apply(s)),
            test: ds.test.as_ref().map(|s| norm.apply(s)),
            norm,
            num_classes: ds.num_classes(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(counts: &[usize]) -> Vec<usize> {
        counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect()
    }

    #[test]
    fn thousand_examples_split_800_200() {
        let (t, v) = split_indices_800_200(&labels(&[500, 300, 200]), 0).unwrap();
        assert_eq!((t.len(), v.len()), (800, 200));
    }

    #[test]
    fn small_balanced_split_is_stratified() {
        let l = labels(&[5, 5]);
        let (t, v) = split_indices_800_200(&l, 3).unwrap();
        assert_eq!((t.len(), v.len()), (8, 2));
        assert_eq!(v.iter().filter(|&&i| l[i] == 0).count(), 1);
    }

    #[test]
    fn singleton_class_stays_in_train() {
        let l = labels(&[1, 9]);
        let (t, v) = split_indices_800_200(&l, 0).unwrap();
        assert!(t.contains(&0));
        assert_eq!(v.len(), 2);
        assert!(split_indices_800_200(&[0], 0).is_err());
    }

    #[test]
    fn split_is_seed_deterministic() {
        let l = labels(&[7, 13, 4]);
        assert_eq!(split_indices_800_200(&l, 11).unwrap(), split_indices_800_200(&l, 11).unwrap());
    }

    #[test]
    fn normalization_centres_train_split() {
        let (_, t) = make_shift_task(2, 3, 10);
        let norm = Normalization::fit(&t.train, 3).unwrap();
        let s: Samples<f64> = norm.apply(&t.train);
        let plane = 256;
        for c in 0..3 {
            let vals: Vec<f64> = s
                .images
                .chunks(768)
                .flat_map(|img| img[c * plane..(c + 1) * plane].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 0.1, "channel {c} mean {mean}");
        }
    }

    #[test]
    fn nearest_resize_doubles_pixels() {
        assert_eq!(resize_nearest(&[1, 2, 3, 4], 1, 2, 2, 4), vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]);
    }

    proptest! {
        #[test]
        fn splits_are_disjoint_and_cover(counts in proptest::collection::vec(1usize..20, 1..6), seed in any::<u64>()) {
            let l = labels(&counts);
            prop_assume!(l.len() >= 2);
            let (t, v) = split_indices_800_200(&l, seed).unwrap();
            let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..l.len()).collect::<Vec<_>>());
        }
    }
}

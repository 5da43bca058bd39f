//! Datasets with permanent global example ids, and seeded epoch batching.
//!
//! A row's index in [`Dataset`] is its global id for the lifetime of a run.
//! Batching reshuffles rows every epoch but the ids travel with them, which
//! is what lets the SAF record buffer line up outputs across epochs.

mod idx;

pub use idx::{load_idx, parse_idx_images, parse_idx_labels};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Array;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Array,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(features: Array, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "features {:?} vs {} labels",
                features.shape(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Contract(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        Ok(Self {
            features,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn features(&self) -> &Array {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Global ids, `0..n`.
    pub fn ids(&self) -> std::ops::Range<usize> {
        0..self.len()
    }

    /// Gathers the given rows into a batch.
    pub fn select(&self, ids: &[usize], epoch: usize, iteration: usize) -> Batch {
        let d = self.dim();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(self.features.row(id));
        }
        Batch {
            features: Array::new(vec![ids.len(), d], data).expect("ids are in range"),
            labels: ids.iter().map(|&id| self.labels[id]).collect(),
            ids: ids.to_vec(),
            epoch,
            iteration,
        }
    }

    /// The whole dataset as one batch, in id order.
    pub fn as_batch(&self) -> Batch {
        Batch {
            features: self.features.clone(),
            labels: self.labels.clone(),
            ids: self.ids().collect(),
            epoch: 0,
            iteration: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Array,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
    pub epoch: usize,
    pub iteration: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn class_means(classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut gaussian =
        |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(rng)).collect() };
    if classes <= dim {
        // centred simplex vertices, unit norm, pushed through a random
        // orthonormal frame
        let mut frame: Vec<Vec<f64>> = Vec::with_capacity(classes);
        while frame.len() < classes {
            let mut v = gaussian(dim);
            for u in &frame {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-8 {
                frame.push(v.into_iter().map(|a| a / n).collect());
            }
        }
        let k = classes as f64;
        let scale = 1.0 / (1.0 - 1.0 / k).sqrt();
        (0..classes)
            .map(|c| {
                let mut m = vec![0.0; dim];
                for (j, u) in frame.iter().enumerate() {
                    let coef = if j == c { 1.0 - 1.0 / k } else { -1.0 / k };
                    m.iter_mut()
                        .zip(u)
                        .for_each(|(a, b)| *a += scale * coef * b);
                }
                m
            })
            .collect()
    } else {
        // more classes than dimensions: evenly spaced on a circle in a
        // random plane
        let a = gaussian(dim);
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let a: Vec<f64> = a.iter().map(|x| x / na).collect();
        let mut b = vec![0.0; dim];
        if dim >= 2 {
            let mut v = gaussian(dim);
            let d: f64 = v.iter().zip(&a).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(&a).for_each(|(x, y)| *x -= d * y);
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            b = v.iter().map(|x| x / nv).collect();
        }
        (0..classes)
            .map(|c| {
                let t = std::f64::consts::TAU * c as f64 / classes as f64;
                a.iter()
                    .zip(&b)
                    .map(|(x, y)| t.cos() * x + t.sin() * y)
                    .collect()
            })
            .collect()
    }
}

/// Gaussian blobs around unit-norm class means. Train and test share the
/// means and draw independent noise from one seeded stream.
pub fn generate_blob_splits(
    train_per_class: usize,
    test_per_class: usize,
    classes: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if classes < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if dim == 0 {
        return Err(Error::Contract("blob dimension must be positive".into()));
    }
    if train_per_class == 0 || test_per_class == 0 {
        return Err(Error::Contract(
            "need at least one example per class in each split".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = class_means(classes, dim, &mut rng);
    let train = draw_blobs(&means, train_per_class, spread, Split::Train, &mut rng)?;
    let test = draw_blobs(&means, test_per_class, spread, Split::Test, &mut rng)?;
    Ok((train, test))
}

fn draw_blobs(
    means: &[Vec<f64>],
    per_class: usize,
    spread: f64,
    split: Split,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let (classes, dim) = (means.len(), means[0].len());
    let n = per_class * classes;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for &m in &means[c] {
            let z: f64 = StandardNormal.sample(rng);
            data.push(m + spread * z);
        }
        labels.push(c);
    }
    Dataset::new(Array::new(vec![n, dim], data)?, labels, classes, split)
}

/// Training half of [`generate_blob_splits`] alone.
pub fn generate_blobs(
    per_class: usize,
    classes: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if dim == 0 {
        return Err(Error::Contract("blob dimension must be positive".into()));
    }
    if per_class == 0 {
        return Err(Error::Contract(
            "need at least one example per class".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = class_means(classes, dim, &mut rng);
    draw_blobs(&means, per_class, spread, Split::Train, &mut rng)
}

/// Seeded permutation for `(seed, epoch)`. Depends on nothing else.
pub fn epoch_permutation(n: usize, epoch: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Partitions one epoch into batches; the last batch may be short.
pub fn make_epoch_batches(
    dataset: &Dataset,
    batch_size: usize,
    epoch: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let order = epoch_permutation(dataset.len(), epoch, seed);
    Ok(order
        .chunks(batch_size)
        .enumerate()
        .map(|(t, ids)| dataset.select(ids, epoch, t + 1))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_counts_and_ids() {
        let d = generate_blobs(100, 2, 3, 0.5, 1).unwrap();
        assert_eq!(d.len(), 200);
        assert_eq!(d.ids(), 0..200);
        assert_eq!(d.labels().iter().filter(|&&y| y == 1).count(), 100);
    }

    #[test]
    fn zero_spread_collapses_to_means() {
        let d = generate_blobs(5, 3, 4, 0.0, 9).unwrap();
        for i in 0..d.len() {
            let first = d.features().row(d.labels()[i]);
            assert_eq!(d.features().row(i), first);
        }
        // centred simplex: unit-norm, pairwise equidistant
        let m: Vec<&[f64]> = (0..3).map(|c| d.features().row(c)).collect();
        for v in &m {
            assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let dist =
            |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        assert!((dist(m[0], m[1]) - dist(m[1], m[2])).abs() < 1e-12);
    }

    #[test]
    fn blobs_are_deterministic() {
        let a = generate_blobs(20, 4, 2, 1.0, 42).unwrap();
        assert_eq!(a, generate_blobs(20, 4, 2, 1.0, 42).unwrap());
        assert_ne!(a, generate_blobs(20, 4, 2, 1.0, 43).unwrap());
    }

    #[test]
    fn train_split_matches_standalone_generator() {
        let (train, test) = generate_blob_splits(10, 7, 2, 3, 0.4, 5).unwrap();
        assert_eq!(train, generate_blobs(10, 2, 3, 0.4, 5).unwrap());
        assert_eq!(test.len(), 14);
        assert_eq!(test.split(), Split::Test);
    }

    #[test]
    fn batches_partition_the_epoch() {
        let d = generate_blobs(5, 2, 2, 1.0, 0).unwrap();
        let batches = make_epoch_batches(&d, 4, 1, 7).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Batch::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut ids: Vec<usize> = batches.iter().flat_map(|b| b.ids.clone()).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
        for b in &batches {
            for (k, &id) in b.ids.iter().enumerate() {
                assert_eq!(b.labels[k], d.labels()[id]);
                assert_eq!(&b.features.data()[k * 2..k * 2 + 2], d.features().row(id));
            }
        }
    }

    #[test]
    fn permutation_depends_on_epoch_and_seed_only() {
        let a = epoch_permutation(50, 3, 1);
        assert_eq!(a, epoch_permutation(50, 3, 1));
        assert_ne!(a, epoch_permutation(50, 4, 1));
        assert_ne!(a, epoch_permutation(50, 3, 2));
        let mut b = epoch_permutation(50, 4, 1);
        b.sort_unstable();
        assert_eq!(b, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn zero_batch_size_rejected() {
        let d = generate_blobs(2, 2, 2, 1.0, 0).unwrap();
        assert!(make_epoch_batches(&d, 0, 1, 0).is_err());
    }
}

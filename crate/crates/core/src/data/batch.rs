use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::parallel;
use crate::tensor::Tensor;

use super::augment::{augment, AugmentConfig};
use super::{derive_seed, Sample};

/// Stacked samples: frames `(n, 3, H, W)` and labels `(n, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Positions of the samples in the source slice.
    pub indices: Vec<usize>,
    pub ids: Vec<String>,
    pub frames: Tensor<f32>,
    pub labels: LabelMap,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Visiting order for one epoch: identity without a seed, otherwise a
/// seeded shuffle.
pub fn epoch_order(n: usize, shuffle_seed: Option<u64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

/// Iterator over the batches of one epoch. The last batch may be short.
pub struct Batches<'a> {
    samples: &'a [Sample],
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
    augment: Option<(&'a AugmentConfig, u64)>,
}

/// Batches over `samples`. With `augment = Some((cfg, seed))` each sample is
/// augmented with a seed derived from `seed` and its position in `samples`,
/// so the result does not depend on batch composition or thread count.
pub fn batches<'a>(
    samples: &'a [Sample],
    batch_size: usize,
    shuffle_seed: Option<u64>,
    augment: Option<(&'a AugmentConfig, u64)>,
) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if let Some(first) = samples.first() {
        let shape = first.frames.shape();
        if let Some(bad) = samples.iter().find(|s| s.frames.shape() != shape) {
            return Err(Error::Data(format!("sample {} has shape {}, expected {}", bad.id, bad.frames.shape(), shape)));
        }
    }
    Ok(Batches { samples, order: epoch_order(samples.len(), shuffle_seed), batch_size, next: 0, augment })
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let indices = self.order[self.next..end].to_vec();
        self.next = end;
        let prepared: Vec<Sample> = match self.augment {
            Some((cfg, seed)) => {
                let samples = self.samples;
                parallel::map_indexed(indices.len(), |k| {
                    let i = indices[k];
                    augment(&samples[i], derive_seed(seed, 0, i as u64), cfg)
                })
            }
            None => indices.iter().map(|&i| self.samples[i].clone()).collect(),
        };
        let frames: Vec<Tensor<f32>> = prepared.iter().map(|s| s.frames.clone()).collect();
        let labels: Vec<LabelMap> = prepared.iter().map(|s| s.label.clone()).collect();
        Some(Batch {
            ids: prepared.iter().map(|s| s.id.clone()).collect(),
            indices,
            frames: Tensor::stack(&frames).expect("shapes checked up front"),
            labels: LabelMap::stack(&labels).expect("shapes checked up front"),
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.next).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

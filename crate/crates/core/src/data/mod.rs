//! Synthetic phantoms, augmentation, dataset files and batching.

pub mod augment;
pub mod batch;
pub mod dataset;
pub mod phantom;

use crate::labels::LabelMap;
use crate::tensor::Tensor;

pub use augment::{augment, AugmentConfig, AugmentParams};
pub use batch::{batches, epoch_order, Batch};
pub use dataset::{load_dataset, load_manifest, save_dataset, Dataset, Manifest, Split};
pub use phantom::{generate_phantom, DEFAULT_SPACING_MM};

pub const BACKGROUND: u8 = 0;
pub const WALL: u8 = 1;
pub const LUMEN: u8 = 2;
pub const NUM_CLASSES: usize = 3;

/// Three grey frames with the middle frame's annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(1, 3, H, W)`, values in `[0, 1]`.
    pub frames: Tensor<f32>,
    /// `(1, H, W)` with values in `{0, 1, 2}`.
    pub label: LabelMap,
    /// Physical size of one pixel.
    pub spacing_mm: f64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent child seed for `(stream, index)` under `base`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream) ^ index)
}

/// Deterministic dataset of `n_train + n_val` phantoms; sample `i` uses the
/// seed derived from `(seed, i)`.
pub fn generate_dataset(n_train: usize, n_val: usize, size: usize, seed: u64) -> crate::Result<Dataset> {
    phantom::check_size(size)?;
    let total = n_train + n_val;
    let samples: Vec<crate::Result<Sample>> = crate::parallel::map_indexed(total, |i| {
        let mut s = generate_phantom(derive_seed(seed, 1, i as u64), size)?;
        s.id = format!("s{:05}", i);
        Ok(s)
    });
    let samples = samples.into_iter().collect::<crate::Result<Vec<_>>>()?;
    let entries = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.clone(), if i < n_train { Split::Train } else { Split::Val }))
        .collect();
    Ok(Dataset { manifest: Manifest { spacing_mm: DEFAULT_SPACING_MM, size, entries }, samples })
}

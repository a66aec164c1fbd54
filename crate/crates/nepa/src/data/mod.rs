//! Deterministic data: synthetic shapes, image folders, augmentation and
//! batching.

pub mod augment;
pub mod folder;
pub mod synth;

pub use augment::{
    mixup_cutmix, random_resized_crop, resize_bilinear, sample_crop, smooth_labels, AugmentConfig, MixInfo,
    MixKind, Rect,
};
pub use folder::{export_folder, load_folder};
pub use synth::{Shape, SynthSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// One image in `[0, 1]`, shape `[C, H, W]`.
#[derive(Clone, Debug)]
pub struct ImageSample {
    pub pixels: Tensor<f32>,
    pub label: usize,
    pub id: u64,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub classes: Vec<String>,
    /// Files that could not be decoded.
    pub skipped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Ensures every image is `[c, h, w]`.
    pub fn check_geometry(&self, c: usize, h: usize, w: usize) -> Result<()> {
        match self.samples.iter().find(|s| s.pixels.shape() != [c, h, w]) {
            Some(s) => Err(Error::Data(format!(
                "sample {} has shape {:?}, model expects [{c}, {h}, {w}]",
                s.id,
                s.pixels.shape()
            ))),
            None => Ok(()),
        }
    }

    /// Stacks the given samples into `[B, C, H, W]` model input (see
    /// [`normalize_pixel`]) and their labels.
    pub fn batch<E: Element>(&self, indices: &[usize]) -> Result<(Tensor<E>, Vec<usize>)> {
        let imgs: Vec<Tensor<E>> = indices
            .iter()
            .map(|&i| self.samples[i].pixels.map(normalize_pixel).cast())
            .collect();
        let labels = indices.iter().map(|&i| self.samples[i].label).collect();
        Ok((Tensor::stack(&imgs)?, labels))
    }
}

/// Maps `[0, 1]` pixels to `[−1, 1]` for the network.
pub fn normalize_pixel(v: f32) -> f32 {
    (v - 0.5) * 2.0
}

/// Shuffled training batches for one epoch. The permutation depends only on
/// `(seed, epoch)`; the trailing partial batch is dropped.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.chunks_exact(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// In-order evaluation batches, keeping the partial tail.
pub fn eval_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn batch_iter_examples() {
        assert_eq!(batch_iter(10, 4, 0, 0).len(), 2);
        assert_eq!(batch_iter(100, 8, 3, 1), batch_iter(100, 8, 3, 1));
        assert_ne!(batch_iter(100, 8, 3, 1), batch_iter(100, 8, 3, 2));
        assert_eq!(eval_batches(10, 4).last().unwrap().len(), 2);
    }

    proptest! {
        #[test]
        fn batches_are_disjoint_subsets(n in 0usize..200, b in 1usize..20, seed: u64, epoch in 0u64..5) {
            let batches = batch_iter(n, b, seed, epoch);
            prop_assert_eq!(batches.len(), n / b);
            let mut all: Vec<usize> = batches.concat();
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), (n / b) * b);
            prop_assert!(all.iter().all(|&i| i < n));
        }
    }

    #[test]
    fn batch_stacks_normalized_pixels() {
        let spec = SynthSpec::default();
        let ds = spec.dataset(0, 4, crate::parallel::Exec::Sequential).unwrap();
        let (x, y) = ds.batch::<f64>(&[2, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 3, 32, 32]);
        assert_eq!(y, vec![2, 0]);
        assert_eq!(x.data()[0], normalize_pixel(ds.samples[2].pixels.data()[0]) as f64);
        assert!(ds.check_geometry(3, 32, 32).is_ok());
        assert!(ds.check_geometry(3, 16, 16).is_err());
    }
}

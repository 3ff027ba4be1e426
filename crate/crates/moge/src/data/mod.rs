//! Fashion-MNIST ingestion, batching, and image perturbations.

mod affine;
mod idx;

pub use affine::{affine_transform, AffineKind, AffineSpec};
pub use idx::{load_idx, write_idx_images, write_idx_labels};

use std::path::{Path, PathBuf};

use crate::rng::Rng;
use crate::tensor::Matrix;
use crate::{Error, Result};

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_CLASSES: usize = 10;

/// Grayscale images with values in `[0, 1]`, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ImageDataset {
    pub fn new(rows: usize, cols: usize, images: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != rows * cols * labels.len() {
            return Err(Error::shape(format!(
                "{} pixel values for {} images of {rows}x{cols}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(v) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::config(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            rows,
            cols,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    /// First `n` items (all of them when `n >= len`).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            rows: self.rows,
            cols: self.cols,
            images: self.images[..n * self.pixels()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Gathers the listed items into a token matrix plus labels.
    pub fn gather(&self, indices: &[usize]) -> (Matrix, Vec<u8>) {
        let p = self.pixels();
        let mut data = Vec::with_capacity(indices.len() * p);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        (Matrix::from_vec(indices.len(), p, data).expect("gathered size"), labels)
    }
}

/// Standard file names inside a Fashion-MNIST directory, preferring the
/// gzip-compressed variant when both exist.
pub fn split_paths(dir: &Path, train: bool) -> (PathBuf, PathBuf) {
    let prefix = if train { "train" } else { "t10k" };
    let pick = |stem: String| {
        let gz = dir.join(format!("{stem}.gz"));
        if gz.exists() {
            gz
        } else {
            dir.join(stem)
        }
    };
    (
        pick(format!("{prefix}-images-idx3-ubyte")),
        pick(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Loads the training or test split from a Fashion-MNIST directory.
pub fn load_split(dir: &Path, train: bool) -> Result<ImageDataset> {
    let (images, labels) = split_paths(dir, train);
    load_idx(&images, &labels)
}

/// Index order for one epoch. With shuffling the permutation comes from the
/// `shuffle/<epoch>` substream of `seed`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        Rng::substream(seed, &format!("shuffle/{epoch}")).shuffle(&mut order);
    }
    order
}

/// Batches of indices for one epoch; the last batch may be short.
pub fn batch_iterator(len: usize, batch: usize, seed: u64, epoch: usize, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    Ok(epoch_order(len, seed, epoch, shuffle)
        .chunks(batch)
        .map(<[usize]>::to_vec)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recipe_batch_count() {
        let batches = batch_iterator(60_000, 200, 0, 0, true).unwrap();
        assert_eq!(batches.len(), 300);
        assert_eq!(batches.len() * 150, 45_000);
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..60_000).collect::<Vec<_>>());
    }

    #[test]
    fn short_final_batch_is_kept() {
        let b = batch_iterator(1001, 200, 0, 0, false).unwrap();
        assert_eq!(b.len(), 6);
        assert_eq!(b[5], vec![1000]);
        assert_eq!(b[0], (0..200).collect::<Vec<_>>());
    }

    #[test]
    fn shuffling_is_deterministic_per_epoch() {
        let a = batch_iterator(500, 64, 3, 7, true).unwrap();
        let b = batch_iterator(500, 64, 3, 7, true).unwrap();
        assert_eq!(a, b);
        let c = batch_iterator(500, 64, 3, 8, true).unwrap();
        assert_ne!(a, c);
        assert!(batch_iterator(10, 0, 0, 0, false).is_err());
    }

    #[test]
    fn dataset_validates_pixels() {
        assert!(ImageDataset::new(1, 2, vec![0.0, 1.5], vec![0]).is_err());
        assert!(ImageDataset::new(1, 2, vec![0.0], vec![0]).is_err());
        let ds = ImageDataset::new(1, 2, vec![0.0, 0.5, 1.0, 0.25], vec![3, 4]).unwrap();
        let (x, y) = ds.gather(&[1, 0]);
        assert_eq!(x.row(0), &[1.0, 0.25]);
        assert_eq!(y, vec![4, 3]);
    }
}

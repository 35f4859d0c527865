//! Labeled image sets: IDX file ingestion and procedural generators.

pub mod idx;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// N images of one shape with labels in [0, classes). Pixels live in
/// [0,1]. Unlike `Tensor`, a dataset may be empty.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    image_shape: [usize; 3],
    pixels: Vec<f32>,
    labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        image_shape: [usize; 3],
        pixels: Vec<f32>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Dataset> {
        let per_image: usize = image_shape.iter().product();
        if per_image == 0 {
            return Err(Error::invalid(format!(
                "dataset image shape {image_shape:?} has a zero dimension"
            )));
        }
        if pixels.len() != labels.len() * per_image {
            return Err(Error::invalid(format!(
                "dataset pixel count {} does not match {} labels x {} pixels/image",
                pixels.len(),
                labels.len(),
                per_image
            )));
        }
        if classes == 0 {
            return Err(Error::invalid("dataset needs at least one class"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "pixel {bad} outside [0,1] after normalization"
            )));
        }
        Ok(Dataset {
            name: name.into(),
            split,
            image_shape,
            pixels,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// One image as an `[h, w, c]` tensor.
    pub fn image(&self, i: usize) -> Result<Tensor> {
        if i >= self.len() {
            return Err(Error::invalid(format!(
                "image index {i} out of range for {} images",
                self.len()
            )));
        }
        let per: usize = self.image_shape.iter().product();
        Tensor::new(
            self.image_shape.to_vec(),
            self.pixels[i * per..(i + 1) * per].to_vec(),
        )
    }

    /// Images `[lo, hi)` stacked into an `[n, h, w, c]` batch tensor.
    pub fn batch(&self, lo: usize, hi: usize) -> Result<Tensor> {
        if lo >= hi || hi > self.len() {
            return Err(Error::invalid(format!(
                "batch range {lo}..{hi} invalid for {} images",
                self.len()
            )));
        }
        let per: usize = self.image_shape.iter().product();
        let mut shape = vec![hi - lo];
        shape.extend_from_slice(&self.image_shape);
        Tensor::new(shape, self.pixels[lo * per..hi * per].to_vec())
    }

    /// All images as one batch tensor; errors when empty.
    pub fn batch_all(&self) -> Result<Tensor> {
        self.batch(0, self.len())
    }

    /// Images `[lo, hi)` as a list of per-image tensors.
    pub fn images_vec(&self, lo: usize, hi: usize) -> Result<Vec<Tensor>> {
        if hi > self.len() || lo > hi {
            return Err(Error::invalid(format!(
                "range {lo}..{hi} invalid for {} images",
                self.len()
            )));
        }
        (lo..hi).map(|i| self.image(i)).collect()
    }

    /// Split off the first `k` images into one set, the rest into another.
    pub fn split_at(&self, k: usize) -> Result<(Dataset, Dataset)> {
        if k == 0 || k >= self.len() {
            return Err(Error::invalid(format!(
                "split point {k} must be inside 1..{}",
                self.len()
            )));
        }
        let per: usize = self.image_shape.iter().product();
        let head = Dataset {
            name: self.name.clone(),
            split: self.split,
            image_shape: self.image_shape,
            pixels: self.pixels[..k * per].to_vec(),
            labels: self.labels[..k].to_vec(),
            classes: self.classes,
        };
        let tail = Dataset {
            name: self.name.clone(),
            split: self.split,
            image_shape: self.image_shape,
            pixels: self.pixels[k * per..].to_vec(),
            labels: self.labels[k..].to_vec(),
            classes: self.classes,
        };
        Ok((head, tail))
    }

    /// The first `k` images (or all of them when fewer exist).
    pub fn take(&self, k: usize) -> Dataset {
        let k = k.min(self.len());
        let per: usize = self.image_shape.iter().product();
        Dataset {
            name: self.name.clone(),
            split: self.split,
            image_shape: self.image_shape,
            pixels: self.pixels[..k * per].to_vec(),
            labels: self.labels[..k].to_vec(),
            classes: self.classes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset::new(
            "tiny",
            Split::Train,
            [2, 2, 1],
            vec![
                0.0, 0.1, 0.2, 0.3, //
                0.4, 0.5, 0.6, 0.7, //
                0.8, 0.9, 1.0, 0.05,
            ],
            vec![0, 1, 2],
            3,
        )
        .unwrap()
    }

    #[test]
    fn accessors_slice_correctly() {
        let d = tiny();
        assert_eq!(d.len(), 3);
        assert_eq!(d.image(1).unwrap().data(), &[0.4, 0.5, 0.6, 0.7]);
        let b = d.batch(1, 3).unwrap();
        assert_eq!(b.shape(), &[2, 2, 2, 1]);
        assert_eq!(d.batch_all().unwrap().shape(), &[3, 2, 2, 1]);
        assert_eq!(d.images_vec(0, 2).unwrap().len(), 2);
        assert!(d.image(3).is_err());
        assert!(d.batch(2, 2).is_err());
    }

    #[test]
    fn split_and_take_partition_consistently() {
        let d = tiny();
        let (head, tail) = d.split_at(2).unwrap();
        assert_eq!(head.len(), 2);
        assert_eq!(tail.len(), 1);
        assert_eq!(tail.image(0).unwrap(), d.image(2).unwrap());
        assert_eq!(d.take(2).labels(), &[0, 1]);
        assert_eq!(d.take(99).len(), 3);
        assert!(d.split_at(0).is_err());
        assert!(d.split_at(3).is_err());
    }

    #[test]
    fn empty_dataset_is_representable() {
        let d = Dataset::new("empty", Split::Test, [4, 4, 1], vec![], vec![], 10).unwrap();
        assert!(d.is_empty());
        assert!(d.batch_all().is_err());
        assert_eq!(d.images_vec(0, 0).unwrap().len(), 0);
    }

    #[test]
    fn construction_validates_contents() {
        let bad_pixels = Dataset::new("x", Split::Train, [1, 1, 1], vec![1.5], vec![0], 2);
        assert!(bad_pixels.is_err());
        let bad_label = Dataset::new("x", Split::Train, [1, 1, 1], vec![0.5], vec![5], 2);
        assert!(bad_label.is_err());
        let bad_count = Dataset::new("x", Split::Train, [2, 1, 1], vec![0.5], vec![0], 2);
        assert!(bad_count.is_err());
        let bad_shape = Dataset::new("x", Split::Train, [0, 1, 1], vec![], vec![], 2);
        assert!(bad_shape.is_err());
    }
}

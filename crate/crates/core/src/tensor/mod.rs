//! Dense n-dimensional `f32` arrays in row-major layout.
//!
//! `Tensor` is a plain value type; gradient bookkeeping lives on the
//! [`tape::Tape`], where leaves are registered with a `requires_grad` flag.

pub mod tape;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor, validating the shape/data contract:
    /// rank >= 1, every dim >= 1, product(shape) == data.len().
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::invalid("tensor rank must be >= 1"));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("zero dimension in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} implies {n} elements but data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len().max(1)],
            data: if data.is_empty() { vec![0.0] } else { data },
        }
    }

    /// Uniform samples in [lo, hi).
    pub fn rand_uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_in(lo, hi)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// I.i.d. standard normal samples, each clamped to `[clip_lo, clip_hi]`.
    /// Defaults to `[-5, 5]` when no range is given.
    pub fn gaussian(
        rng: &mut Rng,
        shape: &[usize],
        clip_lo: Option<f32>,
        clip_hi: Option<f32>,
    ) -> Result<Self> {
        let lo = clip_lo.unwrap_or(-5.0);
        let hi = clip_hi.unwrap_or(5.0);
        if lo > hi {
            return Err(Error::invalid(format!("invalid clip range [{lo}, {hi}]")));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(rng.normal().clamp(lo, hi));
        }
        Tensor::new(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.is_empty() {
            return Err(Error::shape("reshape", &shape, &self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise combine with an equally-shaped tensor.
    pub fn zip(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("zip", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum()
    }

    pub fn mean_f64(&self) -> f64 {
        self.sum_f64() / self.data.len() as f64
    }

    /// Euclidean norm, accumulated in f64.
    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Row-major index of `[n, h, w, c]` in an NHWC tensor.
    #[inline]
    pub fn nhwc_index(shape: &[usize], n: usize, h: usize, w: usize, c: usize) -> usize {
        ((n * shape[1] + h) * shape[2] + w) * shape[3] + c
    }

    /// Interpret a rank-3 `[H, W, C]` image as a rank-4 batch of one.
    pub fn as_batch_of_one(&self) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::invalid(format!(
                "expected rank-3 image, got shape {:?}",
                self.shape
            )));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(&self.shape);
        Tensor::new(shape, self.data.clone())
    }

    /// Extract image `i` from an `[N, H, W, C]` batch as `[H, W, C]`.
    pub fn image_at(&self, i: usize) -> Result<Tensor> {
        if self.rank() != 4 {
            return Err(Error::invalid(format!(
                "expected rank-4 batch, got shape {:?}",
                self.shape
            )));
        }
        let per = self.len() / self.shape[0];
        if i >= self.shape[0] {
            return Err(Error::invalid(format!(
                "image index {i} out of range for batch of {}",
                self.shape[0]
            )));
        }
        Tensor::new(
            self.shape[1..].to_vec(),
            self.data[i * per..(i + 1) * per].to_vec(),
        )
    }
}

/// Stack equally-shaped `[H, W, C]` images into one `[N, H, W, C]` batch.
pub fn stack_images(images: &[Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("cannot stack an empty image list"))?;
    let mut data = Vec::with_capacity(first.len() * images.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::shape("stack_images", first.shape(), img.shape()));
        }
        data.extend_from_slice(img.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

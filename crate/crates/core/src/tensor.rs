//! Dense NCHW tensors used for real-valued activations, parameters and codes.

use crate::error::{Error, Result};

/// Real-valued 4-D tensor in row-major `(N, C, H, W)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        Tensor { shape, data: vec![value; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!("shape {shape:?} holds {n} elements, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + h) * ws + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    /// Number of elements in one image (`C·H·W`).
    pub fn image_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Slice of images `[start, start + count)` along the batch axis.
    pub fn batch_slice(&self, start: usize, count: usize) -> Tensor {
        let per = self.image_len();
        Tensor {
            shape: [count, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[start * per..(start + count) * per].to_vec(),
        }
    }

    /// Stacks equally shaped single images into one batch.
    pub fn stack(images: &[&Tensor]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::ShapeMismatch("empty stack".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            if img.shape[1..] != first.shape[1..] {
                return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", img.shape, first.shape)));
            }
            data.extend_from_slice(&img.data);
        }
        let n = images.iter().map(|t| t.shape[0]).sum();
        Ok(Tensor { shape: [n, c, h, w], data })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Unsigned integer codes in the same `(N, C, H, W)` layout as [`Tensor`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeTensor {
    pub shape: [usize; 4],
    pub codes: Vec<u8>,
}

impl CodeTensor {
    pub fn new(shape: [usize; 4], codes: Vec<u8>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != codes.len() {
            return Err(Error::ShapeMismatch(format!("shape {shape:?} holds {n} elements, got {}", codes.len())));
        }
        Ok(CodeTensor { shape, codes })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

//! Dense N-dimensional tensors with shape metadata.
//!
//! Tensors are plain values: once produced they are never mutated, so they can
//! be cloned into tapes and sent across threads freely. Images use the
//! `(batch, channels, height, width)` layout; arbitrary ranks are allowed.

use crate::error::{Error, Result};

/// Element type of the differentiable core. `f32` is the training precision,
/// `f64` is selectable for gradient checks.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumCast
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::AddAssign
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense tensor: contiguous row-major values plus shape extents.
///
/// Invariant: `shape.iter().product() == data.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new".into(),
                detail: format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); numel] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// True when the tensor holds exactly one element, regardless of rank.
    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if !self.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::item".into(),
                detail: format!("expected 1 element, shape is {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    /// Interpret the shape as `(batch, channels, height, width)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok((b, c, h, w)),
            other => Err(Error::ShapeMismatch {
                op: "Tensor::dims4".into(),
                detail: format!("expected rank-4 shape, got {:?}", other),
            }),
        }
    }

    #[inline]
    pub fn at4(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        let (_, cs, hs, ws) = (
            self.shape[0],
            self.shape[1],
            self.shape[2],
            self.shape[3],
        );
        self.data[((b * cs + c) * hs + h) * ws + w]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "Tensor::zip_map".into(),
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn linf_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        let sum = self.data.iter().fold(T::zero(), |s, &v| s + v);
        sum / T::from_f64(self.data.len() as f64)
    }

    /// Convert element type, rounding through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Stack per-sample `(1, C, H, W)` tensors into one `(B, C, H, W)` batch.
pub fn stack_batch<T: Scalar>(samples: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = samples.first().ok_or_else(|| Error::ShapeMismatch {
        op: "stack_batch".into(),
        detail: "empty sample list".into(),
    })?;
    let (b0, c, h, w) = first.dims4()?;
    if b0 != 1 {
        return Err(Error::ShapeMismatch {
            op: "stack_batch".into(),
            detail: format!("samples must have batch extent 1, got {}", b0),
        });
    }
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        if s.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "stack_batch".into(),
                detail: format!("{:?} vs {:?}", s.shape(), first.shape()),
            });
        }
        data.extend_from_slice(s.data());
    }
    Tensor::new(vec![samples.len(), c, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data_len() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_is_one_element() {
        let t = Tensor::scalar(4.0f32);
        assert!(t.is_scalar());
        assert_eq!(t.item().unwrap(), 4.0);
    }

    #[test]
    fn cast_roundtrip_f32() {
        let t = Tensor::<f32>::from_fn(&[3], |i| i as f32 * 0.25);
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(t, back);
    }

    #[test]
    fn stack_batch_concatenates_samples() {
        let a = Tensor::<f32>::full(&[1, 1, 2, 2], 1.0);
        let b = Tensor::<f32>::full(&[1, 1, 2, 2], 2.0);
        let s = stack_batch(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 1, 2, 2]);
        assert_eq!(s.data()[0], 1.0);
        assert_eq!(s.data()[4], 2.0);
    }
}

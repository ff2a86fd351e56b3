//! Dense row-major tensors.
//!
//! Feature maps use the `(batch, channels, height, width)` layout. Most
//! channel-wise kernels only care about `(batch, channels, rest)` and treat the
//! trailing dimensions as one flattened spatial axis.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::shape(format!("expected 4-d tensor, got {:?}", self.shape))),
        }
    }

    /// `(batch, channels, product of the remaining dims)`.
    pub fn dims_bcl(&self) -> Result<(usize, usize, usize)> {
        if self.shape.len() < 2 {
            return Err(Error::shape(format!(
                "expected at least (batch, channels), got {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2..].iter().product()))
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.as_f64()).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    /// Concatenates equally shaped `(B, C_i, ...)` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let (b, _, l) = first.dims_bcl()?;
        let mut channels = 0;
        for p in parts {
            let (pb, pc, pl) = p.dims_bcl()?;
            if pb != b || pl != l || p.shape[2..] != first.shape[2..] {
                return Err(Error::shape(format!(
                    "concat mismatch: {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
            channels += pc;
        }
        let mut data = Vec::with_capacity(b * channels * l);
        for bi in 0..b {
            for p in parts {
                let pc = p.shape[1];
                data.extend_from_slice(&p.data[bi * pc * l..(bi + 1) * pc * l]);
            }
        }
        let mut shape = first.shape.clone();
        shape[1] = channels;
        Ok(Self { shape, data })
    }

    /// Channels `[start, start + len)` of a `(B, C, ...)` tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let (b, c, l) = self.dims_bcl()?;
        if start + len > c {
            return Err(Error::shape(format!(
                "channel slice {}..{} out of {}",
                start,
                start + len,
                c
            )));
        }
        let mut data = Vec::with_capacity(b * len * l);
        for bi in 0..b {
            let base = bi * c * l + start * l;
            data.extend_from_slice(&self.data[base..base + len * l]);
        }
        let mut shape = self.shape.clone();
        shape[1] = len;
        Ok(Self { shape, data })
    }
}

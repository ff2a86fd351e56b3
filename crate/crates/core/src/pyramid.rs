//! Laplacian pyramid with an exact reconstruction identity.
//!
//! Both directions use the separable binomial kernel `[1, 4, 6, 4, 1] / 16`
//! with reflect padding. Downsampling blurs and keeps even samples;
//! upsampling inserts zeros and blurs with twice the kernel. Because the same
//! upsampling operator is used when building and collapsing the pyramid,
//! `reconstruct(decompose(x)) == x` up to rounding.

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::resample::Resample1d;
use crate::scalar::Scalar;

pub const DEFAULT_DEPTH: usize = 2;

pub fn gaussian_downsample<'t, T: Scalar>(x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let (_, _, h, w) = x.value().dims4()?;
    for (axis, size) in [("height", h), ("width", w)] {
        if size % 2 != 0 {
            return Err(Error::Divisibility {
                axis,
                size,
                multiple: 2,
            });
        }
    }
    let cols = Rc::new(Resample1d::binomial_down(w)?);
    let rows = Rc::new(Resample1d::binomial_down(h)?);
    x.resample(&cols, 3)?.resample(&rows, 2)
}

pub fn upsample<'t, T: Scalar>(x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let (_, _, h, w) = x.value().dims4()?;
    let cols = Rc::new(Resample1d::binomial_up(w));
    let rows = Rc::new(Resample1d::binomial_up(h));
    x.resample(&cols, 3)?.resample(&rows, 2)
}

/// Band-pass levels `highs[k]` at resolution `H/2^k` plus the low-pass
/// residual at `H/2^depth`.
#[derive(Clone, Debug)]
pub struct PyramidDecomposition<'t, T: Scalar> {
    pub highs: Vec<Var<'t, T>>,
    pub low: Var<'t, T>,
}

impl<'t, T: Scalar> PyramidDecomposition<'t, T> {
    pub fn depth(&self) -> usize {
        self.highs.len()
    }
}

pub fn decompose<'t, T: Scalar>(img: &Var<'t, T>, depth: usize) -> Result<PyramidDecomposition<'t, T>> {
    if depth == 0 {
        return Err(Error::Config("pyramid depth must be at least 1".into()));
    }
    let (_, _, h, w) = img.value().dims4()?;
    let multiple = 1usize << depth;
    for (axis, size) in [("height", h), ("width", w)] {
        if size % multiple != 0 {
            return Err(Error::Divisibility {
                axis,
                size,
                multiple,
            });
        }
    }
    let mut highs = Vec::with_capacity(depth);
    let mut current = img.clone();
    for _ in 0..depth {
        let down = gaussian_downsample(&current)?;
        highs.push(current.sub(&upsample(&down)?)?);
        current = down;
    }
    Ok(PyramidDecomposition {
        highs,
        low: current,
    })
}

pub fn reconstruct<'t, T: Scalar>(pyr: &PyramidDecomposition<'t, T>) -> Result<Var<'t, T>> {
    let mut current = pyr.low.clone();
    for (k, high) in pyr.highs.iter().enumerate().rev() {
        let up = upsample(&current)?;
        if up.shape() != high.shape() {
            return Err(Error::shape(format!(
                "pyramid level {} has shape {:?} but the coarser level upsamples to {:?}",
                k,
                high.shape(),
                up.shape()
            )));
        }
        current = high.add(&up)?;
    }
    Ok(current)
}

//! Sparse separable linear maps along one tensor axis.
//!
//! Every resampling step of the pipeline (binomial pyramid filters, reflect
//! padding, cropping, bilinear resizing and the SSIM Gaussian window) is a
//! linear map acting on one spatial axis at a time. Storing those maps as
//! explicit sparse rows gives the forward pass and its exact adjoint from the
//! same data.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The 5-tap binomial kernel `[1, 4, 6, 4, 1] / 16`.
pub const BINOMIAL_5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Mirror an index into `0..n` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Linear map `R^in_len -> R^out_len`, one sparse row per output sample.
#[derive(Clone, Debug)]
pub struct Resample1d<T> {
    in_len: usize,
    rows: Vec<Vec<(usize, T)>>,
}

impl<T: Scalar> Resample1d<T> {
    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<(usize, T)>] {
        &self.rows
    }

    /// Binomial blur with reflect padding followed by stride-2 decimation.
    pub fn binomial_down(n: usize) -> Result<Self> {
        if n % 2 != 0 || n == 0 {
            return Err(Error::Divisibility {
                axis: "spatial",
                size: n,
                multiple: 2,
            });
        }
        let rows = (0..n / 2)
            .map(|j| {
                BINOMIAL_5
                    .iter()
                    .enumerate()
                    .map(|(t, &w)| {
                        let src = (2 * j) as isize + t as isize - 2;
                        (reflect_index(src, n), T::lit(w))
                    })
                    .collect()
            })
            .collect();
        Ok(Self { in_len: n, rows })
    }

    /// Zero insertion to length `2n`, then the binomial kernel scaled by 2 with
    /// reflect padding of the zero-inserted signal.
    pub fn binomial_up(n: usize) -> Self {
        let m = 2 * n;
        let rows = (0..m)
            .map(|i| {
                BINOMIAL_5
                    .iter()
                    .enumerate()
                    .filter_map(|(t, &w)| {
                        let z = reflect_index(i as isize + t as isize - 2, m);
                        (z % 2 == 0).then(|| (z / 2, T::lit(2.0 * w)))
                    })
                    .collect()
            })
            .collect();
        Self { in_len: n, rows }
    }

    /// Half-pixel-centred bilinear interpolation (edge samples clamped).
    pub fn bilinear(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let rows = (0..out_len)
            .map(|j| {
                let src = ((j as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                let frac = src - i0 as f64;
                if i0 == i1 || frac == 0.0 {
                    vec![(i0, T::one())]
                } else {
                    vec![(i0, T::lit(1.0 - frac)), (i1, T::lit(frac))]
                }
            })
            .collect();
        Self { in_len, rows }
    }

    pub fn reflect_pad(n: usize, before: usize, after: usize) -> Self {
        let rows = (0..n + before + after)
            .map(|j| vec![(reflect_index(j as isize - before as isize, n), T::one())])
            .collect();
        Self { in_len: n, rows }
    }

    pub fn crop(n: usize, start: usize, len: usize) -> Result<Self> {
        if start + len > n {
            return Err(Error::shape(format!(
                "crop {}..{} exceeds length {}",
                start,
                start + len,
                n
            )));
        }
        let rows = (start..start + len).map(|i| vec![(i, T::one())]).collect();
        Ok(Self { in_len: n, rows })
    }

    /// Normalised Gaussian window evaluated only where it fits entirely
    /// inside the signal ("valid" correlation).
    pub fn gaussian_valid(n: usize, size: usize, sigma: f64) -> Result<Self> {
        if n < size {
            return Err(Error::shape(format!(
                "signal length {} shorter than window {}",
                n, size
            )));
        }
        let half = (size as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..size)
            .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        let taps: Vec<T> = raw.iter().map(|w| T::lit(w / total)).collect();
        let rows = (0..=n - size)
            .map(|j| taps.iter().enumerate().map(|(t, &w)| (j + t, w)).collect())
            .collect();
        Ok(Self { in_len: n, rows })
    }

    /// Applies the map along `axis` of `x`.
    pub fn apply(&self, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        let (outer, n, inner) = split_axis(x.shape(), axis)?;
        if n != self.in_len {
            return Err(Error::shape(format!(
                "resample expects length {} on axis {}, got {}",
                self.in_len, axis, n
            )));
        }
        let m = self.out_len();
        let mut out = vec![T::zero(); outer * m * inner];
        let src = x.data();
        for o in 0..outer {
            let xb = &src[o * n * inner..(o + 1) * n * inner];
            let yb = &mut out[o * m * inner..(o + 1) * m * inner];
            for (j, row) in self.rows.iter().enumerate() {
                let y = &mut yb[j * inner..(j + 1) * inner];
                for &(k, w) in row {
                    let xs = &xb[k * inner..(k + 1) * inner];
                    for (a, &b) in y.iter_mut().zip(xs) {
                        *a += w * b;
                    }
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = m;
        Ok(Tensor::from_parts(shape, out))
    }

    /// Applies the transposed map along `axis` (the adjoint of [`apply`]).
    ///
    /// [`apply`]: Resample1d::apply
    pub fn apply_transpose(&self, g: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        let (outer, m, inner) = split_axis(g.shape(), axis)?;
        if m != self.out_len() {
            return Err(Error::shape(format!(
                "adjoint expects length {} on axis {}, got {}",
                self.out_len(),
                axis,
                m
            )));
        }
        let n = self.in_len;
        let mut out = vec![T::zero(); outer * n * inner];
        let src = g.data();
        for o in 0..outer {
            let gb = &src[o * m * inner..(o + 1) * m * inner];
            let xb = &mut out[o * n * inner..(o + 1) * n * inner];
            for (j, row) in self.rows.iter().enumerate() {
                let gs = &gb[j * inner..(j + 1) * inner];
                for &(k, w) in row {
                    let xs = &mut xb[k * inner..(k + 1) * inner];
                    for (a, &b) in xs.iter_mut().zip(gs) {
                        *a += w * b;
                    }
                }
            }
        }
        let mut shape = g.shape().to_vec();
        shape[axis] = n;
        Ok(Tensor::from_parts(shape, out))
    }
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(format!(
            "axis {} out of range for shape {:?}",
            axis, shape
        )));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Applies `rows_op` along the height axis and `cols_op` along the width
/// axis of a `(B, C, H, W)` tensor.
pub fn apply_separable<T: Scalar>(
    x: &Tensor<T>,
    rows_op: &Resample1d<T>,
    cols_op: &Resample1d<T>,
) -> Result<Tensor<T>> {
    x.dims4()?;
    let t = cols_op.apply(x, 3)?;
    rows_op.apply(&t, 2)
}

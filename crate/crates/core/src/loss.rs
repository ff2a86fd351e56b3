//! Differentiable training loss: mean squared error plus a weighted
//! structural-dissimilarity term.

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::resample::Resample1d;
use crate::scalar::Scalar;

/// Weight of `1 - SSIM` in the total loss.
pub const SSIM_WEIGHT: f64 = 0.4;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape<T: Scalar>(a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} and target {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn mse<'t, T: Scalar>(pred: &Var<'t, T>, target: &Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape(pred, target)?;
    Ok(pred.sub(target)?.square().mean())
}

/// Per-pixel SSIM map over valid Gaussian windows, `(B, C, H-10, W-10)`.
pub fn ssim_map<'t, T: Scalar>(a: &Var<'t, T>, b: &Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape(a, b)?;
    let (_, _, h, w) = a.value().dims4()?;
    let rows = Rc::new(Resample1d::gaussian_valid(h, SSIM_WINDOW, SSIM_SIGMA)?);
    let cols = Rc::new(Resample1d::gaussian_valid(w, SSIM_WINDOW, SSIM_SIGMA)?);
    let blur = |x: &Var<'t, T>| x.resample(&cols, 3)?.resample(&rows, 2);

    let mu_a = blur(a)?;
    let mu_b = blur(b)?;
    let mu_aa = mu_a.square();
    let mu_bb = mu_b.square();
    let mu_ab = mu_a.mul(&mu_b)?;
    let var_a = blur(&a.square())?.sub(&mu_aa)?;
    let var_b = blur(&b.square())?.sub(&mu_bb)?;
    let cov = blur(&a.mul(b)?)?.sub(&mu_ab)?;

    let (c1, c2) = (T::lit(SSIM_C1), T::lit(SSIM_C2));
    let two = T::lit(2.0);
    let num = mu_ab.scale(two).add_scalar(c1).mul(&cov.scale(two).add_scalar(c2))?;
    let den = mu_aa.add(&mu_bb)?.add_scalar(c1).mul(&var_a.add(&var_b)?.add_scalar(c2))?;
    num.div(&den)
}

/// Mean SSIM over pixels, channels and batch.
pub fn ssim<'t, T: Scalar>(a: &Var<'t, T>, b: &Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(ssim_map(a, b)?.mean())
}

/// `mse + 0.4 · (1 - ssim)`.
pub fn loss_total<'t, T: Scalar>(pred: &Var<'t, T>, target: &Var<'t, T>) -> Result<Var<'t, T>> {
    loss_weighted(pred, target, SSIM_WEIGHT)
}

/// `mse + weight · (1 - ssim)`.
pub fn loss_weighted<'t, T: Scalar>(pred: &Var<'t, T>, target: &Var<'t, T>, weight: f64) -> Result<Var<'t, T>> {
    let structural = ssim(pred, target)?.scale(-T::one()).add_scalar(T::one());
    mse(pred, target)?.add(&structural.scale(T::lit(weight)))
}

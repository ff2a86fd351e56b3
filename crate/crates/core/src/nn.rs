//! Small layers shared by the network branches.

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamBuilder, ParamId};
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Scale applied to the default init bound of residual-branch output
/// projections.
pub const HEAD_INIT_SCALE: f64 = 0.1;

/// 1×1 convolution (equivalently a per-token linear layer).
#[derive(Clone, Debug)]
pub struct PointwiseConv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl PointwiseConv {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cin: usize, cout: usize, bias: bool) -> Self {
        let bound = 1.0 / (cin as f64).sqrt();
        Self {
            weight: pb.add("weight", &[cout, cin], Init::Uniform(bound)),
            bias: bias.then(|| pb.add("bias", &[cout], Init::Uniform(bound))),
            in_channels: cin,
            out_channels: cout,
        }
    }

    /// Output projection of a residual branch, initialised small and
    /// flagged for [`crate::params::ParamStore::zero_residual_heads`].
    pub fn head<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cin: usize, cout: usize) -> Self {
        let bound = HEAD_INIT_SCALE / (cin as f64).sqrt();
        Self {
            weight: pb.add_head("weight", &[cout, cin], Init::Uniform(bound)),
            bias: Some(pb.add_head("bias", &[cout], Init::Zeros)),
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.pointwise_conv(p.get(self.weight), self.bias.map(|b| p.get(b)))
    }
}

/// Layer normalisation across channels at each spatial position.
#[derive(Clone, Debug)]
pub struct ChannelLayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelLayerNorm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Self {
        Self {
            gamma: pb.add("gamma", &[channels], Init::Ones),
            beta: pb.add("beta", &[channels], Init::Zeros),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm_channels(p.get(self.gamma), p.get(self.beta), T::lit(LAYER_NORM_EPS))
    }
}

#[derive(Clone, Debug)]
pub struct DepthwiseConv3x3 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DepthwiseConv3x3 {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Self {
        let bound = 1.0 / 3.0;
        Self {
            weight: pb.add("weight", &[channels, 9], Init::Uniform(bound)),
            bias: pb.add("bias", &[channels], Init::Uniform(bound)),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.depthwise_conv3x3(p.get(self.weight), p.get(self.bias))
    }
}

/// `(B, C, H, W)` to `(B, C·p², H/p, W/p)`; output channel
/// `c·p² + dy·p + dx` holds pixel `(dy, dx)` of each `p×p` patch.
pub fn space_to_depth<'t, T: Scalar>(x: &Var<'t, T>, p: usize) -> Result<Var<'t, T>> {
    let (b, c, h, w) = x.value().dims4()?;
    for (axis, size) in [("height", h), ("width", w)] {
        if size % p != 0 {
            return Err(Error::Divisibility {
                axis,
                size,
                multiple: p,
            });
        }
    }
    let (hp, wp) = (h / p, w / p);
    let mut index = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for ci in 0..c {
            for dy in 0..p {
                for dx in 0..p {
                    for y in 0..hp {
                        for xx in 0..wp {
                            index.push(((bi * c + ci) * h + y * p + dy) * w + xx * p + dx);
                        }
                    }
                }
            }
        }
    }
    x.gather(&Rc::new(index), vec![b, c * p * p, hp, wp])
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<'t, T: Scalar>(x: &Var<'t, T>, p: usize) -> Result<Var<'t, T>> {
    let (b, cp, hp, wp) = x.value().dims4()?;
    if cp % (p * p) != 0 {
        return Err(Error::shape(format!(
            "{} channels not divisible by patch area {}",
            cp,
            p * p
        )));
    }
    let c = cp / (p * p);
    let (h, w) = (hp * p, wp * p);
    let mut index = Vec::with_capacity(b * cp * hp * wp);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let ch = ci * p * p + (y % p) * p + xx % p;
                    index.push(((bi * cp + ch) * hp + y / p) * wp + xx / p);
                }
            }
        }
    }
    x.gather(&Rc::new(index), vec![b, c, h, w])
}

/// Repeats a batch-1 tensor `b` times along the batch axis.
pub fn repeat_batch<'t, T: Scalar>(x: &Var<'t, T>, b: usize) -> Result<Var<'t, T>> {
    if x.shape().first() != Some(&1) {
        return Err(Error::shape(format!("expected batch 1, got {:?}", x.shape())));
    }
    if b == 1 {
        return Ok(x.clone());
    }
    let n = x.value().len();
    let index: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
    let mut shape = x.shape().to_vec();
    shape[0] = b;
    x.gather(&Rc::new(index), shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn space_depth_roundtrip() {
        let tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor::from_fn(vec![2, 3, 8, 12], |i| i as f32));
        let packed = space_to_depth(&x, 4).unwrap();
        assert_eq!(packed.shape(), &[2, 48, 2, 3]);
        let back = depth_to_space(&packed, 4).unwrap();
        assert_eq!(back.value(), x.value());
        // first patch of channel 0 is the top-left 4x4 block
        assert_eq!(packed.value().data()[0], 0.0);
        assert_eq!(packed.value().data()[6], 1.0);
    }

    #[test]
    fn space_to_depth_rejects_indivisible() {
        let tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 10, 8]));
        assert!(matches!(
            space_to_depth(&x, 4),
            Err(Error::Divisibility { axis: "height", size: 10, multiple: 4 })
        ));
    }
}

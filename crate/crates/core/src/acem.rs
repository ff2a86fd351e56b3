//! Adaptive channel expansion: activation-free gated blocks refining the
//! high-frequency pyramid bands.
//!
//! Block layout: layer norm, 1×1 expansion, 3×3 depthwise conv, simple gate,
//! simplified channel attention, 1×1 projection, residual add. The gate
//! product is the only nonlinearity.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{ChannelLayerNorm, DepthwiseConv3x3, PointwiseConv};
use crate::params::{Bound, Init, ParamBuilder, ParamId};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcemConfig {
    pub channels: usize,
    pub expansion: f64,
    pub blocks_per_level: usize,
    pub enabled: bool,
}

impl Default for AcemConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            expansion: 2.0,
            blocks_per_level: 2,
            enabled: true,
        }
    }
}

impl AcemConfig {
    /// Width after the 1×1 expansion.
    pub fn expanded_channels(&self) -> Result<usize> {
        let e = self.expansion * self.channels as f64;
        let rounded = e.round();
        if (e - rounded).abs() > 1e-9 || rounded < 2.0 || rounded as usize % 2 != 0 {
            return Err(Error::Config(format!(
                "expansion {} x {} channels must give an even integer width",
                self.expansion, self.channels
            )));
        }
        Ok(rounded as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("acem.channels must be positive".into()));
        }
        self.expanded_channels().map(|_| ())
    }
}

/// Splits channels into halves `X`, `Y` and returns `X ⊙ Y`.
pub fn simple_gate<'t, T: Scalar>(x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let (_, c, _) = x.value().dims_bcl()?;
    if c % 2 != 0 {
        return Err(Error::shape(format!("simple gate needs an even channel count, got {c}")));
    }
    let half = c / 2;
    x.slice_channels(0, half)?.mul(&x.slice_channels(half, half)?)
}

/// `X * W pool(X)`: global average pool, channel mixing by `weight`
/// `(C, C)`, then channel-wise rescaling of `X`.
pub fn sca<'t, T: Scalar>(x: &Var<'t, T>, weight: &Var<'t, T>) -> Result<Var<'t, T>> {
    let pooled = x.global_avg_pool()?;
    let scales = pooled.pointwise_conv(weight, None)?;
    x.mul_channels(&scales)
}

#[derive(Clone, Debug)]
pub struct AcemBlock {
    pub norm: ChannelLayerNorm,
    pub expand: PointwiseConv,
    pub depthwise: DepthwiseConv3x3,
    pub sca_weight: ParamId,
    pub project: PointwiseConv,
}

impl AcemBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &AcemConfig) -> Result<Self> {
        let c = cfg.channels;
        let e = cfg.expanded_channels()?;
        let g = e / 2;
        Ok(Self {
            norm: ChannelLayerNorm::new(&mut pb.pp("norm"), c),
            expand: PointwiseConv::new(&mut pb.pp("expand"), c, e, true),
            depthwise: DepthwiseConv3x3::new(&mut pb.pp("depthwise"), e),
            sca_weight: pb.add("sca.weight", &[g, g], Init::Uniform(1.0 / (g as f64).sqrt())),
            project: PointwiseConv::head(&mut pb.pp("project"), g, c),
        })
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.norm.forward(p, x)?;
        let y = self.expand.forward(p, &y)?;
        let y = self.depthwise.forward(p, &y)?;
        let y = simple_gate(&y)?;
        let y = sca(&y, p.get(self.sca_weight))?;
        let y = self.project.forward(p, &y)?;
        y.add(x)
    }
}

/// Refinement of one pyramid band conditioned on the upsampled coarser
/// reconstruction.
#[derive(Clone, Debug)]
pub struct AcemLevel {
    pub input: PointwiseConv,
    pub blocks: Vec<AcemBlock>,
    pub output: PointwiseConv,
    enabled: bool,
}

impl AcemLevel {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &AcemConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let input = PointwiseConv::new(&mut pb.pp("input"), 6, c, true);
        let blocks = (0..cfg.blocks_per_level)
            .map(|i| AcemBlock::new(&mut pb.pp(format!("block{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            input,
            blocks,
            output: PointwiseConv::head(&mut pb.pp("output"), c, 3),
            enabled: cfg.enabled,
        })
    }

    /// Returns the refined band; with the module disabled the band passes
    /// through untouched.
    pub fn refine_highfreq<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        high: &Var<'t, T>,
        context: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        if high.shape() != context.shape() {
            return Err(Error::shape(format!(
                "band {:?} and context {:?} differ in resolution",
                high.shape(),
                context.shape()
            )));
        }
        if !self.enabled {
            return Ok(high.clone());
        }
        let mut y = self
            .input
            .forward(p, &Var::concat_channels(&[high, context])?)?;
        for block in &self.blocks {
            y = block.forward(p, &y)?;
        }
        self.output.forward(p, &y)?.add(high)
    }
}

//! Hierarchical channel attention: layer attention across three feature
//! layers followed by a 1×1 projection and a residual connection.
//!
//! `R_out = W_1x1 · LA(Q, K, V) + R_in` where `LA` mixes whole layers with a
//! `3 × 3` softmax attention matrix scaled by a learnable temperature.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::PointwiseConv;
use crate::params::{Bound, Init, ParamBuilder, ParamId};
use crate::scalar::Scalar;

/// Number of hierarchical layers fused by the module.
pub const LAYERS: usize = 3;

/// `N = 3` equally shaped `(B, C, Hp, Wp)` feature maps.
#[derive(Clone, Debug)]
pub struct LayerStack<'t, T: Scalar> {
    features: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> LayerStack<'t, T> {
    pub fn new(features: Vec<Var<'t, T>>) -> Result<Self> {
        if features.len() != LAYERS {
            return Err(Error::shape(format!(
                "layer stack needs {} layers, got {}",
                LAYERS,
                features.len()
            )));
        }
        let shape = features[0].shape();
        if shape.len() != 4 || features.iter().any(|f| f.shape() != shape) {
            return Err(Error::shape(format!(
                "layer stack shapes differ: {:?}",
                features.iter().map(|f| f.shape().to_vec()).collect::<Vec<_>>()
            )));
        }
        Ok(Self { features })
    }

    pub fn layers(&self) -> &[Var<'t, T>] {
        &self.features
    }

    pub fn layer_shape(&self) -> &[usize] {
        self.features[0].shape()
    }
}

#[derive(Clone, Debug)]
pub struct Hcam {
    query: Vec<PointwiseConv>,
    key: Vec<PointwiseConv>,
    value: Vec<PointwiseConv>,
    pub alpha: ParamId,
    pub project: PointwiseConv,
    channels: usize,
    normalize: bool,
}

impl Hcam {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize, alpha_init: f64, normalize: bool) -> Result<Self> {
        if !(alpha_init > 0.0) {
            return Err(Error::Config(format!(
                "attention temperature must be positive, got {alpha_init}"
            )));
        }
        let convs = |kind: &str, pb: &mut ParamBuilder<'_, T>| {
            (0..LAYERS)
                .map(|n| PointwiseConv::new(&mut pb.pp(format!("{kind}{n}")), channels, channels, false))
                .collect::<Vec<_>>()
        };
        let query = convs("q", pb);
        let key = convs("k", pb);
        let value = convs("v", pb);
        Ok(Self {
            query,
            key,
            value,
            alpha: pb.add("alpha", &[1], Init::Const(alpha_init)),
            project: PointwiseConv::head(&mut pb.pp("project"), LAYERS * channels, channels),
            channels,
            normalize,
        })
    }

    pub fn query_convs(&self) -> &[PointwiseConv] {
        &self.query
    }

    pub fn key_convs(&self) -> &[PointwiseConv] {
        &self.key
    }

    pub fn value_convs(&self) -> &[PointwiseConv] {
        &self.value
    }

    /// Whether flattened query and key rows are L2-normalised before the
    /// score product.
    pub fn normalizes(&self) -> bool {
        self.normalize
    }

    /// Attended stack merged along channels: `(B, 3C, Hp, Wp)`.
    pub fn layer_attention<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        stack: &LayerStack<'t, T>,
    ) -> Result<Var<'t, T>> {
        if stack.layer_shape()[1] != self.channels {
            return Err(Error::shape(format!(
                "layer attention built for {} channels, got {:?}",
                self.channels,
                stack.layer_shape()
            )));
        }
        let project = |convs: &[PointwiseConv]| -> Result<Var<'t, T>> {
            let parts = convs
                .iter()
                .zip(stack.layers())
                .map(|(conv, x)| conv.forward(p, x))
                .collect::<Result<Vec<_>>>()?;
            Var::concat_channels(&parts.iter().collect::<Vec<_>>())
        };
        let q = project(&self.query)?;
        let k = project(&self.key)?;
        let v = project(&self.value)?;
        Var::layer_attention(&q, &k, &v, p.get(self.alpha), LAYERS, self.normalize)
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        stack: &LayerStack<'t, T>,
        r_in: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        if r_in.shape() != stack.layer_shape() {
            return Err(Error::shape(format!(
                "residual input {:?} does not match layer shape {:?}",
                r_in.shape(),
                stack.layer_shape()
            )));
        }
        let attended = self.layer_attention(p, stack)?;
        self.project.forward(p, &attended)?.add(r_in)
    }
}

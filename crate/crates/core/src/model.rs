//! Full network: pad, decompose, correct the low band, refine the high bands
//! coarsest first, reconstruct, crop and clamp.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acem::{AcemConfig, AcemLevel};
use crate::autograd::{Tape, Var};
use crate::daft::{Daft, DaftConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::pyramid::{decompose, upsample, DEFAULT_DEPTH};
use crate::resample::Resample1d;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub pyramid_depth: usize,
    pub daft: DaftConfig,
    pub acem: AcemConfig,
    pub hcam_alpha_init: f64,
    /// L2-normalise flattened query/key layers before the score product.
    pub hcam_normalize: bool,
    /// Start every residual branch output projection at exactly zero.
    pub zero_init_heads: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            pyramid_depth: DEFAULT_DEPTH,
            daft: DaftConfig::default(),
            acem: AcemConfig::default(),
            hcam_alpha_init: 1.0,
            hcam_normalize: true,
            zero_init_heads: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_depth == 0 {
            return Err(Error::Config("pyramid_depth must be at least 1".into()));
        }
        if !(self.hcam_alpha_init > 0.0) {
            return Err(Error::Config("hcam_alpha_init must be positive".into()));
        }
        self.daft.validate()?;
        self.acem.validate()
    }

    /// Padded sides are multiples of this.
    pub fn size_multiple(&self) -> usize {
        (1usize << self.pyramid_depth) * self.daft.patch_size
    }
}

#[derive(Clone, Debug)]
pub struct DeVigNet<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    daft: Daft,
    /// One refinement per pyramid level, finest first.
    levels: Vec<AcemLevel>,
}

impl<T: Scalar> DeVigNet<T> {
    /// Builds the network with weights drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let daft = Daft::new(&mut pb.pp("daft"), &config.daft, config.hcam_alpha_init, config.hcam_normalize)?;
        let levels = (0..config.pyramid_depth)
            .map(|k| AcemLevel::new(&mut pb.pp(format!("acem.level{k}")), &config.acem))
            .collect::<Result<Vec<_>>>()?;
        if config.zero_init_heads {
            params.zero_residual_heads();
        }
        Ok(Self {
            config,
            params,
            daft,
            levels,
        })
    }

    /// Builds the network and replaces its weights with `weights`, which must
    /// hold exactly the same names and shapes.
    pub fn with_params(config: ModelConfig, weights: &ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config)?;
        model.params.load_from(weights)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn daft(&self) -> &Daft {
        &self.daft
    }

    pub fn levels(&self) -> &[AcemLevel] {
        &self.levels
    }

    pub fn check_size(&self, height: usize, width: usize) -> Result<()> {
        let m = self.config.size_multiple();
        if height < m || width < m {
            return Err(Error::Sizing {
                height,
                width,
                min_height: m,
                min_width: m,
            });
        }
        Ok(())
    }

    /// Forward pass on a `(B, 3, H, W)` batch recorded on `p`'s tape.
    pub fn forward_var<'t>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (_, c, h, w) = x.value().dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3 input channels, got {c}")));
        }
        self.check_size(h, w)?;
        let m = self.config.size_multiple();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let mut padded = x.clone();
        if pw != w {
            padded = padded.resample(&Rc::new(Resample1d::reflect_pad(w, 0, pw - w)), 3)?;
        }
        if ph != h {
            padded = padded.resample(&Rc::new(Resample1d::reflect_pad(h, 0, ph - h)), 2)?;
        }

        let pyr = decompose(&padded, self.config.pyramid_depth)?;
        let mut running = self.daft.forward(p, &pyr.low)?;
        for (high, level) in pyr.highs.iter().zip(&self.levels).rev() {
            let context = upsample(&running)?;
            running = level.refine_highfreq(p, high, &context)?.add(&context)?;
        }

        if pw != w {
            running = running.resample(&Rc::new(Resample1d::crop(pw, 0, w)?), 3)?;
        }
        if ph != h {
            running = running.resample(&Rc::new(Resample1d::crop(ph, 0, h)?), 2)?;
        }
        Ok(running.clamp(T::zero(), T::one()))
    }

    pub fn forward_tensor(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let p = self.params.bind(&tape);
        let out = self.forward_var(&p, &tape.constant(x.clone()))?;
        Ok(out.to_tensor())
    }

    pub fn forward(&self, img: &Image<T>) -> Result<Image<T>> {
        Image::from_feature_map(&self.forward_tensor(&img.to_feature_map())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            daft: DaftConfig {
                channels: 8,
                heads: 2,
                pos_grid: 4,
                ..DaftConfig::default()
            },
            acem: AcemConfig {
                channels: 8,
                ..AcemConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_heads_give_identity_on_odd_sizes() {
        let model = DeVigNet::<f32>::new(ModelConfig {
            zero_init_heads: true,
            ..tiny()
        })
        .unwrap();
        let img = Image::from_fn(21, 35, |y, x, c| ((y * 7 + x * 3 + c) % 17) as f32 / 16.0).unwrap();
        let out = model.forward(&img).unwrap();
        assert_eq!(out.height(), 21);
        assert_eq!(out.width(), 35);
        let diff = out
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff < 1e-5, "max diff {diff}");
    }

    #[test]
    fn too_small_is_a_sizing_error() {
        let model = DeVigNet::<f32>::new(tiny()).unwrap();
        let img = Image::filled(12, 40, 0.5f32).unwrap();
        match model.forward(&img) {
            Err(Error::Sizing {
                min_height, min_width, ..
            }) => assert_eq!((min_height, min_width), (16, 16)),
            other => panic!("expected sizing error, got {other:?}"),
        }
    }
}

//! Dual aggregated fusion transformer for the low-frequency band.
//!
//! Patch tokens pass through four fusion transformers in sequence. A chain
//! of aggregation nodes fuses their outputs into three hierarchical features
//! which the layer-attention module combines; a pointwise head maps the
//! result back to pixels and adds it to the input band.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::hcam::{Hcam, LayerStack};
use crate::nn::{depth_to_space, repeat_batch, space_to_depth, ChannelLayerNorm, PointwiseConv};
use crate::params::{Bound, Init, ParamBuilder, ParamId};
use crate::resample::Resample1d;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BLOCK_COUNTS: [usize; 4] = [1, 2, 3, 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaftConfig {
    pub channels: usize,
    pub patch_size: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub block_counts: Vec<usize>,
    /// Side of the learned positional grid before resizing to the token grid.
    pub pos_grid: usize,
    pub enabled: bool,
}

impl Default for DaftConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            patch_size: 4,
            heads: 4,
            mlp_ratio: 2.0,
            block_counts: BLOCK_COUNTS.to_vec(),
            pos_grid: 16,
            enabled: true,
        }
    }
}

impl DaftConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return fail(format!(
                "daft.channels ({}) must be a positive multiple of daft.heads ({})",
                self.channels, self.heads
            ));
        }
        if self.block_counts != BLOCK_COUNTS {
            return fail(format!("daft.block_counts must be {:?}, got {:?}", BLOCK_COUNTS, self.block_counts));
        }
        if self.patch_size == 0 || self.pos_grid == 0 {
            return fail("daft.patch_size and daft.pos_grid must be positive".into());
        }
        if !(self.mlp_ratio > 0.0) || self.hidden_channels() == 0 {
            return fail(format!("daft.mlp_ratio {} gives an empty MLP", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn hidden_channels(&self) -> usize {
        (self.mlp_ratio * self.channels as f64).round() as usize
    }
}

/// Tokens of the low-frequency band, stored channel-first as
/// `(B, C, Hp, Wp)`.
#[derive(Clone, Debug)]
pub struct TokenGrid<'t, T: Scalar> {
    map: Var<'t, T>,
}

impl<'t, T: Scalar> TokenGrid<'t, T> {
    pub fn from_map(map: Var<'t, T>) -> Result<Self> {
        map.value().dims4()?;
        Ok(Self { map })
    }

    /// Builds a grid from `(B, Hp·Wp, C)` row-major tokens.
    pub fn from_tokens(tape: &'t Tape<T>, tokens: &Tensor<T>, grid: (usize, usize)) -> Result<Self> {
        let (b, n, c) = match tokens.shape() {
            &[b, n, c] => (b, n, c),
            s => return Err(Error::shape(format!("tokens must be (B, N, C), got {s:?}"))),
        };
        if grid.0 * grid.1 != n {
            return Err(Error::shape(format!("grid {grid:?} does not hold {n} tokens")));
        }
        let src = tokens.data();
        let map = Tensor::from_fn(vec![b, c, grid.0, grid.1], |i| {
            let (bi, rest) = (i / (c * n), i % (c * n));
            src[(bi * n + rest % n) * c + rest / n]
        });
        Ok(Self {
            map: tape.constant(map),
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        let s = self.map.shape();
        (s[2], s[3])
    }

    pub fn num_tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn channels(&self) -> usize {
        self.map.shape()[1]
    }

    pub fn as_map(&self) -> &Var<'t, T> {
        &self.map
    }

    pub fn into_map(self) -> Var<'t, T> {
        self.map
    }

    /// `(B, Hp·Wp, C)` copy of the tokens.
    pub fn tokens(&self) -> Tensor<T> {
        let s = self.map.shape();
        let (b, c, n) = (s[0], s[1], s[2] * s[3]);
        let src = self.map.value().data();
        Tensor::from_fn(vec![b, n, c], |i| {
            let (bi, rest) = (i / (n * c), i % (n * c));
            src[(bi * c + rest % c) * n + rest / c]
        })
    }
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub project: PointwiseConv,
    pub position: ParamId,
    patch: usize,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &DaftConfig) -> Self {
        let p = cfg.patch_size;
        Self {
            project: PointwiseConv::new(&mut pb.pp("project"), 3 * p * p, cfg.channels, true),
            position: pb.add(
                "position",
                &[1, cfg.channels, cfg.pos_grid, cfg.pos_grid],
                Init::Uniform(0.02),
            ),
            patch: p,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, low: &Var<'t, T>) -> Result<TokenGrid<'t, T>> {
        let patches = space_to_depth(low, self.patch)?;
        let tokens = self.project.forward(p, &patches)?;
        let (b, _, hp, wp) = tokens.value().dims4()?;
        let pos = p.get(self.position);
        let (gh, gw) = (pos.shape()[2], pos.shape()[3]);
        let mut pos = pos.clone();
        if gh != hp {
            pos = pos.resample(&Rc::new(Resample1d::bilinear(gh, hp)), 2)?;
        }
        if gw != wp {
            pos = pos.resample(&Rc::new(Resample1d::bilinear(gw, wp)), 3)?;
        }
        TokenGrid::from_map(tokens.add(&repeat_batch(&pos, b)?)?)
    }
}

/// Pre-norm transformer block: multi-head self-attention and a GELU MLP,
/// each on a residual branch.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: ChannelLayerNorm,
    pub qkv: PointwiseConv,
    pub attn_out: PointwiseConv,
    pub norm2: ChannelLayerNorm,
    pub fc1: PointwiseConv,
    pub fc2: PointwiseConv,
    heads: usize,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &DaftConfig) -> Self {
        let c = cfg.channels;
        let hidden = cfg.hidden_channels();
        Self {
            norm1: ChannelLayerNorm::new(&mut pb.pp("norm1"), c),
            qkv: PointwiseConv::new(&mut pb.pp("qkv"), c, 3 * c, true),
            attn_out: PointwiseConv::head(&mut pb.pp("attn_out"), c, c),
            norm2: ChannelLayerNorm::new(&mut pb.pp("norm2"), c),
            fc1: PointwiseConv::new(&mut pb.pp("fc1"), c, hidden, true),
            fc2: PointwiseConv::head(&mut pb.pp("fc2"), hidden, c),
            heads: cfg.heads,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.norm1.forward(p, x)?;
        let y = self.qkv.forward(p, &y)?.multi_head_attention(self.heads)?;
        let x = self.attn_out.forward(p, &y)?.add(x)?;
        let y = self.norm2.forward(p, &x)?;
        let y = self.fc1.forward(p, &y)?.gelu();
        self.fc2.forward(p, &y)?.add(&x)
    }
}

/// Two stacks of `n` transformer blocks; returns `m2(m1(x)) + m1(x)`.
#[derive(Clone, Debug)]
pub struct FusionTransformer {
    pub first: Vec<TransformerBlock>,
    pub second: Vec<TransformerBlock>,
}

impl FusionTransformer {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &DaftConfig, n_blocks: usize) -> Result<Self> {
        if !(1..=4).contains(&n_blocks) {
            return Err(Error::Config(format!("fusion transformer needs 1..=4 blocks, got {n_blocks}")));
        }
        let stack = |pb: &mut ParamBuilder<'_, T>, name: &str| {
            (0..n_blocks)
                .map(|i| TransformerBlock::new(&mut pb.pp(format!("{name}.{i}")), cfg))
                .collect()
        };
        Ok(Self {
            first: stack(pb, "m1"),
            second: stack(pb, "m2"),
        })
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let run = |blocks: &[TransformerBlock], x: &Var<'t, T>| {
            blocks.iter().try_fold(x.clone(), |h, blk| blk.forward(p, &h))
        };
        let m1 = run(&self.first, x)?;
        run(&self.second, &m1)?.add(&m1)
    }
}

/// Concatenates two features and projects back to `C` channels.
#[derive(Clone, Debug)]
pub struct AggregationNode {
    pub project: PointwiseConv,
}

impl AggregationNode {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Self {
        Self {
            project: PointwiseConv::new(&mut pb.pp("project"), 2 * channels, channels, true),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, a: &Var<'t, T>, b: &Var<'t, T>) -> Result<Var<'t, T>> {
        if a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "aggregation inputs differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        self.project.forward(p, &Var::concat_channels(&[a, b])?)
    }
}

#[derive(Clone, Debug)]
pub struct Daft {
    pub embed: PatchEmbed,
    pub transformers: Vec<FusionTransformer>,
    pub aggregators: Vec<AggregationNode>,
    pub hcam: Hcam,
    /// Maps each token to the `3·P²` pixels of its patch.
    pub head: PointwiseConv,
    patch: usize,
    enabled: bool,
}

impl Daft {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        cfg: &DaftConfig,
        hcam_alpha_init: f64,
        hcam_normalize: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let p = cfg.patch_size;
        let embed = PatchEmbed::new(&mut pb.pp("embed"), cfg);
        let transformers = cfg
            .block_counts
            .iter()
            .enumerate()
            .map(|(i, &n)| FusionTransformer::new(&mut pb.pp(format!("ft{}", i + 1)), cfg, n))
            .collect::<Result<Vec<_>>>()?;
        let aggregators = (1..=3)
            .map(|i| AggregationNode::new(&mut pb.pp(format!("agg{i}")), c))
            .collect();
        Ok(Self {
            embed,
            transformers,
            aggregators,
            hcam: Hcam::new(&mut pb.pp("hcam"), c, hcam_alpha_init, hcam_normalize)?,
            head: PointwiseConv::head(&mut pb.pp("head"), c, 3 * p * p),
            patch: p,
            enabled: cfg.enabled,
        })
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    /// The three aggregated features fed to layer attention.
    pub fn aggregate<'t, T: Scalar>(&self, p: &Bound<'t, T>, tokens: &TokenGrid<'t, T>) -> Result<LayerStack<'t, T>> {
        let mut feats = Vec::with_capacity(self.transformers.len());
        let mut x = tokens.as_map().clone();
        for ft in &self.transformers {
            x = ft.forward(p, &x)?;
            feats.push(x.clone());
        }
        let mut agg = feats[0].clone();
        let mut out = Vec::with_capacity(3);
        for (node, f) in self.aggregators.iter().zip(&feats[1..]) {
            agg = node.forward(p, &agg, f)?;
            out.push(agg.clone());
        }
        LayerStack::new(out)
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, low: &Var<'t, T>) -> Result<Var<'t, T>> {
        if !self.enabled {
            return Ok(low.clone());
        }
        let tokens = self.embed.forward(p, low)?;
        let stack = self.aggregate(p, &tokens)?;
        let r_in = stack.layers()[2].clone();
        let fused = self.hcam.forward(p, &stack, &r_in)?;
        let pixels = depth_to_space(&self.head.forward(p, &fused)?, self.patch)?;
        pixels.add(low)
    }
}

//! Parameterized maps: feature extractor, conditional generator, feature-space
//! discriminator, and the small classifier zoo used for evaluation.

use gencond_tensor::{prefixed, Graph, Module, Param, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::EmbedMode;
use crate::data::ImageShape;
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Fully connected layer, `y = x W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Self {
            w: Param::new(Tensor::uniform(rng, [input, output], bound)),
            b: Param::new(Tensor::uniform(rng, [output], bound)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>) -> Var<'g> {
        x.matmul(g.param(&self.w)).add(g.param(&self.b))
    }
}

impl Module for Linear {
    fn named_params(&self) -> Vec<(String, &Param)> {
        vec![("w".into(), &self.w), ("b".into(), &self.b)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![("w".into(), &mut self.w), ("b".into(), &mut self.b)]
    }
}

/// 3x3 convolution, stride 1, padding 1.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub w: Param,
    pub b: Param,
}

impl Conv3x3 {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize) -> Self {
        let bound = 1.0 / ((input * 9) as f64).sqrt();
        Self {
            w: Param::new(Tensor::uniform(rng, [output, input, 3, 3], bound)),
            b: Param::new(Tensor::uniform(rng, [output], bound)),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>) -> Var<'g> {
        x.conv2d(g.param(&self.w), Some(g.param(&self.b)), 1)
    }
}

impl Module for Conv3x3 {
    fn named_params(&self) -> Vec<(String, &Param)> {
        vec![("w".into(), &self.w), ("b".into(), &self.b)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![("w".into(), &mut self.w), ("b".into(), &mut self.b)]
    }
}

/// Per-channel learned scale and shift.
#[derive(Clone, Debug)]
pub struct Affine {
    pub gamma: Param,
    pub beta: Param,
}

impl Affine {
    fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::ones([channels])),
            beta: Param::new(Tensor::zeros([channels])),
        }
    }

    fn apply<'g>(&self, g: &'g Graph, x: Var<'g>) -> Var<'g> {
        let c = self.gamma.numel();
        let gamma = g.param(&self.gamma).reshape([1, c, 1, 1]);
        let beta = g.param(&self.beta).reshape([1, c, 1, 1]);
        x.mul(gamma).add(beta)
    }
}

impl Module for Affine {
    fn named_params(&self) -> Vec<(String, &Param)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![("gamma".into(), &mut self.gamma), ("beta".into(), &mut self.beta)]
    }
}

/// Normalizes `x` over `axes` with biased variance. Returns the normalized
/// tensor together with the mean and variance values.
fn standardize<'g>(x: Var<'g>, axes: &[usize]) -> (Var<'g>, Var<'g>, Var<'g>) {
    let mean = x.mean_axes(axes);
    let centered = x.sub(mean);
    let var = centered.square().mean_axes(axes);
    let y = centered.div(var.add_scalar(NORM_EPS).sqrt());
    (y, mean, var)
}

/// Instance normalization with learned affine.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub affine: Affine,
}

impl InstanceNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            affine: Affine::new(channels),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>) -> Var<'g> {
        let (y, _, _) = standardize(x, &[2, 3]);
        self.affine.apply(g, y)
    }
}

impl Module for InstanceNorm {
    fn named_params(&self) -> Vec<(String, &Param)> {
        self.affine.named_params()
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.affine.named_params_mut()
    }
}

/// Batch statistics observed during a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
    pub count: usize,
}

/// Batch normalization with learned affine and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub affine: Affine,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            affine: Affine::new(channels),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::ones([channels]),
        }
    }

    /// Training mode normalizes with batch statistics and reports them;
    /// inference mode uses the running estimates.
    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>, train: bool) -> (Var<'g>, Option<BatchStats>) {
        let s = x.shape();
        let c = s[1];
        if train {
            let (y, mean, var) = standardize(x, &[0, 2, 3]);
            let stats = BatchStats {
                mean: mean.value().clone().reshape([c]),
                var: var.value().clone().reshape([c]),
                count: s[0] * s[2] * s[3],
            };
            (self.affine.apply(g, y), Some(stats))
        } else {
            let mean = g.constant(self.running_mean.clone().reshape([1, c, 1, 1]));
            let inv = self.running_var.map(|v| 1.0 / (v + NORM_EPS).sqrt());
            let inv = g.constant(inv.reshape([1, c, 1, 1]));
            (self.affine.apply(g, x.sub(mean).mul(inv)), None)
        }
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let unbias = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        self.running_mean.scale(1.0 - BN_MOMENTUM);
        self.running_mean.axpy(BN_MOMENTUM, &stats.mean);
        self.running_var.scale(1.0 - BN_MOMENTUM);
        self.running_var.axpy(BN_MOMENTUM * unbias, &stats.var);
    }
}

impl Module for BatchNorm {
    fn named_params(&self) -> Vec<(String, &Param)> {
        self.affine.named_params()
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.affine.named_params_mut()
    }

    fn named_buffers(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("running_mean".into(), &self.running_mean),
            ("running_var".into(), &self.running_var),
        ]
    }

    fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("running_mean".into(), &mut self.running_mean),
            ("running_var".into(), &mut self.running_var),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureNetConfig {
    pub image: ImageShape,
    /// Channels per block.
    pub width: usize,
    /// Number of conv blocks.
    pub depth: usize,
    pub num_classes: usize,
}

impl FeatureNetConfig {
    /// Spatial size after each block (floor pooling).
    pub fn block_sizes(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.image.height, self.image.width);
        (0..self.depth)
            .map(|_| {
                h /= 2;
                w /= 2;
                (h, w)
            })
            .collect()
    }

    /// Width of the flattened last-block output.
    pub fn feature_dim(&self) -> usize {
        let (h, w) = self.block_sizes().last().copied().unwrap_or((self.image.height, self.image.width));
        self.width * h * w
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 {
            return Err(Error::Config("feature net needs depth >= 1 and width >= 1".into()));
        }
        if self.block_sizes().last().is_some_and(|&(h, w)| h == 0 || w == 0) {
            return Err(Error::Config(format!(
                "{}x{} input is too small for {} pooling blocks",
                self.image.height, self.image.width, self.depth
            )));
        }
        Ok(())
    }
}

/// Output of one [`FeatureNet`] pass.
pub struct FeatureOutput<'g> {
    /// One tensor per block, `[B, width, h_l, w_l]`.
    pub layers: Vec<Var<'g>>,
    /// Flattened last block, `[B, F]`.
    pub feature: Var<'g>,
    pub logits: Var<'g>,
}

/// ConvNet feature extractor: blocks of conv, instance norm, ReLU and 2x2
/// average pooling, followed by a linear classifier head.
#[derive(Clone, Debug)]
pub struct FeatureNet {
    pub config: FeatureNetConfig,
    pub convs: Vec<Conv3x3>,
    pub norms: Vec<InstanceNorm>,
    pub head: Linear,
}

impl FeatureNet {
    pub fn new<R: Rng + ?Sized>(config: FeatureNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::with_capacity(config.depth);
        let mut norms = Vec::with_capacity(config.depth);
        let mut cin = config.image.channels;
        for _ in 0..config.depth {
            convs.push(Conv3x3::new(rng, cin, config.width));
            norms.push(InstanceNorm::new(config.width));
            cin = config.width;
        }
        let head = Linear::new(rng, config.feature_dim(), config.num_classes);
        Ok(Self {
            config,
            convs,
            norms,
            head,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let im = self.config.image;
        if shape.len() != 4 || shape[1] != im.channels || shape[2] != im.height || shape[3] != im.width {
            return Err(Error::Shape(format!(
                "feature net expects [B, {}, {}, {}], got {shape:?}",
                im.channels, im.height, im.width
            )));
        }
        Ok(())
    }

    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<FeatureOutput<'g>> {
        self.check_input(&x.shape())?;
        let batch = x.shape()[0];
        let mut h = x;
        let mut layers = Vec::with_capacity(self.config.depth);
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = norm.forward(g, conv.forward(g, h)).relu().avg_pool2();
            layers.push(h);
        }
        let feature = h.reshape([batch, self.feature_dim()]);
        let logits = self.head.forward(g, feature);
        Ok(FeatureOutput {
            layers,
            feature,
            logits,
        })
    }

    /// Spatial mean of the last (lowest-resolution) block, `[B, width]`.
    pub fn pooled_last<'g>(&self, out: &FeatureOutput<'g>) -> Var<'g> {
        let last = *out.layers.last().expect("depth >= 1");
        let s = last.shape();
        last.mean_axes(&[2, 3]).reshape([s[0], s[1]])
    }

    /// Inference over a large image tensor in chunks, returning
    /// `(final features, pooled last-block features, logits)` values.
    pub fn infer(&self, images: &Tensor, chunk: usize) -> Result<(Tensor, Tensor, Tensor)> {
        self.check_input(images.shape())?;
        let n = images.dim(0);
        let (mut feats, mut pooled, mut logits) = (Vec::new(), Vec::new(), Vec::new());
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let g = Graph::new();
            let x = g.constant(images.select_rows(&idx));
            let out = self.forward(&g, x)?;
            feats.extend_from_slice(out.feature.value().data());
            pooled.extend_from_slice(self.pooled_last(&out).value().data());
            logits.extend_from_slice(out.logits.value().data());
            start = end;
        }
        Ok((
            Tensor::new([n, self.feature_dim()], feats),
            Tensor::new([n, self.config.width], pooled),
            Tensor::new([n, self.config.num_classes], logits),
        ))
    }
}

impl Module for FeatureNet {
    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for (i, (c, n)) in self.convs.iter().zip(&self.norms).enumerate() {
            out.extend(prefixed(&format!("blocks.{i}.conv"), c.named_params()));
            out.extend(prefixed(&format!("blocks.{i}.norm"), n.named_params()));
        }
        out.extend(prefixed("head", self.head.named_params()));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (i, (c, n)) in self.convs.iter_mut().zip(self.norms.iter_mut()).enumerate() {
            out.extend(prefixed(&format!("blocks.{i}.conv"), c.named_params_mut()));
            out.extend(prefixed(&format!("blocks.{i}.norm"), n.named_params_mut()));
        }
        out.extend(prefixed("head", self.head.named_params_mut()));
        out
    }
}

/// Number of generator upsampling blocks for an image size: 3 for 32 px, 4
/// for 64 px, otherwise the most halvings (at most 4) that leave an integer
/// base of at least 4 pixels.
pub fn default_generator_blocks(height: usize, width: usize) -> usize {
    match (height, width) {
        (32, 32) => 3,
        (64, 64) => 4,
        _ => (0..=4)
            .rev()
            .find(|&b| {
                let f = 1 << b;
                height % f == 0 && width % f == 0 && height / f >= 4 && width / f >= 4
            })
            .unwrap_or(0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub image: ImageShape,
    /// Width `C` of a code; the generator input is `2C` wide.
    pub latent_dim: usize,
    pub width: usize,
    pub blocks: usize,
}

impl GeneratorConfig {
    pub fn base(&self) -> (usize, usize) {
        (self.image.height >> self.blocks, self.image.width >> self.blocks)
    }

    pub fn validate(&self) -> Result<()> {
        let (bh, bw) = self.base();
        if bh == 0 || bw == 0 || bh << self.blocks != self.image.height || bw << self.blocks != self.image.width {
            return Err(Error::Config(format!(
                "{}x{} output is not reachable with {} doubling blocks",
                self.image.height, self.image.width, self.blocks
            )));
        }
        if self.latent_dim == 0 || self.width == 0 {
            return Err(Error::Config("generator widths must be positive".into()));
        }
        Ok(())
    }

    /// Learnable parameter count (excludes batch-norm running statistics).
    pub fn param_count(&self) -> u64 {
        let (bh, bw) = self.base();
        let (c, w) = (self.latent_dim as u64, self.width as u64);
        let base = (w * bh as u64 * bw as u64) as u64;
        let proj = 2 * c * base + base;
        let block = 2 * (w * w * 9 + w) + 2 * (2 * w);
        let img = self.image.channels as u64;
        proj + self.blocks as u64 * block + img * w * 9 + img
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorBlock {
    pub conv1: Conv3x3,
    pub bn1: BatchNorm,
    pub conv2: Conv3x3,
    pub bn2: BatchNorm,
}

impl Module for GeneratorBlock {
    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = prefixed("conv1", self.conv1.named_params());
        out.extend(prefixed("bn1", self.bn1.named_params()));
        out.extend(prefixed("conv2", self.conv2.named_params()));
        out.extend(prefixed("bn2", self.bn2.named_params()));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = prefixed("conv1", self.conv1.named_params_mut());
        out.extend(prefixed("bn1", self.bn1.named_params_mut()));
        out.extend(prefixed("conv2", self.conv2.named_params_mut()));
        out.extend(prefixed("bn2", self.bn2.named_params_mut()));
        out
    }

    fn named_buffers(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("bn1", self.bn1.named_buffers());
        out.extend(prefixed("bn2", self.bn2.named_buffers()));
        out
    }

    fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = prefixed("bn1", self.bn1.named_buffers_mut());
        out.extend(prefixed("bn2", self.bn2.named_buffers_mut()));
        out
    }
}

/// Conditional generator: a linear map to a low-resolution tensor, then
/// blocks of two (ReLU, conv, batch norm) stages each followed by 2x
/// nearest upsampling, and a tanh-bounded 3x3 conv to image channels.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub input_proj: Linear,
    pub blocks: Vec<GeneratorBlock>,
    pub out: Conv3x3,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (bh, bw) = config.base();
        let input_proj = Linear::new(rng, 2 * config.latent_dim, config.width * bh * bw);
        let blocks = (0..config.blocks)
            .map(|_| GeneratorBlock {
                conv1: Conv3x3::new(rng, config.width, config.width),
                bn1: BatchNorm::new(config.width),
                conv2: Conv3x3::new(rng, config.width, config.width),
                bn2: BatchNorm::new(config.width),
            })
            .collect();
        let out = Conv3x3::new(rng, config.width, config.image.channels);
        Ok(Self {
            config,
            input_proj,
            blocks,
            out,
        })
    }

    /// Maps `[B, 2C]` inputs to `[B, C_img, H, W]` images in `[-1, 1]`.
    /// In training mode the per-layer batch statistics are returned so the
    /// caller can fold them into the running estimates.
    pub fn forward<'g>(&self, g: &'g Graph, input: Var<'g>, train: bool) -> Result<(Var<'g>, Vec<BatchStats>)> {
        let s = input.shape();
        if s.len() != 2 || s[1] != 2 * self.config.latent_dim {
            return Err(Error::Shape(format!(
                "generator expects [B, {}], got {s:?}",
                2 * self.config.latent_dim
            )));
        }
        let (bh, bw) = self.config.base();
        let mut h = self
            .input_proj
            .forward(g, input)
            .reshape([s[0], self.config.width, bh, bw]);
        let mut stats = Vec::new();
        for block in &self.blocks {
            for (conv, bn) in [(&block.conv1, &block.bn1), (&block.conv2, &block.bn2)] {
                let (y, st) = bn.forward(g, conv.forward(g, h.relu()), train);
                h = y;
                stats.extend(st);
            }
            h = h.upsample2();
        }
        Ok((self.out.forward(g, h).tanh(), stats))
    }

    pub fn update_running(&mut self, stats: &[BatchStats]) {
        let bns = self.blocks.iter_mut().flat_map(|b| [&mut b.bn1, &mut b.bn2]);
        for (bn, st) in bns.zip(stats) {
            bn.update_running(st);
        }
    }

    /// Training-mode forward that also updates the running statistics.
    pub fn forward_train<'g>(&mut self, g: &'g Graph, input: Var<'g>) -> Result<Var<'g>> {
        let (y, stats) = self.forward(g, input, true)?;
        self.update_running(&stats);
        Ok(y)
    }
}

impl Module for Generator {
    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = prefixed("input_proj", self.input_proj.named_params());
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(prefixed(&format!("blocks.{i}"), b.named_params()));
        }
        out.extend(prefixed("out", self.out.named_params()));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = prefixed("input_proj", self.input_proj.named_params_mut());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(prefixed(&format!("blocks.{i}"), b.named_params_mut()));
        }
        out.extend(prefixed("out", self.out.named_params_mut()));
        out
    }

    fn named_buffers(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(prefixed(&format!("blocks.{i}"), b.named_buffers()));
        }
        out
    }

    fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(prefixed(&format!("blocks.{i}"), b.named_buffers_mut()));
        }
        out
    }
}

/// MLP over `[feature ; class embedding]` ending in a sigmoid.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub layers: Vec<Linear>,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, embed_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut dims = vec![feature_dim + embed_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let layers = dims.windows(2).map(|w| Linear::new(rng, w[0], w[1])).collect();
        Self {
            feature_dim,
            embed_dim,
            layers,
        }
    }

    /// Probabilities in `(0, 1)`, shape `[B]`.
    pub fn forward<'g>(&self, g: &'g Graph, features: Var<'g>, embeds: Var<'g>) -> Result<Var<'g>> {
        let (fs, es) = (features.shape(), embeds.shape());
        if fs.len() != 2 || es.len() != 2 || fs[1] != self.feature_dim || es[1] != self.embed_dim || fs[0] != es[0] {
            return Err(Error::Shape(format!(
                "discriminator expects [B, {}] and [B, {}], got {fs:?} and {es:?}",
                self.feature_dim, self.embed_dim
            )));
        }
        let mut h = g.concat(&[features, embeds], 1);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h);
            if i < last {
                h = h.relu();
            }
        }
        Ok(h.sigmoid().reshape([fs[0]]))
    }
}

impl Module for Discriminator {
    fn named_params(&self) -> Vec<(String, &Param)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("layers.{i}"), l.named_params()))
            .collect()
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("layers.{i}"), l.named_params_mut()))
            .collect()
    }
}

/// Two-hidden-layer perceptron classifier over flattened images.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub image: ImageShape,
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(image: ImageShape, hidden: usize, num_classes: usize, rng: &mut R) -> Self {
        let layers = vec![
            Linear::new(rng, image.numel(), hidden),
            Linear::new(rng, hidden, hidden),
            Linear::new(rng, hidden, num_classes),
        ];
        Self { image, layers }
    }

    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>) -> Var<'g> {
        let b = x.shape()[0];
        let mut h = x.reshape([b, self.image.numel()]);
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h);
            if i + 1 < self.layers.len() {
                h = h.relu();
            }
        }
        h
    }
}

impl Module for Mlp {
    fn named_params(&self) -> Vec<(String, &Param)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("layers.{i}"), l.named_params()))
            .collect()
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("layers.{i}"), l.named_params_mut()))
            .collect()
    }
}

/// Evaluation architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    ConvNet { depth: usize },
    Mlp,
}

impl Arch {
    pub fn name(&self) -> String {
        match self {
            Arch::ConvNet { depth } => format!("convnet{depth}"),
            Arch::Mlp => "mlp".into(),
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convnet" | "convnet3" => Ok(Arch::ConvNet { depth: 3 }),
            "convnet2" => Ok(Arch::ConvNet { depth: 2 }),
            "convnet4" => Ok(Arch::ConvNet { depth: 4 }),
            "mlp" => Ok(Arch::Mlp),
            other => Err(Error::Argument(format!(
                "unknown architecture `{other}` (expected convnet2, convnet3, convnet4 or mlp)"
            ))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

/// Anything mapping an image batch to class logits.
pub trait ImageClassifier: Module {
    fn logits<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>>;
}

impl ImageClassifier for FeatureNet {
    fn logits<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        Ok(self.forward(g, x)?.logits)
    }
}

impl ImageClassifier for Mlp {
    fn logits<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != [self.image.channels, self.image.height, self.image.width] {
            return Err(Error::Shape(format!("mlp expects [B, {:?}], got {s:?}", self.image)));
        }
        Ok(self.forward(g, x))
    }
}

/// A freshly initializable image classifier from the zoo.
#[derive(Clone, Debug)]
pub enum Classifier {
    ConvNet(FeatureNet),
    Mlp(Mlp),
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(arch: Arch, image: ImageShape, num_classes: usize, width: usize, rng: &mut R) -> Result<Self> {
        Ok(match arch {
            Arch::ConvNet { depth } => Classifier::ConvNet(FeatureNet::new(
                FeatureNetConfig {
                    image,
                    width,
                    depth,
                    num_classes,
                },
                rng,
            )?),
            Arch::Mlp => Classifier::Mlp(Mlp::new(image, 128, num_classes, rng)),
        })
    }

}

impl ImageClassifier for Classifier {
    fn logits<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        match self {
            Classifier::ConvNet(net) => net.logits(g, x),
            Classifier::Mlp(m) => m.logits(g, x),
        }
    }
}

impl Module for Classifier {
    fn named_params(&self) -> Vec<(String, &Param)> {
        match self {
            Classifier::ConvNet(n) => n.named_params(),
            Classifier::Mlp(m) => m.named_params(),
        }
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        match self {
            Classifier::ConvNet(n) => n.named_params_mut(),
            Classifier::Mlp(m) => m.named_params_mut(),
        }
    }
}

/// How a condensed dataset is stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    /// Codebook plus generator plus class embeddings.
    Generative,
    /// Every synthetic pixel is a parameter.
    Pixel,
}

/// Architecture knobs that determine the generative format's size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerativeSize {
    pub latent_dim: usize,
    pub generator_width: usize,
    /// `None` picks [`default_generator_blocks`].
    pub generator_blocks: Option<usize>,
    pub embed_mode: EmbedMode,
    /// Channel width of the extractor's last block.
    pub feature_width: usize,
}

impl GenerativeSize {
    pub fn embed_dim(&self, num_classes: usize) -> usize {
        match self.embed_mode {
            EmbedMode::OneHot => num_classes,
            EmbedMode::ClassFeature | EmbedMode::Online => self.feature_width,
        }
    }
}

/// Scalar parameter count of a condensed dataset.
///
/// Pixel format: `ipc * classes * C * H * W`. Generative format:
/// codebook `ipc * C` + generator + embedding table `classes * E` +
/// projection `E * C + C`.
pub fn param_count(format: Format, num_classes: usize, ipc: usize, image: ImageShape, model: &GenerativeSize) -> u64 {
    match format {
        Format::Pixel => (ipc * num_classes) as u64 * image.numel() as u64,
        Format::Generative => {
            let c = model.latent_dim as u64;
            let e = model.embed_dim(num_classes) as u64;
            let gen = GeneratorConfig {
                image,
                latent_dim: model.latent_dim,
                width: model.generator_width,
                blocks: model
                    .generator_blocks
                    .unwrap_or_else(|| default_generator_blocks(image.height, image.width)),
            };
            ipc as u64 * c + gen.param_count() + num_classes as u64 * e + e * c + c
        }
    }
}

//! Backbones and the Deep Set Traversal Module (DSTM).
//!
//! For a support set `x_1..x_N` with backbone features `x_i`, the module computes
//!
//! ```text
//! P_N(i) = ∪_{j≠i} f_φ(x_j)          neighbourhood union (mean by default)
//! h_i    = f_θ([x_i ; P_N(i)])       channel concatenation
//! O      = f_λ(∪_i h_i)
//! M      = softmax_c(resize(O))
//! I(x)   = M ⊙ r(x)                  r = bias-free 1×1 projection + average-pool resize
//! ```
//!
//! and the same mask `M` is applied to the query and to every support element.
//! Without a DSTM the model is the plain backbone and embeddings are the
//! flattened feature maps.

mod layers;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_out_size, Graph, ParamStore, Real, SetPool, Tensor, Var};
use layers::{Block, Conv, ConvBn, Ctx, Residual};
pub use layers::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// conv + BN + ReLU + max-pool.
    Shallow,
    /// One conv-BN-ReLU-pool block per entry of `channels`.
    VggSmall,
    /// Strided conv stem with `channels[0]`, then one stride-2 residual block
    /// per further entry of `channels`.
    ResnetSmall,
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Shallow => "shallow",
            BackboneKind::VggSmall => "vgg_small",
            BackboneKind::ResnetSmall => "resnet_small",
        })
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shallow" => Ok(BackboneKind::Shallow),
            "vgg_small" => Ok(BackboneKind::VggSmall),
            "resnet_small" => Ok(BackboneKind::ResnetSmall),
            other => Err(Error::InvalidConfig(format!("unknown backbone `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub channels: Vec<usize>,
    /// Stride of the first convolution (shallow and ResNet stems).
    #[serde(default = "default_stem_stride")]
    pub stem_stride: usize,
}

fn default_stem_stride() -> usize {
    2
}

impl BackboneConfig {
    pub fn shallow(channels: usize) -> Self {
        Self { kind: BackboneKind::Shallow, channels: vec![channels], stem_stride: 2 }
    }

    pub fn vgg_small() -> Self {
        Self { kind: BackboneKind::VggSmall, channels: vec![64, 128, 256], stem_stride: 1 }
    }

    pub fn resnet_small() -> Self {
        Self { kind: BackboneKind::ResnetSmall, channels: vec![64, 128, 256], stem_stride: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DstmBlock {
    SingleLayer,
    ResidualBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DstmConfig {
    pub block: DstmBlock,
    /// Output channels of f_φ and f_θ.
    pub hidden: usize,
    /// Set union used for both the neighbourhood and the invariant pooling.
    #[serde(default = "default_union")]
    pub union: SetPool,
    pub mask_channels: usize,
    pub mask_size: usize,
}

fn default_union() -> SetPool {
    SetPool::Mean
}

impl DstmConfig {
    pub fn single_layer(hidden: usize, mask_channels: usize, mask_size: usize) -> Self {
        Self { block: DstmBlock::SingleLayer, hidden, union: SetPool::Mean, mask_channels, mask_size }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// `None` is the baseline: backbone features compared directly.
    pub dstm: Option<DstmConfig>,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_input_size() -> usize {
    112
}

fn default_bn_eps() -> f64 {
    1e-5
}

fn default_bn_momentum() -> f64 {
    0.1
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::shallow_dstm()
    }
}

impl ModelConfig {
    /// Shallow backbone (64 @ 28×28) with a single-layer DSTM and a 64 @ 14×14 mask.
    pub fn shallow_dstm() -> Self {
        Self {
            backbone: BackboneConfig::shallow(64),
            dstm: Some(DstmConfig::single_layer(64, 64, 14)),
            input_size: 112,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            init_seed: 0,
        }
    }

    pub fn baseline() -> Self {
        Self { dstm: None, ..Self::shallow_dstm() }
    }

    pub fn vgg_residual() -> Self {
        Self {
            backbone: BackboneConfig::vgg_small(),
            dstm: Some(DstmConfig { block: DstmBlock::ResidualBlock, ..DstmConfig::single_layer(64, 64, 14) }),
            ..Self::shallow_dstm()
        }
    }

    pub fn resnet_residual() -> Self {
        Self {
            backbone: BackboneConfig::resnet_small(),
            dstm: Some(DstmConfig { block: DstmBlock::ResidualBlock, ..DstmConfig::single_layer(64, 64, 14) }),
            ..Self::shallow_dstm()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Backbone output `[C, H, W]`.
    pub fn feature_shape(&self) -> Result<[usize; 3]> {
        let b = &self.backbone;
        let bad = |msg: String| Error::InvalidConfig(msg);
        if b.channels.is_empty() || b.channels.contains(&0) {
            return Err(bad("backbone channels must be nonempty and positive".into()));
        }
        let halve = |h: usize, what: &str| {
            if h % 2 != 0 {
                Err(bad(format!("{what}: spatial size {h} is not divisible by the 2×2 pool")))
            } else {
                Ok(h / 2)
            }
        };
        let conv = |h: usize, stride: usize| {
            conv_out_size(h, 3, stride, 1).ok_or_else(|| bad(format!("input {h} too small for the stem")))
        };
        let mut h = self.input_size;
        match b.kind {
            BackboneKind::Shallow => {
                if b.channels.len() != 1 {
                    return Err(bad("the shallow backbone takes exactly one channel count".into()));
                }
                h = halve(conv(h, b.stem_stride)?, "shallow pool")?;
            }
            BackboneKind::VggSmall => {
                for _ in &b.channels {
                    h = halve(conv(h, 1)?, "vgg pool")?;
                }
            }
            BackboneKind::ResnetSmall => {
                h = conv(h, b.stem_stride)?;
                for _ in 1..b.channels.len() {
                    h = conv(h, 2)?;
                }
            }
        }
        if h == 0 {
            return Err(bad("backbone reduces the image to nothing".into()));
        }
        Ok([*b.channels.last().expect("nonempty"), h, h])
    }

    /// Embedding length per image.
    pub fn embedding_shape(&self) -> Result<[usize; 3]> {
        let feat = self.feature_shape()?;
        Ok(match &self.dstm {
            Some(d) => [d.mask_channels, d.mask_size, d.mask_size],
            None => feat,
        })
    }

    pub fn embedding_len(&self) -> Result<usize> {
        Ok(self.embedding_shape()?.iter().product())
    }

    fn resize_factor(&self) -> Result<usize> {
        let [_, h, _] = self.feature_shape()?;
        let d = self.dstm.as_ref().ok_or_else(|| Error::InvalidConfig("model has no DSTM".into()))?;
        if d.mask_size == 0 || h % d.mask_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "mask size {} does not evenly divide the {h}×{h} feature map",
                d.mask_size
            )));
        }
        Ok(h / d.mask_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(Error::InvalidConfig("input_size must be positive".into()));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::InvalidConfig("bn_eps must be positive and bn_momentum in [0, 1]".into()));
        }
        self.feature_shape()?;
        if let Some(d) = &self.dstm {
            if d.hidden == 0 || d.mask_channels == 0 {
                return Err(Error::InvalidConfig("DSTM channel counts must be positive".into()));
            }
            self.resize_factor()?;
        }
        Ok(())
    }

    /// Per-stage output shapes, as printed by `model-info`.
    pub fn shape_table(&self) -> Result<Vec<(String, [usize; 3])>> {
        let s = self.input_size;
        let feat = self.feature_shape()?;
        let mut rows = vec![("input".to_string(), [3, s, s]), (format!("backbone ({})", self.backbone.kind), feat)];
        if let Some(d) = &self.dstm {
            let [_, h, w] = feat;
            let m = d.mask_size;
            rows.push(("f_phi (per support element)".into(), [d.hidden, h, w]));
            rows.push(("neighbourhood union P_N(i)".into(), [d.hidden, h, w]));
            rows.push(("f_theta input [x_i ; P_N(i)]".into(), [feat[0] + d.hidden, h, w]));
            rows.push(("h_i".into(), [d.hidden, h, w]));
            rows.push(("set union of h".into(), [d.hidden, h, w]));
            rows.push(("f_lambda".into(), [d.mask_channels, h, w]));
            rows.push(("mask M (channel softmax)".into(), [d.mask_channels, m, m]));
            rows.push(("reshaper r(x)".into(), [d.mask_channels, m, m]));
        }
        rows.push(("embedding".into(), self.embedding_shape()?));
        Ok(rows)
    }
}

enum Backbone {
    Shallow(ConvBn),
    Vgg(Vec<ConvBn>),
    Resnet { stem: ConvBn, stages: Vec<Residual> },
}

struct Dstm {
    phi: Block,
    theta: Block,
    lambda: Block,
    reshaper: Conv,
    resize: usize,
    union: SetPool,
}

/// Graph handles for a batch of episodes.
pub struct EpisodeVars {
    /// `[B, C′, H′, W′]` embeddings, one per episode.
    pub query: Var,
    /// `[B·N, C′, H′, W′]` embeddings, episode-major.
    pub support: Var,
    /// `[B, C′, H′, W′]`; absent for the baseline.
    pub mask: Option<Var>,
    /// `[B·N, hidden, H, W]` equivariant features; absent for the baseline.
    pub h: Option<Var>,
}

pub struct Model<T: Real> {
    config: ModelConfig,
    params: ParamStore<T>,
    backbone: Backbone,
    dstm: Option<Dstm>,
}

fn block<T: Real>(
    kind: DstmBlock,
    store: &mut ParamStore<T>,
    name: &str,
    (cin, cout): (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<Block> {
    Ok(match kind {
        DstmBlock::SingleLayer => Block::Single(ConvBn::new(store, name, (cin, cout, 3), 1, true, rng)?),
        DstmBlock::ResidualBlock => Block::Residual(Residual::new(store, name, (cin, cout), 1, rng)?),
    })
}

impl<T: Real> Model<T> {
    /// Builds a model with freshly initialised weights from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let b = &config.backbone;
        let backbone = match b.kind {
            BackboneKind::Shallow => {
                Backbone::Shallow(ConvBn::new(&mut store, "backbone.conv", (3, b.channels[0], 3), b.stem_stride, true, &mut rng)?)
            }
            BackboneKind::VggSmall => {
                let mut cin = 3;
                let mut blocks = Vec::new();
                for (i, &c) in b.channels.iter().enumerate() {
                    blocks.push(ConvBn::new(&mut store, &format!("backbone.block{i}"), (cin, c, 3), 1, true, &mut rng)?);
                    cin = c;
                }
                Backbone::Vgg(blocks)
            }
            BackboneKind::ResnetSmall => {
                let stem = ConvBn::new(&mut store, "backbone.stem", (3, b.channels[0], 3), b.stem_stride, true, &mut rng)?;
                let mut stages = Vec::new();
                for i in 1..b.channels.len() {
                    let dims = (b.channels[i - 1], b.channels[i]);
                    stages.push(Residual::new(&mut store, &format!("backbone.stage{i}"), dims, 2, &mut rng)?);
                }
                Backbone::Resnet { stem, stages }
            }
        };
        let dstm = match &config.dstm {
            None => None,
            Some(d) => {
                let [c, _, _] = config.feature_shape()?;
                Some(Dstm {
                    phi: block(d.block, &mut store, "dstm.f_phi", (c, d.hidden), &mut rng)?,
                    theta: block(d.block, &mut store, "dstm.f_theta", (c + d.hidden, d.hidden), &mut rng)?,
                    lambda: block(d.block, &mut store, "dstm.f_lambda", (d.hidden, d.mask_channels), &mut rng)?,
                    reshaper: Conv::new(&mut store, "dstm.reshaper", (c, d.mask_channels, 1), 1, false, &mut rng)?,
                    resize: config.resize_factor()?,
                    union: d.union,
                })
            }
        };
        Ok(Self { config, params: store, backbone, dstm })
    }

    /// Builds the architecture for `config` and loads `params` into it.
    pub fn with_params(config: ModelConfig, params: &ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config)?;
        model.params.load_from(params)?;
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

    pub fn has_dstm(&self) -> bool {
        self.dstm.is_some()
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<usize> {
        let s = self.config.input_size;
        match images.shape() {
            [n, 3, h, w] if *h == s && *w == s && *n > 0 => Ok(*n),
            other => Err(Error::Shape(format!("expected images of shape [B, 3, {s}, {s}], got {other:?}"))),
        }
    }

    fn backbone_vars(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match &self.backbone {
            Backbone::Shallow(layer) => {
                let y = layer.forward(cx, x)?;
                cx.graph.max_pool2d(y, 2)
            }
            Backbone::Vgg(blocks) => {
                let mut y = x;
                for b in blocks {
                    y = b.forward(cx, y)?;
                    y = cx.graph.max_pool2d(y, 2)?;
                }
                Ok(y)
            }
            Backbone::Resnet { stem, stages } => {
                let mut y = stem.forward(cx, x)?;
                for s in stages {
                    y = s.forward(cx, y)?;
                }
                Ok(y)
            }
        }
    }

    fn dstm(&self) -> Result<&Dstm> {
        self.dstm
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("the baseline model has no DSTM".into()))
    }

    fn neighbor_vars(&self, cx: &mut Ctx<'_, T>, feats: Var, n: usize) -> Result<Var> {
        let d = self.dstm()?;
        let phi = d.phi.forward(cx, feats)?;
        cx.graph.set_pool_excluding(phi, n, d.union)
    }

    fn equivariant_vars(&self, cx: &mut Ctx<'_, T>, feats: Var, n: usize) -> Result<Var> {
        let union = self.neighbor_vars(cx, feats, n)?;
        let joined = cx.graph.concat_channels(feats, union)?;
        self.dstm()?.theta.forward(cx, joined)
    }

    fn invariant_vars(&self, cx: &mut Ctx<'_, T>, h: Var, n: usize) -> Result<Var> {
        let d = self.dstm()?;
        let pooled = cx.graph.set_pool(h, n, d.union)?;
        let o = d.lambda.forward(cx, pooled)?;
        let o = cx.graph.avg_pool2d(o, d.resize)?;
        cx.graph.channel_softmax(o)
    }

    fn reshape_vars(&self, cx: &mut Ctx<'_, T>, feats: Var) -> Result<Var> {
        let d = self.dstm()?;
        let r = d.reshaper.forward(cx, feats)?;
        cx.graph.avg_pool2d(r, d.resize)
    }

    /// Records the forward pass for `B` episodes: `query` is `[B, 3, S, S]` and
    /// `support` is `[B·n, 3, S, S]`, episode-major.
    pub fn forward(
        &self,
        graph: &mut Graph<T>,
        mode: Mode,
        query: &Tensor<T>,
        support: &Tensor<T>,
        n: usize,
    ) -> Result<EpisodeVars> {
        let b = self.check_images(query)?;
        let bs = self.check_images(support)?;
        if n < 2 || bs != b * n {
            return Err(Error::Shape(format!(
                "{bs} support images for {b} episodes of support size {n} (need n ≥ 2)"
            )));
        }
        // Query and support go through the backbone together so they share
        // batch-norm statistics in training mode.
        let mut shape = query.shape().to_vec();
        shape[0] = b + bs;
        let mut data = Vec::with_capacity(query.numel() + support.numel());
        data.extend_from_slice(query.data());
        data.extend_from_slice(support.data());
        let images = graph.input(Tensor::new(shape, data)?);

        let mut cx = Ctx { graph, params: &self.params, mode, bn_eps: self.config.bn_eps };
        let feats = self.backbone_vars(&mut cx, images)?;
        let q_rows: Vec<usize> = (0..b).collect();
        let s_rows: Vec<usize> = (b..b + bs).collect();
        if self.dstm.is_none() {
            let query = cx.graph.select(feats, &q_rows)?;
            let support = cx.graph.select(feats, &s_rows)?;
            return Ok(EpisodeVars { query, support, mask: None, h: None });
        }
        let fs = cx.graph.select(feats, &s_rows)?;
        let h = self.equivariant_vars(&mut cx, fs, n)?;
        let mask = self.invariant_vars(&mut cx, h, n)?;
        let reshaped = self.reshape_vars(&mut cx, feats)?;
        let rq = cx.graph.select(reshaped, &q_rows)?;
        let rs = cx.graph.select(reshaped, &s_rows)?;
        let query = cx.graph.group_mul(mask, rq, 1)?;
        let support = cx.graph.group_mul(mask, rs, n)?;
        Ok(EpisodeVars { query, support, mask: Some(mask), h: Some(h) })
    }

    /// Inference-mode embeddings for a batch of episodes, flattened to
    /// `[B, D]` and `[B·n, D]`.
    pub fn embed_batch(&self, query: &Tensor<T>, support: &Tensor<T>, n: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let vars = self.forward(&mut g, Mode::Eval, query, support, n)?;
        let flat = |t: &Tensor<T>| {
            let rows = t.rows();
            let len = t.row_len();
            t.clone().reshape(&[rows, len])
        };
        Ok((flat(g.value(vars.query))?, flat(g.value(vars.support))?))
    }

    /// Inference-mode embedding of a single episode: `query` is one image
    /// `[3, S, S]` or `[1, 3, S, S]`, `support` is `[N, 3, S, S]`.
    pub fn embed_episode(&self, query: &Tensor<T>, support: &Tensor<T>) -> Result<(Vec<T>, Vec<Vec<T>>)> {
        let q = if query.shape().len() == 3 {
            let mut shape = vec![1];
            shape.extend_from_slice(query.shape());
            query.clone().reshape(&shape)?
        } else {
            query.clone()
        };
        let n = self.check_images(support)?;
        let (qv, sv) = self.embed_batch(&q, support, n)?;
        if qv.rows() != 1 {
            return Err(Error::Shape("embed_episode takes exactly one query image".into()));
        }
        Ok((qv.into_data(), (0..n).map(|i| sv.row(i).to_vec()).collect()))
    }

    fn eval_op(&self, input: &Tensor<T>, op: impl FnOnce(&Self, &mut Ctx<'_, T>, Var) -> Result<Var>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let mut cx = Ctx { graph: &mut g, params: &self.params, mode: Mode::Eval, bn_eps: self.config.bn_eps };
        let y = op(self, &mut cx, x)?;
        Ok(g.value(y).clone())
    }

    fn check_features(&self, feats: &Tensor<T>, min_rows: usize) -> Result<usize> {
        let [c, h, w] = self.config.feature_shape()?;
        match feats.shape() {
            [n, fc, fh, fw] if (*fc, *fh, *fw) == (c, h, w) && *n >= min_rows => Ok(*n),
            other => Err(Error::Shape(format!(
                "expected at least {min_rows} feature maps of shape [{c}, {h}, {w}], got {other:?}"
            ))),
        }
    }

    /// Backbone features `[B, C, H, W]` for images `[B, 3, S, S]` in inference mode.
    pub fn embed_backbone(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(images)?;
        self.eval_op(images, |m, cx, x| m.backbone_vars(cx, x))
    }

    /// `P_N(i)` for every element of one support set of backbone features;
    /// row `i` of the result pools f_φ over all other rows.
    pub fn neighbor_union(&self, support_feats: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check_features(support_feats, 1)?;
        if n < 2 {
            return Err(Error::InvalidArgument("the neighbourhood union needs a support set of at least two".into()));
        }
        self.eval_op(support_feats, |m, cx, x| m.neighbor_vars(cx, x, n))
    }

    /// `h_i = f_θ([x_i ; P_N(i)])` for every element of one support set.
    pub fn equivariant_step(&self, support_feats: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check_features(support_feats, 1)?;
        if n < 2 {
            return Err(Error::InvalidArgument("the equivariant step needs a support set of at least two".into()));
        }
        self.eval_op(support_feats, |m, cx, x| m.equivariant_vars(cx, x, n))
    }

    /// Mask `[1, C′, H′, W′]` from the equivariant features `[n, hidden, H, W]`.
    pub fn invariant_pool(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.config.dstm.as_ref().ok_or_else(|| Error::InvalidArgument("the baseline model has no DSTM".into()))?;
        let [_, fh, fw] = self.config.feature_shape()?;
        let n = match h.shape() {
            [n, c, hh, ww] if *n > 0 && *c == d.hidden && (*hh, *ww) == (fh, fw) => *n,
            other => return Err(Error::Shape(format!("unexpected equivariant features {other:?}"))),
        };
        self.eval_op(h, |m, cx, x| m.invariant_vars(cx, x, n))
    }

    /// `M ⊙ r(x)` for every row of `feats`, with one mask `[1, C′, H′, W′]`.
    pub fn apply_mask(&self, mask: &Tensor<T>, feats: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check_features(feats, 1)?;
        let [c, m, _] = self.config.embedding_shape()?;
        self.dstm()?;
        if mask.shape() != [1, c, m, m] {
            return Err(Error::Shape(format!("mask {:?} does not match reshaper output [1, {c}, {m}, {m}]", mask.shape())));
        }
        let mut g = Graph::new();
        let x = g.input(feats.clone());
        let mv = g.input(mask.clone());
        let mut cx = Ctx { graph: &mut g, params: &self.params, mode: Mode::Eval, bn_eps: self.config.bn_eps };
        let r = self.reshape_vars(&mut cx, x)?;
        let y = g.group_mul(mv, r, n)?;
        Ok(g.value(y).clone())
    }

    /// The reshaper `r(x)` alone.
    pub fn reshape(&self, feats: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_features(feats, 1)?;
        self.dstm()?;
        self.eval_op(feats, |m, cx, x| m.reshape_vars(cx, x))
    }
}

#[cfg(test)]
mod tests;

//! Network building blocks. Each block owns the names and shapes of its
//! parameters, so declaring parameters and running the forward pass share
//! one description.

use rand::Rng;

use crate::autodiff::{add, mul, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    batchnorm2d, concat_channels, conv2d, global_avg_pool, pixel_shuffle, pixel_unshuffle, pool2d, prelu, resize,
    sigmoid, BatchNormConfig, ConvSpec, NormMode, PoolKind, PoolSpec, ResizeMode, RunningStats, PRELU_INIT,
};
use crate::tensor::{Scalar, Tensor};

use super::params::{he_uniform, ParamKind, ParameterStore};

/// How batch-norm layers and auxiliary heads behave during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Evaluate the deep-supervision heads.
    pub aux_heads: bool,
    /// Normalize with batch statistics and collect running-stat updates.
    pub bn_batch_stats: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        ForwardOptions { aux_heads: true, bn_batch_stats: true }
    }

    pub fn eval() -> Self {
        ForwardOptions { aux_heads: false, bn_batch_stats: false }
    }
}

/// Per-pass state: the tape, read access to the parameters, and the
/// running-stat updates produced by train-mode batch norm.
pub struct Forward<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParameterStore<T>,
    opts: ForwardOptions,
    bn: BatchNormConfig,
    updates: Vec<(String, RunningStats<T>)>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParameterStore<T>, opts: ForwardOptions) -> Self {
        Forward { tape, store, opts, bn: BatchNormConfig::default(), updates: Vec::new() }
    }

    pub fn options(&self) -> ForwardOptions {
        self.opts
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let value = self.store.get(name)?.clone();
        Ok(self.tape.param(name, value))
    }

    /// Batch norm under `prefix`. A layer whose batch has fewer than two
    /// values per channel falls back to its running statistics.
    pub fn batchnorm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{}.gamma", prefix))?;
        let beta = self.param(&format!("{}.beta", prefix))?;
        let stats = RunningStats {
            mean: self.store.get(&format!("{}.running_mean", prefix))?.clone(),
            var: self.store.get(&format!("{}.running_var", prefix))?.clone(),
        };
        let s = self.tape.shape(x);
        let mode = if self.opts.bn_batch_stats && s.n * s.plane() >= 2 { NormMode::Train } else { NormMode::Eval };
        let (y, updated) = batchnorm2d(self.tape, x, gamma, beta, &stats, mode, self.bn)?;
        if let Some(u) = updated {
            self.updates.push((prefix.to_string(), u));
        }
        Ok(y)
    }

    pub fn into_updates(self) -> Vec<(String, RunningStats<T>)> {
        self.updates
    }
}

/// Optional convolution, then optional batch norm, then optional PReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Unit {
    pub name: String,
    pub conv: Option<ConvSpec>,
    pub bn: bool,
    pub act: bool,
    channels: usize,
}

impl Unit {
    fn with(name: &str, spec: ConvSpec, bn: bool, act: bool) -> Self {
        Unit { name: name.to_string(), conv: Some(spec), bn, act, channels: spec.out_channels }
    }

    pub fn conv_bn_act(name: &str, spec: ConvSpec) -> Self {
        Self::with(name, spec, true, true)
    }

    pub fn conv_bn(name: &str, spec: ConvSpec) -> Self {
        Self::with(name, spec, true, false)
    }

    pub fn conv(name: &str, spec: ConvSpec) -> Self {
        Self::with(name, spec, false, false)
    }

    pub fn bn(name: &str, channels: usize) -> Self {
        Unit { name: name.to_string(), conv: None, bn: true, act: false, channels }
    }

    pub fn act(name: &str, channels: usize) -> Self {
        Unit { name: name.to_string(), conv: None, bn: false, act: true, channels }
    }

    pub fn out_channels(&self) -> usize {
        self.channels
    }

    pub fn conv_weight_name(&self) -> String {
        format!("{}.conv.weight", self.name)
    }

    /// Adds this unit's tensors to `store`.
    pub fn declare<T: Scalar>(&self, store: &mut ParameterStore<T>, rng: &mut impl Rng) -> Result<()> {
        if let Some(spec) = &self.conv {
            spec.validate()?;
            store.insert(self.conv_weight_name(), ParamKind::ConvWeight, he_uniform(spec.weight_shape(), rng))?;
            if spec.bias {
                store.insert(format!("{}.conv.bias", self.name), ParamKind::ConvBias, Tensor::zeros(spec.bias_shape()))?;
            }
        }
        let c = [1, self.channels, 1, 1];
        if self.bn {
            let p = format!("{}.bn", self.name);
            store.insert(format!("{}.gamma", p), ParamKind::BnGamma, Tensor::ones(c))?;
            store.insert(format!("{}.beta", p), ParamKind::BnBeta, Tensor::zeros(c))?;
            store.insert(format!("{}.running_mean", p), ParamKind::RunningMean, Tensor::zeros(c))?;
            store.insert(format!("{}.running_var", p), ParamKind::RunningVar, Tensor::ones(c))?;
        }
        if self.act {
            store.insert(format!("{}.act.alpha", self.name), ParamKind::PreluAlpha, Tensor::full(c, T::lit(PRELU_INIT)))?;
        }
        Ok(())
    }

    /// Learnable scalars in this unit.
    pub fn num_params(&self) -> usize {
        self.conv.map_or(0, |s| s.num_params()) + if self.bn { 2 * self.channels } else { 0 } + if self.act { self.channels } else { 0 }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let mut y = x;
        if let Some(spec) = &self.conv {
            let w = f.param(&self.conv_weight_name())?;
            let b = if spec.bias { Some(f.param(&format!("{}.conv.bias", self.name))?) } else { None };
            y = conv2d(f.tape, y, w, b, spec)?;
        }
        if self.bn {
            y = f.batchnorm(&format!("{}.bn", self.name), y)?;
        }
        if self.act {
            let a = f.param(&format!("{}.act.alpha", self.name))?;
            y = prelu(f.tape, y, a)?;
        }
        Ok(y)
    }
}

/// Anything built from units.
pub trait Block {
    fn units(&self) -> Vec<&Unit>;

    fn declare<T: Scalar>(&self, store: &mut ParameterStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.units().into_iter().try_for_each(|u| u.declare(store, rng))
    }

    fn num_params(&self) -> usize {
        self.units().iter().map(|u| u.num_params()).sum()
    }
}

/// Bicubic resize by `1/r`, then pixel unshuffle by `r`: `(n, c, H, W) → (n, c·r², H/r², W/r²)`.
pub fn downsample<T: Scalar>(tape: &mut Tape<T>, x: Var, r: usize) -> Result<Var> {
    let s = tape.shape(x);
    let q = r * r;
    if r == 0 || !s.h.is_multiple_of(q) || !s.w.is_multiple_of(q) {
        return Err(Error::shape(format!("downsample: {}x{} not divisible by {}", s.h, s.w, q)));
    }
    let y = resize(tape, x, s.h / r, s.w / r, ResizeMode::Bicubic)?;
    pixel_unshuffle(tape, y, r)
}

/// Three blocks of three 3×3 conv-BN-PReLU units; the first conv of each
/// block has stride 2.
#[derive(Clone, Debug)]
pub struct Shallow {
    pub layers: Vec<Unit>,
}

impl Shallow {
    pub fn new(in_channels: usize, widths: [usize; 3]) -> Self {
        let mut layers = Vec::with_capacity(9);
        let mut cin = in_channels;
        for (b, &c) in widths.iter().enumerate() {
            for l in 0..3 {
                let stride = if l == 0 { 2 } else { 1 };
                layers.push(Unit::conv_bn_act(&format!("shallow.block{}.conv{}", b, l), ConvSpec::k3(cin, c, stride)));
                cin = c;
            }
        }
        Shallow { layers }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        self.layers.iter().try_fold(x, |y, u| u.forward(f, y))
    }
}

impl Block for Shallow {
    fn units(&self) -> Vec<&Unit> {
        self.layers.iter().collect()
    }
}

/// Entry stage of the deep stream: spatial ÷4 through a conv branch and a
/// max-pool branch.
#[derive(Clone, Debug)]
pub struct Stem {
    pub conv: Unit,
    pub reduce: Unit,
    pub down: Unit,
    pub fuse: Unit,
}

impl Stem {
    pub fn new(in_channels: usize, c: usize) -> Self {
        let half = c / 2;
        Stem {
            conv: Unit::conv_bn_act("deep.stem.conv", ConvSpec::k3(in_channels, c, 2)),
            reduce: Unit::conv_bn_act("deep.stem.branch.reduce", ConvSpec::k1(c, half)),
            down: Unit::conv_bn_act("deep.stem.branch.down", ConvSpec::k3(half, half, 2)),
            fuse: Unit::conv_bn_act("deep.stem.fuse", ConvSpec::k3(c + half, c, 1)),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        let a = self.reduce.forward(f, y)?;
        let a = self.down.forward(f, a)?;
        let b = pool2d(f.tape, y, PoolSpec::new(PoolKind::Max, 3, 2, 1))?;
        let cat = concat_channels(f.tape, &[a, b])?;
        self.fuse.forward(f, cat)
    }
}

impl Block for Stem {
    fn units(&self) -> Vec<&Unit> {
        vec![&self.conv, &self.reduce, &self.down, &self.fuse]
    }
}

/// Gather-expansion layer.
#[derive(Clone, Debug)]
pub enum GeLayer {
    /// `PReLU(x + proj(dw(expand(x))))`.
    Stride1 { expand: Unit, dw: Unit, proj: Unit, act: Unit },
    /// Main path with two depthwise convs (the first strided) plus a strided
    /// depthwise shortcut.
    Stride2 { expand: Unit, dw1: Unit, dw2: Unit, proj: Unit, shortcut_dw: Unit, shortcut_proj: Unit, act: Unit },
}

impl GeLayer {
    pub fn stride1(prefix: &str, c: usize, e: usize) -> Self {
        let n = |s: &str| format!("{}.{}", prefix, s);
        GeLayer::Stride1 {
            expand: Unit::conv_bn_act(&n("expand"), ConvSpec::k3(c, e * c, 1)),
            dw: Unit::conv_bn(&n("dw"), ConvSpec::depthwise(e * c, 3, 1, 1)),
            proj: Unit::conv_bn(&n("proj"), ConvSpec::k1(e * c, c)),
            act: Unit::act(&n("out"), c),
        }
    }

    pub fn stride2(prefix: &str, cin: usize, cout: usize, e: usize) -> Self {
        let n = |s: &str| format!("{}.{}", prefix, s);
        GeLayer::Stride2 {
            expand: Unit::conv_bn_act(&n("expand"), ConvSpec::k3(cin, e * cin, 1)),
            dw1: Unit::conv_bn(&n("dw1"), ConvSpec::depthwise(e * cin, 3, 2, 1)),
            dw2: Unit::conv_bn(&n("dw2"), ConvSpec::depthwise(e * cin, 3, 1, 1)),
            proj: Unit::conv_bn(&n("proj"), ConvSpec::k1(e * cin, cout)),
            shortcut_dw: Unit::conv_bn(&n("shortcut.dw"), ConvSpec::depthwise(cin, 3, 2, 1)),
            shortcut_proj: Unit::conv_bn(&n("shortcut.proj"), ConvSpec::k1(cin, cout)),
            act: Unit::act(&n("out"), cout),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        match self {
            GeLayer::Stride1 { expand, dw, proj, act } => {
                let y = expand.forward(f, x)?;
                let y = dw.forward(f, y)?;
                let y = proj.forward(f, y)?;
                let sum = add(f.tape, x, y)?;
                act.forward(f, sum)
            }
            GeLayer::Stride2 { expand, dw1, dw2, proj, shortcut_dw, shortcut_proj, act } => {
                let y = expand.forward(f, x)?;
                let y = dw1.forward(f, y)?;
                let y = dw2.forward(f, y)?;
                let y = proj.forward(f, y)?;
                let s = shortcut_dw.forward(f, x)?;
                let s = shortcut_proj.forward(f, s)?;
                let sum = add(f.tape, y, s)?;
                act.forward(f, sum)
            }
        }
    }

    /// Output of the main path only, without the shortcut or residual.
    pub fn main_path<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        match self {
            GeLayer::Stride1 { expand, dw, proj, .. } => {
                let y = expand.forward(f, x)?;
                let y = dw.forward(f, y)?;
                proj.forward(f, y)
            }
            GeLayer::Stride2 { expand, dw1, dw2, proj, .. } => {
                let y = expand.forward(f, x)?;
                let y = dw1.forward(f, y)?;
                let y = dw2.forward(f, y)?;
                proj.forward(f, y)
            }
        }
    }
}

impl Block for GeLayer {
    fn units(&self) -> Vec<&Unit> {
        match self {
            GeLayer::Stride1 { expand, dw, proj, act } => vec![expand, dw, proj, act],
            GeLayer::Stride2 { expand, dw1, dw2, proj, shortcut_dw, shortcut_proj, act } => {
                vec![expand, dw1, dw2, proj, shortcut_dw, shortcut_proj, act]
            }
        }
    }
}

/// Global-pooling residual stage.
#[derive(Clone, Debug)]
pub struct Context {
    pub pool_bn: Unit,
    pub embed: Unit,
    pub out: Unit,
}

impl Context {
    pub fn new(c: usize) -> Self {
        Context {
            pool_bn: Unit::bn("deep.context.pool", c),
            embed: Unit::conv("deep.context.embed", ConvSpec::k1(c, c).with_bias()),
            out: Unit::conv_bn_act("deep.context.out", ConvSpec::k3(c, c, 1)),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let g = global_avg_pool(f.tape, x)?;
        let g = self.pool_bn.forward(f, g)?;
        let g = self.embed.forward(f, g)?;
        let y = add(f.tape, x, g)?;
        self.out.forward(f, y)
    }
}

impl Block for Context {
    fn units(&self) -> Vec<&Unit> {
        vec![&self.pool_bn, &self.embed, &self.out]
    }
}

/// Bidirectional gated merge of the detail (shallow) and semantic (deep)
/// feature maps, both with `c` channels.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub detail_dw: Unit,
    pub detail_pw: Unit,
    pub semantic_gate: Unit,
    pub detail_down: Unit,
    pub semantic_dw: Unit,
    pub semantic_pw: Unit,
    pub out: Unit,
}

impl Fusion {
    pub fn new(c: usize) -> Self {
        Fusion {
            detail_dw: Unit::conv_bn("fusion.detail.dw", ConvSpec::depthwise(c, 3, 1, 1)),
            detail_pw: Unit::conv("fusion.detail.pw", ConvSpec::k1(c, c)),
            semantic_gate: Unit::conv_bn("fusion.semantic_gate", ConvSpec::k3(c, c, 1)),
            detail_down: Unit::conv_bn("fusion.detail_down", ConvSpec::k3(c, c, 2)),
            semantic_dw: Unit::conv_bn("fusion.semantic.dw", ConvSpec::depthwise(c, 3, 1, 1)),
            semantic_pw: Unit::conv("fusion.semantic.pw", ConvSpec::k1(c, c)),
            out: Unit::conv_bn("fusion.out", ConvSpec::k3(c, c, 1)),
        }
    }

    /// The compressed detail path must land on the semantic grid; with
    /// ceil-halving strides that holds for every valid input size.
    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, detail: Var, semantic: Var) -> Result<Var> {
        let (ds, ss) = (f.tape.shape(detail), f.tape.shape(semantic));
        if ds.c != ss.c || ds.n != ss.n {
            return Err(Error::shape(format!("fusion inputs {} and {} disagree on batch or channels", ds, ss)));
        }

        // Semantic guides detail, at detail resolution.
        let d1 = self.detail_dw.forward(f, detail)?;
        let d1 = self.detail_pw.forward(f, d1)?;
        let g1 = self.semantic_gate.forward(f, semantic)?;
        let g1 = resize(f.tape, g1, ds.h, ds.w, ResizeMode::Bilinear)?;
        let g1 = sigmoid(f.tape, g1)?;
        let p1 = mul(f.tape, d1, g1)?;

        // Detail guides semantic, at semantic resolution.
        let d2 = self.detail_down.forward(f, detail)?;
        let d2 = pool2d(f.tape, d2, PoolSpec::new(PoolKind::Avg, 3, 2, 1))?;
        let d2s = f.tape.shape(d2);
        if (d2s.h, d2s.w) != (ss.h, ss.w) {
            return Err(Error::shape(format!(
                "fusion: detail {}x{} does not reduce onto semantic {}x{}",
                ds.h, ds.w, ss.h, ss.w
            )));
        }
        let g2 = self.semantic_dw.forward(f, semantic)?;
        let g2 = self.semantic_pw.forward(f, g2)?;
        let g2 = sigmoid(f.tape, g2)?;
        let p2 = mul(f.tape, d2, g2)?;
        let p2 = resize(f.tape, p2, ds.h, ds.w, ResizeMode::Bilinear)?;

        let sum = add(f.tape, p1, p2)?;
        self.out.forward(f, sum)
    }
}

impl Block for Fusion {
    fn units(&self) -> Vec<&Unit> {
        vec![
            &self.detail_dw,
            &self.detail_pw,
            &self.semantic_gate,
            &self.detail_down,
            &self.semantic_dw,
            &self.semantic_pw,
            &self.out,
        ]
    }
}

/// Segmentation head: conv3×3-BN-PReLU, 1×1 classifier, optional pixel
/// shuffle, bilinear resize to the target size.
#[derive(Clone, Debug)]
pub struct Head {
    pub hidden: Unit,
    pub classifier: Unit,
    pub shuffle: usize,
}

impl Head {
    /// Main head: the classifier emits `4·classes` channels that a ×2 pixel
    /// shuffle turns into `classes`.
    pub fn main(in_channels: usize, hidden: usize, classes: usize) -> Self {
        Head {
            hidden: Unit::conv_bn_act("head.hidden", ConvSpec::k3(in_channels, hidden, 1)),
            classifier: Unit::conv("head.classifier", ConvSpec::k1(hidden, 4 * classes).with_bias()),
            shuffle: 2,
        }
    }

    pub fn aux(index: usize, in_channels: usize, hidden: usize, classes: usize) -> Self {
        let p = format!("aux{}", index);
        Head {
            hidden: Unit::conv_bn_act(&format!("{}.hidden", p), ConvSpec::k3(in_channels, hidden, 1)),
            classifier: Unit::conv(&format!("{}.classifier", p), ConvSpec::k1(hidden, classes).with_bias()),
            shuffle: 1,
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = self.hidden.forward(f, x)?;
        let mut y = self.classifier.forward(f, y)?;
        if self.shuffle > 1 {
            y = pixel_shuffle(f.tape, y, self.shuffle)?;
        }
        resize(f.tape, y, out_h, out_w, ResizeMode::Bilinear)
    }
}

impl Block for Head {
    fn units(&self) -> Vec<&Unit> {
        vec![&self.hidden, &self.classifier]
    }
}

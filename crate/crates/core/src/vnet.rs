//! Residual V-Net: building blocks, parameter construction and the forward pass.
//!
//! Resolution stage `l` has `base_channels * 2^l` channels. Every stage is a
//! residual unit `skip(x) + body(x)` whose skip path is an identity, or the
//! maxpool / repeat-upsample plus 1x1x1 adapter when the body changes shape.
//!
//! Layer names follow the stage layout: `enc{l}.adapter`, `enc{l}.down`,
//! `enc{l}.down_bn`, `enc{l}.conv{j}`, `enc{l}.bn{j}`, the same under `dec{l}`
//! with `up`/`up_bn`, then `flair.conv`, `flair.bn` and `head`.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownKind {
    /// 2x2x2 convolution with stride 2
    Conv,
    MaxPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleKind {
    /// 2x2x2 transposed convolution with stride 2
    Learned,
    /// repetition followed by a 1x1x1 convolution
    Repeat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub out_classes: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub convs_per_level: Vec<usize>,
    pub flair_concat: bool,
    /// one conv block after the FLAIR concatenation, before the head
    pub flair_conv_block: bool,
    /// channel of the input holding FLAIR
    pub flair_channel: usize,
    pub down: DownKind,
    pub upsample_kind: UpsampleKind,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            out_classes: 2,
            levels: 3,
            base_channels: 8,
            convs_per_level: vec![1, 2, 3],
            flair_concat: true,
            flair_conv_block: true,
            flair_channel: 3,
            down: DownKind::Conv,
            upsample_kind: UpsampleKind::Learned,
            bn_momentum: 0.9,
            bn_epsilon: 1e-5,
        }
    }
}

impl NetworkConfig {
    /// Binary tumor detector.
    pub fn net1() -> Self {
        Self::default()
    }

    /// Four-class segmenter; FLAIR concatenation is a detector feature.
    pub fn net2() -> Self {
        Self {
            out_classes: 4,
            flair_concat: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.levels == 0 {
            return fail("levels must be at least 1".into());
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return fail("base_channels and in_channels must be positive".into());
        }
        if self.out_classes < 2 {
            return fail(format!("out_classes must be at least 2, got {}", self.out_classes));
        }
        if self.convs_per_level.len() != self.levels {
            return fail(format!(
                "convs_per_level has {} entries for {} levels",
                self.convs_per_level.len(),
                self.levels
            ));
        }
        if self.convs_per_level.contains(&0) {
            return fail("every level needs at least one conv block".into());
        }
        if self.flair_concat && self.flair_channel >= self.in_channels {
            return fail(format!(
                "flair_channel {} outside the {} input channels",
                self.flair_channel, self.in_channels
            ));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) || !(self.bn_epsilon > 0.0) {
            return fail("bn_momentum must lie in (0, 1) and bn_epsilon be positive".into());
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    pub fn check_input_dims(&self, dims: [usize; 3]) -> Result<()> {
        let k = self.divisor();
        if let Some(axis) = (0..3).find(|&a| dims[a] == 0 || !dims[a].is_multiple_of(k)) {
            return Err(Error::shape(
                "forward",
                format!(
                    "{} extent {} is not a positive multiple of 2^levels = {k}",
                    ["depth", "height", "width"][axis],
                    dims[axis]
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T> {
    /// `[out, in, k, k, k]`; transposed convolutions store `[in, out, k, k, k]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize, momentum: f64, epsilon: f64) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum,
            epsilon,
        }
    }

    /// `running = momentum * running + (1 - momentum) * batch`
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::of(self.momentum);
        let one_m = T::of(1.0 - self.momentum);
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = m * *r + one_m * b;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv(ConvKernel<T>),
    BatchNorm(BatchNormState<T>),
}

/// Layers by canonical name, in construction order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    layers: IndexMap<String, Layer<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn from_layers(layers: IndexMap<String, Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &IndexMap<String, Layer<T>> {
        &self.layers
    }

    pub fn conv(&self, name: &str) -> Result<&ConvKernel<T>> {
        match self.layers.get(name) {
            Some(Layer::Conv(k)) => Ok(k),
            _ => Err(Error::invalid(format!("model has no convolution named {name}"))),
        }
    }

    pub fn conv_mut(&mut self, name: &str) -> Result<&mut ConvKernel<T>> {
        match self.layers.get_mut(name) {
            Some(Layer::Conv(k)) => Ok(k),
            _ => Err(Error::invalid(format!("model has no convolution named {name}"))),
        }
    }

    pub fn batchnorm(&self, name: &str) -> Result<&BatchNormState<T>> {
        match self.layers.get(name) {
            Some(Layer::BatchNorm(b)) => Ok(b),
            _ => Err(Error::invalid(format!("model has no batch norm named {name}"))),
        }
    }

    pub fn batchnorm_mut(&mut self, name: &str) -> Result<&mut BatchNormState<T>> {
        match self.layers.get_mut(name) {
            Some(Layer::BatchNorm(b)) => Ok(b),
            _ => Err(Error::invalid(format!("model has no batch norm named {name}"))),
        }
    }

    /// Learnable tensors as `layer.weight`, `layer.bias`, `layer.gamma`, `layer.beta`.
    pub fn trainable(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (name, layer) in &self.layers {
            match layer {
                Layer::Conv(k) => {
                    out.push((format!("{name}.weight"), &k.weight));
                    out.push((format!("{name}.bias"), &k.bias));
                }
                Layer::BatchNorm(b) => {
                    out.push((format!("{name}.gamma"), &b.gamma));
                    out.push((format!("{name}.beta"), &b.beta));
                }
            }
        }
        out
    }

    /// Same order as [`trainable`](Self::trainable).
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in self.layers.values_mut() {
            match layer {
                Layer::Conv(k) => {
                    out.push(&mut k.weight);
                    out.push(&mut k.bias);
                }
                Layer::BatchNorm(b) => {
                    out.push(&mut b.gamma);
                    out.push(&mut b.beta);
                }
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let layers = self
            .layers
            .iter()
            .map(|(n, l)| {
                let l = match l {
                    Layer::Conv(k) => Layer::Conv(ConvKernel {
                        weight: k.weight.cast(),
                        bias: k.bias.cast(),
                    }),
                    Layer::BatchNorm(b) => Layer::BatchNorm(BatchNormState {
                        gamma: b.gamma.cast(),
                        beta: b.beta.cast(),
                        running_mean: b.running_mean.iter().map(|v| U::of(v.f64())).collect(),
                        running_var: b.running_var.iter().map(|v| U::of(v.f64())).collect(),
                        momentum: b.momentum,
                        epsilon: b.epsilon,
                    }),
                };
                (n.clone(), l)
            })
            .collect();
        ModelParams { layers }
    }

    /// Fold the batch statistics of a training forward into running averages.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats<T>)]) -> Result<()> {
        for (name, s) in stats {
            self.batchnorm_mut(name)?.update_running(s);
        }
        Ok(())
    }
}

/// Shape plan of every layer: `(name, kind)` in construction order.
#[derive(Clone, Debug, PartialEq)]
enum Plan {
    /// `[out, in, k]` with weight stored as given
    Conv { shape: [usize; 5], fan_in: usize },
    Bn(usize),
}

fn plan(cfg: &NetworkConfig) -> Vec<(String, Plan)> {
    let mut p = Vec::new();
    let conv = |p: &mut Vec<(String, Plan)>, name: String, cout: usize, cin: usize, k: usize| {
        p.push((
            name,
            Plan::Conv {
                shape: [cout, cin, k, k, k],
                fan_in: cin * k * k * k,
            },
        ))
    };
    let blocks = |p: &mut Vec<(String, Plan)>, prefix: &str, cin: usize, c: usize, n: usize| {
        for j in 0..n {
            conv(p, format!("{prefix}.conv{j}"), c, if j == 0 { cin } else { c }, 3);
            p.push((format!("{prefix}.bn{j}"), Plan::Bn(c)));
        }
    };
    let c0 = cfg.channels(0);
    if cfg.in_channels != c0 {
        conv(&mut p, "enc0.adapter".into(), c0, cfg.in_channels, 1);
    }
    blocks(&mut p, "enc0", cfg.in_channels, c0, cfg.convs_per_level[0]);
    for l in 1..cfg.levels {
        let (cp, c) = (cfg.channels(l - 1), cfg.channels(l));
        conv(&mut p, format!("enc{l}.adapter"), c, cp, 1);
        let body_in = match cfg.down {
            DownKind::Conv => {
                conv(&mut p, format!("enc{l}.down"), c, cp, 2);
                p.push((format!("enc{l}.down_bn"), Plan::Bn(c)));
                c
            }
            DownKind::MaxPool => cp,
        };
        blocks(&mut p, &format!("enc{l}"), body_in, c, cfg.convs_per_level[l]);
    }
    for l in (0..cfg.levels.saturating_sub(1)).rev() {
        let (cn, c) = (cfg.channels(l + 1), cfg.channels(l));
        conv(&mut p, format!("dec{l}.adapter"), c, cn, 1);
        match cfg.upsample_kind {
            UpsampleKind::Learned => p.push((
                format!("dec{l}.up"),
                // transposed layout [in, out, k]; each output sees `in` inputs
                Plan::Conv {
                    shape: [cn, c, 2, 2, 2],
                    fan_in: cn,
                },
            )),
            UpsampleKind::Repeat => conv(&mut p, format!("dec{l}.up"), c, cn, 1),
        }
        p.push((format!("dec{l}.up_bn"), Plan::Bn(c)));
        blocks(&mut p, &format!("dec{l}"), 2 * c, c, cfg.convs_per_level[l]);
    }
    let mut head_in = c0;
    if cfg.flair_concat {
        head_in = c0 + 1;
        if cfg.flair_conv_block {
            conv(&mut p, "flair.conv".into(), c0, c0 + 1, 3);
            p.push(("flair.bn".into(), Plan::Bn(c0)));
            head_in = c0;
        }
    }
    conv(&mut p, "head".into(), cfg.out_classes, head_in, 1);
    p
}

/// Deterministic He-normal initialisation; biases and BN shifts start at 0.
pub fn build_network(cfg: &NetworkConfig, seed: u64) -> Result<ModelParams<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = IndexMap::new();
    for (name, item) in plan(cfg) {
        let layer = match item {
            Plan::Conv { shape, fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (z * std) as f32
                    })
                    .collect();
                let bias_len = if name.ends_with(".up") && cfg.upsample_kind == UpsampleKind::Learned {
                    shape[1]
                } else {
                    shape[0]
                };
                Layer::Conv(ConvKernel {
                    weight: Tensor::from_vec(&shape, data)?,
                    bias: Tensor::zeros(&[bias_len]),
                })
            }
            Plan::Bn(c) => Layer::BatchNorm(BatchNormState::new(c, cfg.bn_momentum, cfg.bn_epsilon)),
        };
        layers.insert(name, layer);
    }
    Ok(ModelParams { layers })
}

/// Weight and bias handles of one convolution inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BnVars {
    pub gamma: Var,
    pub beta: Var,
}

/// Graph handles for every layer of a [`ModelParams`].
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    conv: IndexMap<String, ConvVars>,
    bn: IndexMap<String, BnVars>,
}

impl BoundParams {
    /// Register the parameters as trainable leaves (`trainable = true`) or constants.
    pub fn bind<T: Scalar>(g: &mut Graph<T>, params: &ModelParams<T>, trainable: bool) -> Self {
        let leaf = |g: &mut Graph<T>, t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let mut out = Self::default();
        for (name, layer) in params.layers() {
            match layer {
                Layer::Conv(k) => {
                    let v = ConvVars {
                        weight: leaf(g, &k.weight),
                        bias: leaf(g, &k.bias),
                    };
                    out.conv.insert(name.clone(), v);
                }
                Layer::BatchNorm(b) => {
                    let v = BnVars {
                        gamma: leaf(g, &b.gamma),
                        beta: leaf(g, &b.beta),
                    };
                    out.bn.insert(name.clone(), v);
                }
            }
        }
        out
    }

    /// Adopt existing graph leaves given in [`ModelParams::trainable`] order.
    pub fn from_vars(params: &ModelParams<impl Scalar>, vars: &[Var]) -> Result<Self> {
        let mut out = Self::default();
        let mut it = vars.iter().copied();
        let mut next = |name: &str| {
            it.next()
                .ok_or_else(|| Error::invalid(format!("too few variables: none left for {name}")))
        };
        for (name, layer) in params.layers() {
            match layer {
                Layer::Conv(_) => {
                    let v = ConvVars {
                        weight: next(name)?,
                        bias: next(name)?,
                    };
                    out.conv.insert(name.clone(), v);
                }
                Layer::BatchNorm(_) => {
                    let v = BnVars {
                        gamma: next(name)?,
                        beta: next(name)?,
                    };
                    out.bn.insert(name.clone(), v);
                }
            }
        }
        if it.next().is_some() {
            return Err(Error::invalid("more variables than trainable tensors"));
        }
        Ok(out)
    }

    pub fn conv(&self, name: &str) -> Result<ConvVars> {
        self.conv
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no bound convolution {name}")))
    }

    pub fn bn(&self, name: &str) -> Result<BnVars> {
        self.bn
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no bound batch norm {name}")))
    }

    /// Handles in [`ModelParams::trainable`] order.
    pub fn vars(&self, params: &ModelParams<impl Scalar>) -> Vec<Var> {
        let mut out = Vec::new();
        for (name, layer) in params.layers() {
            match layer {
                Layer::Conv(_) => {
                    let c = self.conv[name.as_str()];
                    out.extend([c.weight, c.bias]);
                }
                Layer::BatchNorm(_) => {
                    let b = self.bn[name.as_str()];
                    out.extend([b.gamma, b.beta]);
                }
            }
        }
        out
    }
}

/// 3x3x3 convolution (padding 1) → batch norm → ReLU.
pub fn conv_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    conv: ConvVars,
    bn: BnVars,
    state: &BatchNormState<T>,
    mode: Mode,
) -> Result<(Var, Option<BatchStats<T>>)> {
    let y = g.conv3d(x, conv.weight, Some(conv.bias), [1; 3], [1; 3])?;
    let (y, stats) = g.batchnorm3d(
        y,
        bn.gamma,
        bn.beta,
        (&state.running_mean, &state.running_var),
        mode,
        T::of(state.epsilon),
    )?;
    Ok((g.relu(y), stats))
}

/// `x + body(x)` with an identity skip path.
pub fn residual_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    body: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<Var> {
    let y = body(g, x)?;
    if g.value(y).shape() != g.value(x).shape() {
        return Err(Error::shape(
            "residual_block",
            format!(
                "body maps {:?} to {:?}; use residual_adapter on the skip path",
                g.value(x).shape(),
                g.value(y).shape()
            ),
        ));
    }
    g.add(x, y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialChange {
    Down,
    Up,
    None,
}

/// Skip path for a residual unit whose body changes shape: maxpool or
/// repetition by 2, then the 1x1x1 convolution when one is given.
pub fn residual_adapter<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    conv: Option<ConvVars>,
    change: SpatialChange,
) -> Result<Var> {
    let y = match change {
        SpatialChange::Down => g.maxpool3d(x, [2; 3], [2; 3])?,
        SpatialChange::Up => g.repeat_upsample3d(x, [2; 3])?,
        SpatialChange::None => x,
    };
    match conv {
        Some(c) => g.conv3d(y, c.weight, Some(c.bias), [1; 3], [0; 3]),
        None => Ok(y),
    }
}

pub struct NetOutput<T> {
    /// `[1, out_classes, D, H, W]` softmax probabilities
    pub probs: Var,
    /// batch statistics per BN layer (training mode only)
    pub bn_stats: Vec<(String, BatchStats<T>)>,
}

struct Ctx<'a, T> {
    g: &'a mut Graph<T>,
    params: &'a ModelParams<T>,
    bound: &'a BoundParams,
    mode: Mode,
    stats: Vec<(String, BatchStats<T>)>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn check(&self, name: &str, v: Var) -> Result<Var> {
        if self.g.value(v).has_non_finite() {
            return Err(Error::NonFinite {
                location: format!("layer {name}"),
            });
        }
        Ok(v)
    }

    fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let c = self.bound.conv(name)?;
        let y = self.g.conv3d(x, c.weight, Some(c.bias), [stride; 3], [pad; 3])?;
        self.check(name, y)
    }

    fn bn_relu(&mut self, name: &str, x: Var) -> Result<Var> {
        let state = self.params.batchnorm(name)?;
        let b = self.bound.bn(name)?;
        let (y, stats) = self.g.batchnorm3d(
            x,
            b.gamma,
            b.beta,
            (&state.running_mean, &state.running_var),
            self.mode,
            T::of(state.epsilon),
        )?;
        if let Some(s) = stats {
            self.stats.push((name.to_string(), s));
        }
        let y = self.g.relu(y);
        self.check(name, y)
    }

    fn block(&mut self, prefix: &str, j: usize, x: Var) -> Result<Var> {
        let y = self.conv(&format!("{prefix}.conv{j}"), x, 1, 1)?;
        self.bn_relu(&format!("{prefix}.bn{j}"), y)
    }

    fn blocks(&mut self, prefix: &str, n: usize, mut x: Var) -> Result<Var> {
        for j in 0..n {
            x = self.block(prefix, j, x)?;
        }
        Ok(x)
    }

    fn adapter(&mut self, name: &str, x: Var, change: SpatialChange) -> Result<Var> {
        let conv = self.bound.conv.get(name).copied();
        let y = residual_adapter(self.g, x, conv, change)?;
        self.check(name, y)
    }
}

/// Full forward pass on `input` (`[1, in_channels, D, H, W]`, already in the graph).
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &NetworkConfig,
    params: &ModelParams<T>,
    bound: &BoundParams,
    input: Var,
    mode: Mode,
) -> Result<NetOutput<T>> {
    let [_, cin, d, h, w] = g.value(input).dims5("forward")?;
    if cin != cfg.in_channels {
        return Err(Error::shape(
            "forward",
            format!("input has {cin} channels, network expects {}", cfg.in_channels),
        ));
    }
    cfg.check_input_dims([d, h, w])?;
    let mut cx = Ctx {
        g,
        params,
        bound,
        mode,
        stats: Vec::new(),
    };

    let skip = cx.adapter("enc0.adapter", input, SpatialChange::None)?;
    let body = cx.blocks("enc0", cfg.convs_per_level[0], input)?;
    let mut x = cx.g.add(skip, body)?;
    let mut encoded = vec![x];
    for l in 1..cfg.levels {
        let skip = cx.adapter(&format!("enc{l}.adapter"), x, SpatialChange::Down)?;
        let down = match cfg.down {
            DownKind::Conv => {
                let y = cx.conv(&format!("enc{l}.down"), x, 2, 0)?;
                cx.bn_relu(&format!("enc{l}.down_bn"), y)?
            }
            DownKind::MaxPool => cx.g.maxpool3d(x, [2; 3], [2; 3])?,
        };
        let body = cx.blocks(&format!("enc{l}"), cfg.convs_per_level[l], down)?;
        x = cx.g.add(skip, body)?;
        encoded.push(x);
    }

    for l in (0..cfg.levels - 1).rev() {
        let skip = cx.adapter(&format!("dec{l}.adapter"), x, SpatialChange::Up)?;
        let name = format!("dec{l}.up");
        let up = match cfg.upsample_kind {
            UpsampleKind::Learned => {
                let c = cx.bound.conv(&name)?;
                let y = cx.g.conv3d_transpose(x, c.weight, Some(c.bias), [2; 3], [0; 3])?;
                cx.check(&name, y)?
            }
            UpsampleKind::Repeat => {
                let r = cx.g.repeat_upsample3d(x, [2; 3])?;
                cx.conv(&name, r, 1, 0)?
            }
        };
        let up = cx.bn_relu(&format!("dec{l}.up_bn"), up)?;
        let cat = cx.g.concat_channels(up, encoded[l])?;
        let body = cx.blocks(&format!("dec{l}"), cfg.convs_per_level[l], cat)?;
        x = cx.g.add(skip, body)?;
    }

    if cfg.flair_concat {
        let flair = cx.g.slice_channels(input, cfg.flair_channel, cfg.flair_channel + 1)?;
        x = cx.g.concat_channels(x, flair)?;
        if cfg.flair_conv_block {
            let y = cx.conv("flair.conv", x, 1, 1)?;
            x = cx.bn_relu("flair.bn", y)?;
        }
    }
    let logits = cx.conv("head", x, 1, 0)?;
    let probs = cx.g.softmax_channels(logits)?;
    let probs = cx.check("softmax", probs)?;
    Ok(NetOutput {
        probs,
        bn_stats: cx.stats,
    })
}

/// Inference-mode probabilities for one input tensor.
pub fn predict<T: Scalar>(cfg: &NetworkConfig, params: &ModelParams<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params, false);
    let x = g.constant(input.clone());
    let out = forward(&mut g, cfg, params, &bound, x, Mode::Infer)?;
    Ok(g.value(out.probs).clone())
}

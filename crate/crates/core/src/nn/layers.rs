use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BatchStats, BnMode, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Dense,
    Relu,
    Pool,
    ResidualBlock,
    Flatten,
}

/// Whether a value is trained by the optimizer or tracked as a running statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateKind {
    Param,
    Buffer,
}

/// Bias-free 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// He-normal initialisation: `N(0, 2 / fan_in)`.
    pub fn he(in_ch: usize, out_ch: usize, k: usize, stride: usize, padding: usize, rng: &mut Rng) -> Self {
        let fan_in = (in_ch * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let weight = Tensor::from_fn(&[out_ch, in_ch, k, k], |_| normal.sample(rng)).with_grad();
        Conv2d { weight, stride, padding }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::filled(&[channels], 1.0).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Exponential update of the running statistics; variance is stored unbiased.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let unbias = if stats.count > 1 { stats.count as f64 / (stats.count - 1) as f64 } else { 1.0 };
        for c in 0..self.running_mean.len() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = ((1.0 - m) * self.running_var[c] + m * stats.var[c] * unbias).max(0.0);
        }
    }
}

/// Fully connected layer `y = x·W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    /// Small uniform weights in ±`bound`, zero bias.
    pub fn small(inputs: usize, outputs: usize, bound: f64, rng: &mut Rng) -> Self {
        let weight = Tensor::from_fn(&[inputs, outputs], |_| rng.gen_range(-bound..=bound)).with_grad();
        Dense { weight, bias: Tensor::zeros(&[outputs]).with_grad() }
    }
}

/// `x + bn2(conv2(relu(bn1(conv1(x)))))`, with a 1×1 projection on the skip
/// path when the block changes shape. There is no activation after the sum, so
/// a block whose residual branch is zero is exactly the identity.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub projection: Option<(Conv2d, BatchNorm)>,
}

impl ResidualBlock {
    pub fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut Rng) -> Self {
        let projection = (stride != 1 || in_ch != out_ch)
            .then(|| (Conv2d::he(in_ch, out_ch, 1, stride, 0, rng), BatchNorm::new(out_ch)));
        ResidualBlock {
            conv1: Conv2d::he(in_ch, out_ch, 3, stride, 1, rng),
            bn1: BatchNorm::new(out_ch),
            conv2: Conv2d::he(out_ch, out_ch, 3, 1, 1, rng),
            bn2: BatchNorm::new(out_ch),
            projection,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm),
    Dense(Dense),
    Relu,
    GlobalAvgPool,
    MaxPool { size: usize, stride: usize },
    Flatten,
    Residual(Box<ResidualBlock>),
}

/// Per-pass switches shared by every layer of one group.
pub(crate) struct PassCtx<'a> {
    pub graph: &'a mut Graph,
    /// Normalise with batch statistics (otherwise running statistics).
    pub batch_stats: bool,
    pub observed: Vec<BatchStats>,
}

impl PassCtx<'_> {
    fn batch_norm(&mut self, x: Var, bn: &BatchNorm, params: &mut impl Iterator<Item = Var>) -> Result<Var> {
        let gamma = next_param(params)?;
        let beta = next_param(params)?;
        let mode = if self.batch_stats {
            BnMode::Batch
        } else {
            BnMode::Fixed { mean: &bn.running_mean, var: &bn.running_var }
        };
        let (y, stats) = self.graph.batch_norm(x, gamma, beta, bn.eps, mode)?;
        self.observed.extend(stats);
        Ok(y)
    }

    fn conv(&mut self, x: Var, conv: &Conv2d, params: &mut impl Iterator<Item = Var>) -> Result<Var> {
        let w = next_param(params)?;
        self.graph.conv2d(x, w, conv.stride, conv.padding)
    }
}

fn next_param(params: &mut impl Iterator<Item = Var>) -> Result<Var> {
    params.next().ok_or_else(|| Error::Dimension("layer parameters exhausted".into()))
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv(_) => LayerKind::Conv,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Relu => LayerKind::Relu,
            Layer::GlobalAvgPool | Layer::MaxPool { .. } => LayerKind::Pool,
            Layer::Flatten => LayerKind::Flatten,
            Layer::Residual(_) => LayerKind::ResidualBlock,
        }
    }

    /// Parameters in binding order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |_, kind, v| {
            if let StateRef::Param(t) = v {
                debug_assert_eq!(kind, StateKind::Param);
                out.push(t);
            }
        });
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight],
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Relu | Layer::GlobalAvgPool | Layer::MaxPool { .. } | Layer::Flatten => Vec::new(),
            Layer::Residual(b) => {
                let b = &mut **b;
                let mut v = vec![&mut b.conv1.weight, &mut b.bn1.gamma, &mut b.bn1.beta];
                v.extend([&mut b.conv2.weight, &mut b.bn2.gamma, &mut b.bn2.beta]);
                if let Some((c, bn)) = b.projection.as_mut() {
                    v.extend([&mut c.weight, &mut bn.gamma, &mut bn.beta]);
                }
                v
            }
        }
    }

    pub(crate) fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        match self {
            Layer::BatchNorm(bn) => vec![bn],
            Layer::Residual(b) => {
                let b = &mut **b;
                let mut v = vec![&mut b.bn1, &mut b.bn2];
                if let Some((_, bn)) = b.projection.as_mut() {
                    v.push(bn);
                }
                v
            }
            _ => Vec::new(),
        }
    }

    /// Visits every named parameter and running statistic in a fixed order.
    pub(crate) fn visit<'s>(&'s self, f: &mut dyn FnMut(String, StateKind, StateRef<'s>)) {
        fn conv<'s>(p: &str, c: &'s Conv2d, f: &mut dyn FnMut(String, StateKind, StateRef<'s>)) {
            f(format!("{p}weight"), StateKind::Param, StateRef::Param(&c.weight));
        }
        fn bn<'s>(p: &str, b: &'s BatchNorm, f: &mut dyn FnMut(String, StateKind, StateRef<'s>)) {
            f(format!("{p}gamma"), StateKind::Param, StateRef::Param(&b.gamma));
            f(format!("{p}beta"), StateKind::Param, StateRef::Param(&b.beta));
            f(format!("{p}running_mean"), StateKind::Buffer, StateRef::Buffer(&b.running_mean));
            f(format!("{p}running_var"), StateKind::Buffer, StateRef::Buffer(&b.running_var));
        }
        match self {
            Layer::Conv(c) => conv("", c, f),
            Layer::BatchNorm(b) => bn("", b, f),
            Layer::Dense(d) => {
                f("weight".into(), StateKind::Param, StateRef::Param(&d.weight));
                f("bias".into(), StateKind::Param, StateRef::Param(&d.bias));
            }
            Layer::Residual(b) => {
                conv("conv1.", &b.conv1, f);
                bn("bn1.", &b.bn1, f);
                conv("conv2.", &b.conv2, f);
                bn("bn2.", &b.bn2, f);
                if let Some((c, n)) = &b.projection {
                    conv("proj.", c, f);
                    bn("proj_bn.", n, f);
                }
            }
            Layer::Relu | Layer::GlobalAvgPool | Layer::MaxPool { .. } | Layer::Flatten => {}
        }
    }

    /// Mutable counterpart of [`Layer::visit`]; same names, same order.
    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut [f64], &[usize]) -> Result<()>) -> Result<()> {
        fn conv(p: &str, c: &mut Conv2d, f: &mut dyn FnMut(String, &mut [f64], &[usize]) -> Result<()>) -> Result<()> {
            let shape = c.weight.shape().to_vec();
            f(format!("{p}weight"), c.weight.data_mut(), &shape)
        }
        fn bn(p: &str, b: &mut BatchNorm, f: &mut dyn FnMut(String, &mut [f64], &[usize]) -> Result<()>) -> Result<()> {
            let c = [b.running_mean.len()];
            f(format!("{p}gamma"), b.gamma.data_mut(), &c)?;
            f(format!("{p}beta"), b.beta.data_mut(), &c)?;
            f(format!("{p}running_mean"), &mut b.running_mean, &c)?;
            f(format!("{p}running_var"), &mut b.running_var, &c)
        }
        match self {
            Layer::Conv(c) => conv("", c, f),
            Layer::BatchNorm(b) => bn("", b, f),
            Layer::Dense(d) => {
                let ws = d.weight.shape().to_vec();
                f("weight".into(), d.weight.data_mut(), &ws)?;
                let bs = d.bias.shape().to_vec();
                f("bias".into(), d.bias.data_mut(), &bs)
            }
            Layer::Residual(b) => {
                conv("conv1.", &mut b.conv1, f)?;
                bn("bn1.", &mut b.bn1, f)?;
                conv("conv2.", &mut b.conv2, f)?;
                bn("bn2.", &mut b.bn2, f)?;
                if let Some((c, n)) = b.projection.as_mut() {
                    conv("proj.", c, f)?;
                    bn("proj_bn.", n, f)?;
                }
                Ok(())
            }
            Layer::Relu | Layer::GlobalAvgPool | Layer::MaxPool { .. } | Layer::Flatten => Ok(()),
        }
    }

    pub(crate) fn forward(&self, ctx: &mut PassCtx<'_>, x: Var, params: &mut impl Iterator<Item = Var>) -> Result<Var> {
        match self {
            Layer::Conv(c) => ctx.conv(x, c, params),
            Layer::BatchNorm(bn) => ctx.batch_norm(x, bn, params),
            Layer::Dense(_) => {
                let w = next_param(params)?;
                let b = next_param(params)?;
                let y = ctx.graph.matmul(x, w)?;
                ctx.graph.add_channel_bias(y, b)
            }
            Layer::Relu => Ok(ctx.graph.relu(x)),
            Layer::GlobalAvgPool => {
                let s = ctx.graph.shape(x).to_vec();
                if s.len() != 4 {
                    return Err(Error::Dimension(format!("global pool expects N×C×H×W, got {s:?}")));
                }
                ctx.graph.avgpool2d(x, s[2], s[3], 1)
            }
            Layer::MaxPool { size, stride } => ctx.graph.maxpool2d(x, *size, *size, *stride),
            Layer::Flatten => ctx.graph.flatten(x),
            Layer::Residual(b) => {
                let h = ctx.conv(x, &b.conv1, params)?;
                let h = ctx.batch_norm(h, &b.bn1, params)?;
                let h = ctx.graph.relu(h);
                let h = ctx.conv(h, &b.conv2, params)?;
                let h = ctx.batch_norm(h, &b.bn2, params)?;
                let skip = match &b.projection {
                    Some((c, bn)) => {
                        let s = ctx.conv(x, c, params)?;
                        ctx.batch_norm(s, bn, params)?
                    }
                    None => x,
                };
                ctx.graph.add(skip, h)
            }
        }
    }
}

pub(crate) enum StateRef<'a> {
    Param(&'a Tensor),
    Buffer(&'a [f64]),
}

impl StateRef<'_> {
    pub(crate) fn data(&self) -> &[f64] {
        match self {
            StateRef::Param(t) => t.data(),
            StateRef::Buffer(b) => b,
        }
    }

    pub(crate) fn shape(&self) -> Vec<usize> {
        match self {
            StateRef::Param(t) => t.shape().to_vec(),
            StateRef::Buffer(b) => vec![b.len()],
        }
    }
}

//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so node indices are already a topological order and
//! [`Graph::backward`] simply walks them in reverse, visiting each once.
//!
//! Leaf gradients accumulate across backward calls until [`Graph::zero_grad`];
//! interior gradients are recomputed from scratch on every call.

pub mod check;
pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};
use kernels::{ConvGeom, PoolGeom};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How batch normalisation obtains its statistics.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalise with statistics of the current batch.
    Batch,
    /// Normalise with fixed (running) statistics.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch statistics observed by a [`BnMode::Batch`] pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Number of values reduced per channel.
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Conv2d { input: Var, kernel: Var, geom: ConvGeom, batch: usize, filters: usize },
    Relu { input: Var },
    MaxPool { input: Var, argmax: Vec<usize> },
    AvgPool { input: Var, geom: PoolGeom },
    Add { a: Var, b: Var },
    Scale { input: Var, factor: f64 },
    Reshape { input: Var },
    ChannelBias { input: Var, bias: Var },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch: bool },
    SoftmaxCe { scores: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims_error(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{what}: incompatible shapes {a:?} and {b:?}"))
}

/// `[N, C, rest...]` → (N, C, product of rest).
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Dimension(format!("expected at least [N, C], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn add_into(dst: &mut Option<Vec<f64>>, delta: &[f64]) {
    match dst {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        None => *dst = Some(delta.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a leaf; it takes part in differentiation iff the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Records a leaf whose participation in differentiation is chosen explicitly.
    pub fn param(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), requires_grad, Op::Leaf)
    }

    /// Records a leaf that always receives a gradient.
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf)
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), false, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("node shapes are valid")
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Clears every accumulated gradient, leaves included.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dims_error("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b }))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(dims_error("conv2d", si, sk));
        }
        let geom = ConvGeom {
            channels: si[1],
            height: si[2],
            width: si[3],
            kh: sk[2],
            kw: sk[3],
            stride,
            padding,
        };
        let (oh, ow) = geom.output_hw().ok_or_else(|| {
            Error::Config(format!(
                "conv2d with kernel {sk:?}, stride {stride}, padding {padding} on input {si:?} has no output"
            ))
        })?;
        let (batch, filters) = (si[0], sk[0]);
        let out = kernels::conv2d_forward(self.value(input), self.value(kernel), batch, filters, &geom);
        let rg = self.requires_grad(input) || self.requires_grad(kernel);
        Ok(self.push(vec![batch, filters, oh, ow], out, rg, Op::Conv2d { input, kernel, geom, batch, filters }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        self.push(shape, out, rg, Op::Relu { input })
    }

    fn pool_geom(&self, input: Var, kh: usize, kw: usize, stride: usize) -> Result<(PoolGeom, Vec<usize>)> {
        let s = self.shape(input);
        if s.len() != 4 {
            return Err(Error::Dimension(format!("pooling expects N×C×H×W, got {s:?}")));
        }
        let geom = PoolGeom { planes: s[0] * s[1], height: s[2], width: s[3], kh, kw, stride };
        let (oh, ow) = geom
            .output_hw()
            .ok_or_else(|| Error::Config(format!("pool window {kh}×{kw} stride {stride} does not fit {s:?}")))?;
        Ok((geom, vec![s[0], s[1], oh, ow]))
    }

    pub fn maxpool2d(&mut self, input: Var, kh: usize, kw: usize, stride: usize) -> Result<Var> {
        let (geom, shape) = self.pool_geom(input, kh, kw, stride)?;
        let (out, argmax) = kernels::maxpool_forward(self.value(input), &geom);
        let rg = self.requires_grad(input);
        Ok(self.push(shape, out, rg, Op::MaxPool { input, argmax }))
    }

    pub fn avgpool2d(&mut self, input: Var, kh: usize, kw: usize, stride: usize) -> Result<Var> {
        let (geom, shape) = self.pool_geom(input, kh, kw, stride)?;
        let out = kernels::avgpool_forward(self.value(input), &geom);
        let rg = self.requires_grad(input);
        Ok(self.push(shape, out, rg, Op::AvgPool { input, geom }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dims_error("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, out, rg, Op::Add { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.value(input).iter().map(|x| x * factor).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        self.push(shape, out, rg, Op::Scale { input, factor })
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(input).len() {
            return Err(dims_error("reshape", self.shape(input), shape));
        }
        let out = self.value(input).to_vec();
        let rg = self.requires_grad(input);
        Ok(self.push(shape.to_vec(), out, rg, Op::Reshape { input }))
    }

    /// `N×…` → `N×(…)`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        let n = *s.first().ok_or_else(|| Error::Dimension("flatten of a rank-0 tensor".into()))?;
        let rest = s[1..].iter().product();
        self.reshape(input, &[n, rest])
    }

    /// Adds a per-channel bias `[C]` to an `N×C×…` tensor.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (n, c, inner) = channel_layout(self.shape(input))?;
        if self.shape(bias) != [c] {
            return Err(dims_error("channel bias", self.shape(input), self.shape(bias)));
        }
        let b = self.value(bias);
        let mut out = self.value(input).to_vec();
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v += b[ch]);
            }
        }
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input) || self.requires_grad(bias);
        Ok(self.push(shape, out, rg, Op::ChannelBias { input, bias }))
    }

    /// Per-channel normalisation `γ·(x − μ)/√(σ² + eps) + β` over every axis except 1.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, c, inner) = channel_layout(self.shape(input))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dims_error("batch_norm affine", self.shape(input), self.shape(gamma)));
        }
        let x = self.value(input);
        let count = n * inner;
        let (mean, var, stats) = match mode {
            BnMode::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * inner;
                        s += x[base..base + inner].iter().sum::<f64>();
                    }
                    let mu = s / count as f64;
                    let mut q = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * inner;
                        q += x[base..base + inner].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = q / count as f64;
                }
                let stats = BatchStats { mean: mean.clone(), var: var.clone(), count };
                (mean, var, Some(stats))
            }
            BnMode::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Dimension(format!("running stats of length {} for {c} channels", mean.len())));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input) || self.requires_grad(gamma) || self.requires_grad(beta);
        let batch = matches!(mode, BnMode::Batch);
        let v = self.push(shape, out, rg, Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch });
        Ok((v, stats))
    }

    /// Mean softmax cross-entropy of `N×K` scores against class indices; returns a `[1]` node.
    pub fn softmax_cross_entropy(&mut self, scores: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(scores);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("scores must be N×K, got {s:?}")));
        }
        let (n, k) = (s[0], s[1]);
        if labels.len() != n {
            return Err(Error::Dimension(format!("{} labels for {n} score rows", labels.len())));
        }
        if let Some(i) = labels.iter().position(|&y| y >= k) {
            return Err(Error::Data(format!("sample {i}: label {} outside [0, {k})", labels[i])));
        }
        let losses = kernels::cross_entropy_rows(self.value(scores), n, k, labels);
        let probs = kernels::softmax_rows(self.value(scores), n, k);
        let loss = losses.iter().sum::<f64>() / n as f64;
        let rg = self.requires_grad(scores);
        Ok(self.push(vec![1], vec![loss], rg, Op::SoftmaxCe { scores, labels: labels.to_vec(), probs }))
    }

    /// Back-propagates from a single-element node.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.node(root).value.len() != 1 {
            return Err(Error::Dimension(format!("backward from non-scalar {:?}", self.shape(root))));
        }
        for n in &mut self.nodes[..=root.0] {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        if !self.node(root).requires_grad {
            return Ok(());
        }
        match &mut self.nodes[root.0].grad {
            Some(g) => g[0] += 1.0,
            slot @ None => *slot = Some(vec![1.0]),
        }
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = node.grad.as_deref() else { continue };
            for (target, delta) in local_grads(before, node, upstream) {
                add_into(&mut before[target.0].grad, &delta);
            }
        }
        Ok(())
    }
}

/// Gradient contributions of one node to each of its differentiable inputs.
fn local_grads(nodes: &[Node], node: &Node, up: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let needs = |v: Var| nodes[v.0].requires_grad;
    let mut out = Vec::with_capacity(3);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if needs(*a) {
                let mut da = vec![0.0; m * k];
                kernels::matmul_a_bt_acc(up, &nodes[b.0].value, &mut da, m, k, n);
                out.push((*a, da));
            }
            if needs(*b) {
                let mut db = vec![0.0; k * n];
                kernels::matmul_at_b_acc(&nodes[a.0].value, up, &mut db, m, k, n);
                out.push((*b, db));
            }
        }
        Op::Conv2d { input, kernel, geom, batch, filters } => {
            let mut dx = needs(*input).then(|| vec![0.0; nodes[input.0].value.len()]);
            let mut dw = needs(*kernel).then(|| vec![0.0; nodes[kernel.0].value.len()]);
            kernels::conv2d_backward(
                &nodes[input.0].value,
                &nodes[kernel.0].value,
                up,
                *batch,
                *filters,
                geom,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
            );
            if let Some(dx) = dx {
                out.push((*input, dx));
            }
            if let Some(dw) = dw {
                out.push((*kernel, dw));
            }
        }
        Op::Relu { input } => {
            let d = nodes[input.0].value.iter().zip(up).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
            out.push((*input, d));
        }
        Op::MaxPool { input, argmax } => {
            let mut d = vec![0.0; nodes[input.0].value.len()];
            for (&idx, &g) in argmax.iter().zip(up) {
                d[idx] += g;
            }
            out.push((*input, d));
        }
        Op::AvgPool { input, geom } => {
            let mut d = vec![0.0; nodes[input.0].value.len()];
            kernels::avgpool_backward(up, geom, &mut d);
            out.push((*input, d));
        }
        Op::Add { a, b } => {
            if needs(*a) {
                out.push((*a, up.to_vec()));
            }
            if needs(*b) {
                out.push((*b, up.to_vec()));
            }
        }
        Op::Scale { input, factor } => out.push((*input, up.iter().map(|g| g * factor).collect())),
        Op::Reshape { input } => out.push((*input, up.to_vec())),
        Op::ChannelBias { input, bias } => {
            if needs(*input) {
                out.push((*input, up.to_vec()));
            }
            if needs(*bias) {
                let (n, c, inner) = channel_layout(&nodes[input.0].shape).expect("checked on forward");
                let mut db = vec![0.0; c];
                for s in 0..n {
                    for (ch, d) in db.iter_mut().enumerate() {
                        let base = (s * c + ch) * inner;
                        *d += up[base..base + inner].iter().sum::<f64>();
                    }
                }
                out.push((*bias, db));
            }
        }
        Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch } => {
            let (n, c, inner) = channel_layout(&nodes[input.0].shape).expect("checked on forward");
            let g = &nodes[gamma.0].value;
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * inner;
                    for i in base..base + inner {
                        dgamma[ch] += up[i] * xhat[i];
                        dbeta[ch] += up[i];
                    }
                }
            }
            if needs(*input) {
                let mut dx = vec![0.0; up.len()];
                let m = (n * inner) as f64;
                for ch in 0..c {
                    let scale = g[ch] * inv_std[ch];
                    // Σ dxhat and Σ dxhat·xhat, with dxhat = up·γ
                    let (sum_d, sum_dx) = (dbeta[ch] * g[ch], dgamma[ch] * g[ch]);
                    for s in 0..n {
                        let base = (s * c + ch) * inner;
                        for i in base..base + inner {
                            dx[i] = if *batch {
                                inv_std[ch] / m * (m * up[i] * g[ch] - sum_d - xhat[i] * sum_dx)
                            } else {
                                up[i] * scale
                            };
                        }
                    }
                }
                out.push((*input, dx));
            }
            if needs(*gamma) {
                out.push((*gamma, dgamma));
            }
            if needs(*beta) {
                out.push((*beta, dbeta));
            }
        }
        Op::SoftmaxCe { scores, labels, probs } => {
            let n = labels.len();
            let k = probs.len() / n;
            let scale = up[0] / n as f64;
            let mut d = probs.clone();
            for (r, &y) in labels.iter().enumerate() {
                d[r * k + y] -= 1.0;
            }
            d.iter_mut().for_each(|v| *v *= scale);
            out.push((*scores, d));
        }
    }
    out
}

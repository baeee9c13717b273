use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::layers::{BatchNorm, Conv2d, Dense, Layer, PassCtx, ResidualBlock, StateKind, StateRef};
use crate::rng::{self, tag};
use crate::tensor::{Fnv, Tensor};

pub const HEAD_GROUP: &str = "head";
pub const BASE_GROUPS: [&str; 4] = ["stem", "stage1", "stage2", "stage3"];

/// Uniform bound for freshly initialised head weights.
const HEAD_INIT_BOUND: f64 = 0.05;

/// Smallest spatial size that survives the two stride-2 stages with at least
/// a 4×4 map for the global pool.
pub const MIN_SPATIAL: usize = 16;

#[derive(Clone, Debug)]
pub struct LayerGroup {
    pub name: String,
    pub layers: Vec<Layer>,
    pub trainable: bool,
    pub learning_rate: f64,
}

impl LayerGroup {
    fn new(name: &str, layers: Vec<Layer>) -> Self {
        LayerGroup { name: name.to_string(), layers, trainable: true, learning_rate: 1e-3 }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Checksum over parameters and running statistics.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for layer in &self.layers {
            layer.visit(&mut |name, _, v| {
                h.write(name.as_bytes());
                for x in v.data() {
                    h.write(&x.to_bits().to_le_bytes());
                }
            });
        }
        h.finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Trainable groups normalise with batch statistics and record them;
    /// frozen groups behave as in evaluation.
    Train,
    Eval,
}

/// Graph handles produced by one forward pass.
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    /// Output of the last base group (input to the head).
    pub features: Var,
    bindings: Vec<Vec<Var>>,
    observed: Vec<Vec<crate::autodiff::BatchStats>>,
}

/// Micro residual CNN split into `stem`, `stage1..3` and `head` groups.
#[derive(Clone, Debug)]
pub struct Model {
    groups: Vec<LayerGroup>,
    num_classes: usize,
    input_shape: [usize; 3],
    width: usize,
}

/// Builds the network: stem conv, three residual stages of two blocks each
/// (widths `w, 2w, 4w`, the last two downsampling by 2), global average pool
/// and a dense head.
pub fn build_micro_resnet(input_shape: [usize; 3], num_classes: usize, width: usize, seed: u64) -> Result<Model> {
    let [c, h, w] = input_shape;
    if h < MIN_SPATIAL || w < MIN_SPATIAL {
        return Err(Error::Config(format!(
            "input {h}×{w} is too small for the pooling pyramid (need ≥ {MIN_SPATIAL}×{MIN_SPATIAL})"
        )));
    }
    if c == 0 || width == 0 {
        return Err(Error::Config("channels and width must be positive".into()));
    }
    if num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
    }
    let mut r = rng::stream(seed, &[tag::INIT]);
    let stem = vec![
        Layer::Conv(Conv2d::he(c, width, 3, 1, 1, &mut r)),
        Layer::BatchNorm(BatchNorm::new(width)),
        Layer::Relu,
    ];
    let mut stage = |inp: usize, out: usize, stride: usize| {
        vec![
            Layer::Residual(Box::new(ResidualBlock::new(inp, out, stride, &mut r))),
            Layer::Residual(Box::new(ResidualBlock::new(out, out, 1, &mut r))),
        ]
    };
    let s1 = stage(width, width, 1);
    let s2 = stage(width, 2 * width, 2);
    let s3 = stage(2 * width, 4 * width, 2);
    let mut model = Model {
        groups: vec![
            LayerGroup::new("stem", stem),
            LayerGroup::new("stage1", s1),
            LayerGroup::new("stage2", s2),
            LayerGroup::new("stage3", s3),
            LayerGroup::new(HEAD_GROUP, Vec::new()),
        ],
        num_classes,
        input_shape,
        width,
    };
    model.install_head(num_classes, &mut rng::stream(seed, &[tag::HEAD]));
    Ok(model)
}

impl Model {
    pub fn groups(&self) -> &[LayerGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [LayerGroup] {
        &mut self.groups
    }

    pub fn group(&self, name: &str) -> Option<&LayerGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn feature_dim(&self) -> usize {
        4 * self.width
    }

    pub fn param_count(&self) -> usize {
        self.groups.iter().map(LayerGroup::param_count).sum()
    }

    pub fn group_names(&self) -> Vec<String> {
        self.groups.iter().map(|g| g.name.clone()).collect()
    }

    pub fn learning_rates(&self) -> Vec<f64> {
        self.groups.iter().map(|g| g.learning_rate).collect()
    }

    /// Assigns one rate per group, base first.
    pub fn set_learning_rates(&mut self, rates: &[f64]) -> Result<()> {
        if rates.len() != self.groups.len() {
            return Err(Error::Config(format!("{} learning rates for {} groups", rates.len(), self.groups.len())));
        }
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config(format!("learning rates must be finite and non-negative: {rates:?}")));
        }
        for (g, &r) in self.groups.iter_mut().zip(rates) {
            g.learning_rate = r;
        }
        Ok(())
    }

    fn install_head(&mut self, num_classes: usize, r: &mut rng::Rng) {
        let head = self.groups.last_mut().expect("head group");
        head.layers = vec![
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::Flatten,
            Layer::Dense(Dense::small(4 * self.width, num_classes, HEAD_INIT_BOUND, r)),
        ];
        let flag = head.trainable;
        head.params_mut().into_iter().for_each(|p| p.set_requires_grad(flag));
        self.num_classes = num_classes;
    }

    /// Swaps in a freshly initialised head for `num_classes` outputs. Base
    /// groups, including their running statistics, are left untouched.
    pub fn replace_head(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        self.install_head(num_classes, &mut rng::stream(seed, &[tag::HEAD]));
        Ok(())
    }

    pub fn set_trainable(&mut self, names: &[&str], flag: bool) -> Result<()> {
        if let Some(bad) = names.iter().find(|n| self.group(n).is_none()) {
            return Err(Error::Config(format!("unknown layer group `{bad}`")));
        }
        for g in self.groups.iter_mut().filter(|g| names.contains(&g.name.as_str())) {
            g.trainable = flag;
            g.params_mut().into_iter().for_each(|p| p.set_requires_grad(flag));
        }
        Ok(())
    }

    pub fn set_all_trainable(&mut self, flag: bool) {
        let names: Vec<String> = self.group_names();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        self.set_trainable(&names, flag).expect("own group names");
    }

    /// Checksum over every base (non-head) group.
    pub fn base_checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for g in &self.groups[..self.groups.len() - 1] {
            h.write(&g.checksum().to_le_bytes());
        }
        h.finish()
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for g in &self.groups {
            h.write(&g.checksum().to_le_bytes());
        }
        h.finish()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.input_shape {
            return Err(Error::Dimension(format!(
                "model expects N×{:?}, got {shape:?}",
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Records a forward pass of `input` (`N×C×H×W`) on `g`.
    pub fn forward(&self, g: &mut Graph, input: Var, mode: Mode) -> Result<Forward> {
        self.check_input(g.shape(input))?;
        let mut x = input;
        let mut features = input;
        let mut bindings = Vec::with_capacity(self.groups.len());
        let mut observed = Vec::with_capacity(self.groups.len());
        for (gi, group) in self.groups.iter().enumerate() {
            let learn = mode == Mode::Train && group.trainable;
            let vars: Vec<Var> = group.params().into_iter().map(|p| g.param(p, learn)).collect();
            let mut ctx = PassCtx { graph: g, batch_stats: learn, observed: Vec::new() };
            let mut it = vars.iter().copied();
            for layer in &group.layers {
                x = layer.forward(&mut ctx, x, &mut it)?;
            }
            debug_assert!(it.next().is_none());
            observed.push(ctx.observed);
            bindings.push(vars);
            if gi + 2 == self.groups.len() {
                features = x;
            }
        }
        Ok(Forward { logits: x, features, bindings, observed })
    }

    /// Folds batch statistics from a training pass into the running statistics
    /// of trainable groups. Frozen groups never observed batch statistics.
    pub fn commit_stats(&mut self, fwd: &Forward) {
        for (group, stats) in self.groups.iter_mut().zip(&fwd.observed) {
            if stats.is_empty() {
                continue;
            }
            let bns: Vec<&mut BatchNorm> = group.layers.iter_mut().flat_map(Layer::batch_norms_mut).collect();
            debug_assert_eq!(bns.len(), stats.len());
            for (bn, s) in bns.into_iter().zip(stats) {
                bn.update_running(s);
            }
        }
    }

    /// Adds graph gradients of every bound parameter into the parameter tensors.
    pub fn accumulate_grads(&mut self, g: &Graph, fwd: &Forward) -> Result<()> {
        for (group, vars) in self.groups.iter_mut().zip(&fwd.bindings) {
            for (p, v) in group.params_mut().into_iter().zip(vars) {
                if let Some(d) = g.grad(*v) {
                    p.accumulate_grad(d)?;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.groups {
            g.params_mut().into_iter().for_each(Tensor::zero_grad);
        }
    }

    /// Evaluation-mode logits, `N×K`.
    pub fn predict(&self, input: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(input);
        let f = self.forward(&mut g, x, Mode::Eval)?;
        Ok(g.tensor(f.logits))
    }

    /// Evaluation-mode activations entering the head.
    pub fn features(&self, input: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(input);
        let f = self.forward(&mut g, x, Mode::Eval)?;
        Ok(g.tensor(f.features))
    }

    /// Every named parameter and running statistic, in checkpoint order.
    pub fn named_state(&self) -> Vec<(String, StateKind, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for g in &self.groups {
            for (li, layer) in g.layers.iter().enumerate() {
                layer.visit(&mut |name, kind, v: StateRef<'_>| {
                    out.push((format!("{}.{li}.{name}", g.name), kind, v.shape(), v.data().to_vec()));
                });
            }
        }
        out
    }

    pub(crate) fn visit_state_mut(
        &mut self,
        f: &mut dyn FnMut(String, &mut [f64], &[usize]) -> Result<()>,
    ) -> Result<()> {
        for g in &mut self.groups {
            let gname = g.name.clone();
            for (li, layer) in g.layers.iter_mut().enumerate() {
                layer.visit_mut(&mut |name, data, shape| f(format!("{gname}.{li}.{name}"), data, shape))?;
            }
        }
        Ok(())
    }

    /// Copies every parameter and running statistic from `other`, which must
    /// have the same architecture. Trainability and learning rates are kept.
    pub fn load_state_from(&mut self, other: &Model) -> Result<()> {
        let state = other.named_state();
        let mut it = state.into_iter();
        self.visit_state_mut(&mut |name, data, shape| match it.next() {
            Some((n, _, s, v)) if n == name && s == shape => {
                data.copy_from_slice(&v);
                Ok(())
            }
            _ => Err(Error::Checkpoint(format!("state mismatch at `{name}`"))),
        })?;
        if it.next().is_some() {
            return Err(Error::Checkpoint("source model has extra state".into()));
        }
        Ok(())
    }

    pub(crate) fn set_meta(&mut self, groups: &[(String, bool, f64)]) -> Result<()> {
        if groups.len() != self.groups.len() {
            return Err(Error::Checkpoint(format!("{} groups stored, model has {}", groups.len(), self.groups.len())));
        }
        for (g, (name, trainable, lr)) in self.groups.iter_mut().zip(groups) {
            if &g.name != name {
                return Err(Error::Checkpoint(format!("group `{name}` where `{}` expected", g.name)));
            }
            g.trainable = *trainable;
            g.learning_rate = *lr;
            g.params_mut().into_iter().for_each(|p| p.set_requires_grad(*trainable));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, seed: u64) -> Tensor {
        use rand::Rng as _;
        let mut r = rng::stream(seed, &[99]);
        Tensor::from_fn(&[n, 1, 16, 16], |_| r.gen_range(0.0..1.0))
    }

    #[test]
    fn output_shape_is_batch_by_classes() {
        let m = build_micro_resnet([1, 16, 16], 3, 4, 1).unwrap();
        assert_eq!(m.predict(batch(4, 0)).unwrap().shape(), &[4, 3]);
        assert_eq!(m.groups().last().unwrap().name, HEAD_GROUP);
    }

    #[test]
    fn rejects_small_inputs_and_single_class() {
        assert!(matches!(build_micro_resnet([1, 15, 16], 3, 4, 1), Err(Error::Config(_))));
        assert!(matches!(build_micro_resnet([1, 16, 16], 1, 4, 1), Err(Error::Config(_))));
    }

    #[test]
    fn zero_branch_block_is_identity() {
        let mut r = rng::stream(3, &[]);
        let mut block = ResidualBlock::new(3, 3, 1, &mut r);
        block.conv1.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        block.conv2.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let layer = Layer::Residual(Box::new(block));
        for batch_stats in [true, false] {
            let mut g = Graph::new();
            let x = Tensor::from_fn(&[2, 3, 5, 5], |i| (i as f64 * 0.77).sin() * 3.0);
            let xv = g.constant(x.clone());
            let vars: Vec<Var> = layer.params().into_iter().map(|p| g.param(p, true)).collect();
            let mut ctx = PassCtx { graph: &mut g, batch_stats, observed: Vec::new() };
            let y = layer.forward(&mut ctx, xv, &mut vars.into_iter()).unwrap();
            assert_eq!(g.value(y), x.data());
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let m = build_micro_resnet([1, 16, 16], 4, 4, 5).unwrap();
        let a = m.predict(batch(3, 1)).unwrap();
        let b = m.predict(batch(3, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn replace_head_preserves_base_and_is_seeded() {
        let mut m = build_micro_resnet([1, 16, 16], 4, 4, 5).unwrap();
        let before_feat = m.features(batch(2, 2)).unwrap();
        let before_logits = m.predict(batch(2, 2)).unwrap();
        let base = m.base_checksum();
        m.replace_head(4, 77).unwrap();
        assert_eq!(m.base_checksum(), base);
        assert_eq!(m.features(batch(2, 2)).unwrap(), before_feat);
        assert_ne!(m.predict(batch(2, 2)).unwrap(), before_logits);

        let head_a = m.group(HEAD_GROUP).unwrap().checksum();
        m.replace_head(6, 78).unwrap();
        assert_eq!(m.num_classes(), 6);
        m.replace_head(4, 77).unwrap();
        assert_eq!(m.group(HEAD_GROUP).unwrap().checksum(), head_a);
    }

    #[test]
    fn unknown_group_is_rejected() {
        let mut m = build_micro_resnet([1, 16, 16], 2, 2, 0).unwrap();
        assert!(matches!(m.set_trainable(&["stage9"], false), Err(Error::Config(_))));
    }

    #[test]
    fn frozen_groups_do_not_record_stats() {
        let mut m = build_micro_resnet([1, 16, 16], 3, 2, 0).unwrap();
        m.set_trainable(&BASE_GROUPS, false).unwrap();
        let before = m.base_checksum();
        let mut g = Graph::new();
        let x = g.constant(batch(4, 3));
        let f = m.forward(&mut g, x, Mode::Train).unwrap();
        let loss = g.softmax_cross_entropy(f.logits, &[0, 1, 2, 0]).unwrap();
        g.backward(loss).unwrap();
        m.commit_stats(&f);
        m.accumulate_grads(&g, &f).unwrap();
        assert_eq!(m.base_checksum(), before);
        for name in BASE_GROUPS {
            for p in m.group(name).unwrap().params() {
                assert!(p.grad().is_none());
            }
        }
        assert!(m.group(HEAD_GROUP).unwrap().params().iter().all(|p| p.grad().is_some()));
    }
}

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

/// One layer group as seen by an optimizer.
pub struct OptGroup<'a> {
    pub params: Vec<&'a mut Tensor>,
    pub lr: f64,
    pub trainable: bool,
}

/// Borrows a model's groups with their current trainability and learning rates.
pub fn model_groups(model: &mut Model) -> Vec<OptGroup<'_>> {
    model
        .groups_mut()
        .iter_mut()
        .map(|g| {
            let (lr, trainable) = (g.learning_rate, g.trainable);
            OptGroup { params: g.params_mut(), lr, trainable }
        })
        .collect()
}

pub trait Optimizer {
    /// Applies one update from the accumulated gradients. Frozen groups are skipped.
    fn step(&mut self, groups: &mut [OptGroup<'_>]) -> Result<()>;
}

fn check_finite(groups: &[OptGroup<'_>], iteration: usize) -> Result<()> {
    for (gi, g) in groups.iter().enumerate().filter(|(_, g)| g.trainable) {
        if !(g.lr.is_finite() && g.lr >= 0.0) {
            return Err(Error::Config(format!("group {gi}: invalid learning rate {}", g.lr)));
        }
        for p in &g.params {
            if p.grad().is_some_and(|d| d.iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence {
                    iteration,
                    detail: format!("non-finite gradient in group {gi}"),
                });
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias-corrected moments. Moments are allocated lazily per
/// (group, parameter) the first time that parameter is updated.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    moments: Vec<Vec<Option<Moments>>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, t: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Second moments of every allocated slot, for inspection.
    pub fn second_moments(&self) -> impl Iterator<Item = &[f64]> {
        self.moments.iter().flatten().flatten().map(|m| m.v.as_slice())
    }
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(AdamConfig::default())
    }
}

impl Optimizer for Adam {
    fn step(&mut self, groups: &mut [OptGroup<'_>]) -> Result<()> {
        check_finite(groups, self.t as usize)?;
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        if self.moments.len() < groups.len() {
            self.moments.resize_with(groups.len(), Vec::new);
        }
        for (g, slots) in groups.iter_mut().zip(&mut self.moments) {
            if !g.trainable {
                continue;
            }
            if slots.len() < g.params.len() {
                slots.resize_with(g.params.len(), || None);
            }
            for (p, slot) in g.params.iter_mut().zip(slots.iter_mut()) {
                let n = p.numel();
                let st = slot.get_or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
                let (w, grad) = p.value_and_grad_mut();
                for i in 0..n {
                    let gi = grad[i];
                    st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * gi;
                    st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * gi * gi;
                    let m_hat = st.m[i] / bc1;
                    let v_hat = st.v[i] / bc2;
                    w[i] -= g.lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Plain gradient descent.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    steps: usize,
}

impl Optimizer for Sgd {
    fn step(&mut self, groups: &mut [OptGroup<'_>]) -> Result<()> {
        check_finite(groups, self.steps)?;
        self.steps += 1;
        for g in groups.iter_mut().filter(|g| g.trainable) {
            for p in g.params.iter_mut() {
                let (w, grad) = p.value_and_grad_mut();
                w.iter_mut().zip(grad).for_each(|(w, d)| *w -= g.lr * d);
            }
        }
        Ok(())
    }
}

//! Learning-rate range test.
//!
//! The rate grows geometrically from `lr_lo` to `lr_hi`, one optimisation step
//! per rate. Losses are smoothed with a bias-corrected EMA; the sweep stops
//! once the smoothed loss exceeds `divergence_factor ×` the best seen. The
//! suggestion is the rate at the steepest descent of the smoothed curve.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

/// Anything that can take one training step at a given rate and be rolled back.
pub trait SweepTarget {
    type Snapshot;

    fn snapshot(&self) -> Self::Snapshot;

    fn restore(&mut self, snapshot: Self::Snapshot);

    /// Takes one step at `lr` and returns the loss measured before the update.
    fn step(&mut self, lr: f64, iteration: usize) -> Result<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrFinderConfig {
    pub lr_lo: f64,
    pub lr_hi: f64,
    pub num_iters: usize,
    /// EMA coefficient β.
    pub smoothing: f64,
    pub divergence_factor: f64,
}

impl Default for LrFinderConfig {
    fn default() -> Self {
        LrFinderConfig { lr_lo: 1e-7, lr_hi: 10.0, num_iters: 100, smoothing: 0.98, divergence_factor: 4.0 }
    }
}

impl LrFinderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_lo > 0.0 && self.lr_lo < self.lr_hi && self.lr_hi.is_finite()) {
            return Err(Error::Config(format!("need 0 < lr_lo < lr_hi, got {} and {}", self.lr_lo, self.lr_hi)));
        }
        if self.num_iters < 2 {
            return Err(Error::Config("range test needs at least 2 iterations".into()));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!("smoothing β must lie in [0, 1), got {}", self.smoothing)));
        }
        if self.divergence_factor <= 1.0 {
            return Err(Error::Config("divergence factor must exceed 1".into()));
        }
        Ok(())
    }

    /// `lr_i = lr_lo · (lr_hi/lr_lo)^(i/(n−1))`, with exact endpoints.
    pub fn lr_at(&self, i: usize) -> f64 {
        let last = self.num_iters - 1;
        match i {
            0 => self.lr_lo,
            i if i == last => self.lr_hi,
            i => self.lr_lo * (self.lr_hi / self.lr_lo).powf(i as f64 / last as f64),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TracePoint {
    pub iter: usize,
    pub lr: f64,
    pub raw_loss: f64,
    pub smoothed_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LrFinderTrace {
    pub points: Vec<TracePoint>,
    /// Index of the point at which the sweep was stopped, when it diverged.
    pub divergence_index: Option<usize>,
    pub suggested_lr: f64,
}

impl LrFinderTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,lr,raw_loss,smoothed_loss\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{},{}", p.iter, p.lr, p.raw_loss, p.smoothed_loss);
        }
        s
    }
}

/// Runs the sweep and restores `target` to its entry state, also on error.
pub fn lr_range_test<T: SweepTarget>(target: &mut T, cfg: &LrFinderConfig) -> Result<LrFinderTrace> {
    cfg.validate()?;
    let entry = target.snapshot();
    let result = sweep(target, cfg);
    target.restore(entry);
    result
}

fn sweep<T: SweepTarget>(target: &mut T, cfg: &LrFinderConfig) -> Result<LrFinderTrace> {
    let beta = cfg.smoothing;
    let mut avg = 0.0;
    let mut best = f64::INFINITY;
    let mut points = Vec::with_capacity(cfg.num_iters);
    let mut divergence_index = None;
    for i in 0..cfg.num_iters {
        let lr = cfg.lr_at(i);
        // A failed step (e.g. non-finite gradients) counts as divergence after the first one.
        let raw = match target.step(lr, i) {
            Ok(l) => l,
            Err(e) if i == 0 => return Err(e),
            Err(_) => f64::INFINITY,
        };
        if !raw.is_finite() {
            if i == 0 {
                return Err(Error::Config(format!("loss is non-finite at lr_lo = {lr}; lr_lo is too high")));
            }
            points.push(TracePoint { iter: i, lr, raw_loss: raw, smoothed_loss: f64::INFINITY });
            divergence_index = Some(i);
            break;
        }
        avg = beta * avg + (1.0 - beta) * raw;
        let smoothed = avg / (1.0 - beta.powi(i as i32 + 1));
        points.push(TracePoint { iter: i, lr, raw_loss: raw, smoothed_loss: smoothed });
        if i > 0 && smoothed > cfg.divergence_factor * best {
            divergence_index = Some(i);
            break;
        }
        best = best.min(smoothed);
    }
    let usable = match divergence_index {
        Some(d) => &points[..d],
        None => &points[..],
    };
    let suggested_lr = suggest(usable);
    Ok(LrFinderTrace { points, divergence_index, suggested_lr })
}

/// Steepest negative central-difference slope on interior points, else the
/// rate at the loss minimum divided by ten.
fn suggest(points: &[TracePoint]) -> f64 {
    let steepest = (1..points.len().saturating_sub(1))
        .map(|i| (i, points[i + 1].smoothed_loss - points[i - 1].smoothed_loss))
        .filter(|(_, s)| *s < 0.0)
        .min_by(|a, b| a.1.total_cmp(&b.1));
    if let Some((i, _)) = steepest {
        return points[i].lr;
    }
    let at_min = points
        .iter()
        .min_by(|a, b| a.smoothed_loss.total_cmp(&b.smoothed_loss))
        .map_or(points[0].lr, |p| p.lr);
    at_min / 10.0
}

/// `f(x) = ½λx²` minimised by plain gradient descent; stable iff `lr < 2/λ`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticBowl {
    pub lambda: f64,
    pub x: f64,
}

impl QuadraticBowl {
    pub fn new(lambda: f64, x0: f64) -> Self {
        QuadraticBowl { lambda, x: x0 }
    }

    pub fn stability_threshold(&self) -> f64 {
        2.0 / self.lambda
    }
}

impl SweepTarget for QuadraticBowl {
    type Snapshot = f64;

    fn snapshot(&self) -> f64 {
        self.x
    }

    fn restore(&mut self, x: f64) {
        self.x = x;
    }

    fn step(&mut self, lr: f64, _iteration: usize) -> Result<f64> {
        let loss = 0.5 * self.lambda * self.x * self.x;
        self.x -= lr * self.lambda * self.x;
        Ok(loss)
    }
}

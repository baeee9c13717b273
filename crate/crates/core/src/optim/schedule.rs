use std::f64::consts::PI;

use crate::error::{Error, Result};

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·t_cur/t_i))` for `0 ≤ t_cur ≤ t_i`.
pub fn cosine_lr(lr_max: f64, lr_min: f64, t_cur: usize, t_i: usize) -> Result<f64> {
    if t_i == 0 {
        return Err(Error::Schedule("cycle length must be positive".into()));
    }
    if t_cur > t_i {
        return Err(Error::Schedule(format!("position {t_cur} beyond cycle length {t_i}")));
    }
    let progress = t_cur as f64 / t_i as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * progress).cos()))
}

/// Cosine annealing with warm restarts, advanced once per iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineRestartSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    cycle_len: usize,
    pub cycle_mult: usize,
    t_cur: usize,
    cycle: usize,
}

impl CosineRestartSchedule {
    pub fn new(lr_max: f64, lr_min: f64, cycle_len: usize, cycle_mult: usize) -> Result<Self> {
        if !(lr_min > 0.0 && lr_min < lr_max && lr_max.is_finite()) {
            return Err(Error::Config(format!("need 0 < lr_min < lr_max, got {lr_min} and {lr_max}")));
        }
        if cycle_len == 0 || cycle_mult == 0 {
            return Err(Error::Config("cycle length and multiplier must be ≥ 1".into()));
        }
        Ok(CosineRestartSchedule { lr_max, lr_min, cycle_len, cycle_mult, t_cur: 0, cycle: 0 })
    }

    pub fn position(&self) -> usize {
        self.t_cur
    }

    pub fn cycle_len(&self) -> usize {
        self.cycle_len
    }

    pub fn cycle(&self) -> usize {
        self.cycle
    }

    /// Rate at an arbitrary position of the current cycle.
    pub fn lr_at(&self, t_cur: usize) -> Result<f64> {
        cosine_lr(self.lr_max, self.lr_min, t_cur, self.cycle_len)
    }

    pub fn current(&self) -> f64 {
        self.lr_at(self.t_cur).expect("position stays inside the cycle")
    }

    /// Moves one iteration forward; reaching the cycle end starts the next,
    /// longer cycle at `lr_max`.
    pub fn advance(&mut self) {
        self.t_cur += 1;
        if self.t_cur >= self.cycle_len {
            self.t_cur = 0;
            self.cycle += 1;
            self.cycle_len *= self.cycle_mult;
        }
    }
}

impl Iterator for CosineRestartSchedule {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        let lr = self.current();
        self.advance();
        Some(lr)
    }
}

/// Geometrically spaced per-group rates from `lo` (first group) to `hi` (last).
pub fn slice_lrs(lo: f64, hi: f64, groups: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi.is_finite()) {
        return Err(Error::Config(format!("slice bounds must be positive and finite, got ({lo}, {hi})")));
    }
    if lo > hi {
        return Err(Error::Config(format!("slice lower bound {lo} exceeds upper bound {hi}")));
    }
    match groups {
        0 => Err(Error::Config("slice needs at least one group".into())),
        1 if lo != hi => Err(Error::Config("a single-group slice needs lo = hi".into())),
        1 => Ok(vec![lo]),
        g => {
            let ratio = hi / lo;
            let last = (g - 1) as f64;
            Ok((0..g)
                .map(|i| match i {
                    0 => lo,
                    i if i == g - 1 => hi,
                    i => lo * ratio.powf(i as f64 / last),
                })
                .collect())
        }
    }
}

//! Optimizers and learning-rate policies.

mod lr_finder;
mod optimizer;
mod schedule;

pub use lr_finder::{lr_range_test, LrFinderConfig, LrFinderTrace, QuadraticBowl, SweepTarget, TracePoint};
pub use optimizer::{model_groups, Adam, AdamConfig, OptGroup, Optimizer, Sgd};
pub use schedule::{cosine_lr, slice_lrs, CosineRestartSchedule};

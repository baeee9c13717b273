//! Layers, layer groups and the micro residual CNN.

pub mod checkpoint;
mod layers;
mod model;

pub use layers::{BatchNorm, Conv2d, Dense, Layer, LayerKind, ResidualBlock, StateKind};
pub use model::{build_micro_resnet, Forward, LayerGroup, Mode, Model, BASE_GROUPS, HEAD_GROUP, MIN_SPATIAL};

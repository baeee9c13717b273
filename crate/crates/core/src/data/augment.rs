use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::dataset::LabeledSample;
use crate::data::image;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Random training-time transforms, applied in the fixed order
/// flip → rotate → zoom → lighting. Mirroring is the horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub flip_h: f64,
    pub flip_v: f64,
    /// Degrees; the angle is uniform in `±max_rotate`.
    pub max_rotate: f64,
    /// Zoom factor is uniform in `[1, max_zoom]`.
    pub max_zoom: f64,
    /// Brightness and contrast deltas are each uniform in `±max_lighting`.
    pub max_lighting: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy::identity()
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy { flip_h: 0.0, flip_v: 0.0, max_rotate: 0.0, max_zoom: 1.0, max_lighting: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("flip_h", self.flip_h), ("flip_v", self.flip_v)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        if !(self.max_zoom >= 1.0 && self.max_zoom.is_finite()) {
            return Err(Error::Config(format!("max_zoom {} must be ≥ 1", self.max_zoom)));
        }
        if !(self.max_rotate >= 0.0 && self.max_lighting >= 0.0) {
            return Err(Error::Config("rotation and lighting limits must be non-negative".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        *self == AugmentPolicy::identity()
    }
}

pub fn augment_image(img: &Tensor, policy: &AugmentPolicy, rng: &mut Rng) -> Tensor {
    let mut out = img.clone();
    if policy.flip_h > 0.0 && rng.gen_bool(policy.flip_h) {
        out = image::flip_horizontal(&out);
    }
    if policy.flip_v > 0.0 && rng.gen_bool(policy.flip_v) {
        out = image::flip_vertical(&out);
    }
    if policy.max_rotate > 0.0 {
        let deg = rng.gen_range(-policy.max_rotate..=policy.max_rotate);
        out = image::rotate(&out, deg);
    }
    if policy.max_zoom > 1.0 {
        let z = rng.gen_range(1.0..=policy.max_zoom);
        out = image::zoom(&out, z);
    }
    if policy.max_lighting > 0.0 {
        let b = rng.gen_range(-policy.max_lighting..=policy.max_lighting);
        let c = rng.gen_range(-policy.max_lighting..=policy.max_lighting);
        out = image::adjust_lighting(&out, b, c);
    }
    out
}

pub fn augment(sample: &LabeledSample, policy: &AugmentPolicy, rng: &mut Rng) -> LabeledSample {
    LabeledSample { image: augment_image(&sample.image, policy, rng), label: sample.label, id: sample.id.clone() }
}

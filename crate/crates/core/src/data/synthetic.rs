//! Procedural greyscale shape corpus standing in for a large source domain and
//! a small target domain.
//!
//! Classes are drawn from one enumeration of shape families × rendering
//! variants. The source task takes the first `source_classes` entries and the
//! target task the next `target_classes`, so target families are never seen
//! during pretraining while sharing the renderer's low-level statistics
//! (edges, intensities, noise).

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::data::dataset::{LabeledDataset, LabeledSample, TransferSetting};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::Tensor;

type Predicate = fn(f64, f64) -> bool;

fn stripes(t: f64) -> bool {
    ((t + 1.0) * 2.5).floor() as i64 % 2 == 0
}

const FAMILIES: &[(&str, Predicate)] = &[
    ("disk", |u, v| u * u + v * v <= 1.0),
    ("square", |u, v| u.abs() <= 0.8 && v.abs() <= 0.8),
    ("ring", |u, v| (0.3025..=1.0).contains(&(u * u + v * v))),
    ("plus", |u, v| (u.abs() <= 0.25 && v.abs() <= 1.0) || (v.abs() <= 0.25 && u.abs() <= 1.0)),
    ("triangle", |u, v| (-1.0..=0.8).contains(&v) && u.abs() <= (v + 1.0) / 1.8 * 0.95),
    ("hstripes", |u, v| u.abs() <= 1.0 && v.abs() <= 1.0 && stripes(v)),
    ("xcross", |u, v| ((u - v).abs() <= 0.35 || (u + v).abs() <= 0.35) && u.abs() <= 0.9 && v.abs() <= 0.9),
    ("frame", |u, v| (0.6..=0.9).contains(&u.abs().max(v.abs()))),
    ("dots2", |u, v| (u - 0.55).powi(2) + v * v <= 0.16 || (u + 0.55).powi(2) + v * v <= 0.16),
    ("vstripes", |u, v| u.abs() <= 1.0 && v.abs() <= 1.0 && stripes(u)),
    ("diamond", |u, v| u.abs() + v.abs() <= 1.0),
    ("ell", |u, v| ((-0.8..=-0.3).contains(&u) && v.abs() <= 0.8) || ((0.3..=0.8).contains(&v) && u.abs() <= 0.8)),
    ("tee", |u, v| ((-0.8..=-0.35).contains(&v) && u.abs() <= 0.8) || (u.abs() <= 0.25 && v.abs() <= 0.8)),
    ("checker", |u, v| u.abs() <= 0.9 && v.abs() <= 0.9 && ((u >= 0.0) == (v >= 0.0))),
    ("halfdisk", |u, v| u * u + v * v <= 1.0 && v >= 0.0),
    ("dots3", |u, v| {
        [(0.0, -0.6), (-0.52, 0.3), (0.52, 0.3)].iter().any(|(cu, cv)| (u - cu).powi(2) + (v - cv).powi(2) <= 0.09)
    }),
    ("rhombus", |u, v| (0.55..=1.0).contains(&(u.abs() + v.abs()))),
    ("crescent", |u, v| u * u + v * v <= 1.0 && (u - 0.45).powi(2) + v * v >= 0.6),
];

const VARIANTS: &[&str] = &["", "_inv", "_pair"];

/// Number of distinct classes the renderer can produce.
pub const MAX_CLASSES: usize = 18 * 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub source_classes: usize,
    pub target_classes: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    pub image_size: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.source_classes < 2 || self.target_classes < 2 {
            return Err(Error::Config("source and target need at least 2 classes each".into()));
        }
        if self.source_per_class < 2 || self.target_per_class < 2 {
            return Err(Error::Config("need at least 2 samples per class".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("image size {} is below 16", self.image_size)));
        }
        if self.source_classes + self.target_classes > MAX_CLASSES {
            return Err(Error::Config(format!(
                "{} classes requested; the renderer provides {MAX_CLASSES}",
                self.source_classes + self.target_classes
            )));
        }
        Ok(())
    }
}

pub fn class_name(global: usize) -> String {
    let (family, _) = FAMILIES[global % FAMILIES.len()];
    format!("c{global:02}_{family}{}", VARIANTS[global / FAMILIES.len()])
}

/// Renders one `1×S×S` image of class `global` from its own RNG stream.
pub fn render(global: usize, size: usize, rng: &mut rng::Rng) -> Tensor {
    let (_, inside) = FAMILIES[global % FAMILIES.len()];
    let variant = global / FAMILIES.len();
    let s = size as f64;
    let pair = variant == 2;
    let radius = s * rng.gen_range(0.24..0.40) * if pair { 0.55 } else { 1.0 };
    let jitter = s * if pair { 0.06 } else { 0.15 };
    let cy = (s - 1.0) / 2.0 + rng.gen_range(-jitter..=jitter);
    let cx = (s - 1.0) / 2.0 + rng.gen_range(-jitter..=jitter);
    let (sin, cos) = rng.gen_range(-25f64..=25.0).to_radians().sin_cos();
    let fg = rng.gen_range(0.5..1.0);
    let bg = rng.gen_range(0.0..0.3);
    let (fg, bg) = if variant == 1 { (bg, fg) } else { (fg, bg) };
    let centres: Vec<(f64, f64)> =
        if pair { vec![(cy, cx - s * 0.22), (cy, cx + s * 0.22)] } else { vec![(cy, cx)] };
    let noise = Normal::new(0.0, 0.10).expect("positive std");
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            // 2×2 supersampling for soft edges
            let mut cover = 0.0f64;
            for (oy, ox) in [(-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25)] {
                let hit = centres.iter().any(|&(ccy, ccx)| {
                    let (dy, dx) = ((y as f64 + oy - ccy) / radius, (x as f64 + ox - ccx) / radius);
                    inside(cos * dx + sin * dy, -sin * dx + cos * dy)
                });
                if hit {
                    cover += 0.25;
                }
            }
            let v = bg + cover * (fg - bg) + noise.sample(rng);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Tensor::new(&[1, size, size], data).expect("square image")
}

fn render_dataset(seed: u64, first: usize, classes: usize, per_class: usize, size: usize) -> Result<LabeledDataset> {
    let names: Vec<String> = (first..first + classes).map(class_name).collect();
    let mut samples = Vec::with_capacity(classes * per_class);
    for (label, name) in names.iter().enumerate() {
        let global = first + label;
        for i in 0..per_class {
            let mut r = rng::stream(seed, &[tag::SYNTH, global as u64, i as u64]);
            samples.push(LabeledSample { image: render(global, size, &mut r), label, id: format!("{name}/{i:04}") });
        }
    }
    LabeledDataset::new(samples, names)
}

/// Source and target corpora; a pure function of `spec`.
pub fn make_synthetic_transfer_task(spec: &SyntheticSpec) -> Result<TransferSetting> {
    spec.validate()?;
    let source = render_dataset(spec.seed, 0, spec.source_classes, spec.source_per_class, spec.image_size)?;
    let target = render_dataset(
        spec.seed,
        spec.source_classes,
        spec.target_classes,
        spec.target_per_class,
        spec.image_size,
    )?;
    TransferSetting::new(source, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            seed: 3,
            source_classes: 6,
            target_classes: 4,
            source_per_class: 5,
            target_per_class: 3,
            image_size: 16,
        }
    }

    #[test]
    fn counts_and_names() {
        let t = make_synthetic_transfer_task(&spec()).unwrap();
        assert_eq!(t.source.len(), 30);
        assert_eq!(t.target.len(), 12);
        assert_eq!(t.target.class_names()[0], "c06_xcross");
        let mut sorted = t.target.class_names().to_vec();
        sorted.sort();
        assert_eq!(sorted, t.target.class_names());
        assert!(t.source.samples().iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn seed_determinism() {
        let a = make_synthetic_transfer_task(&spec()).unwrap();
        let b = make_synthetic_transfer_task(&spec()).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.target, b.target);
        let c = make_synthetic_transfer_task(&SyntheticSpec { seed: 4, ..spec() }).unwrap();
        assert_ne!(a.target, c.target);
    }

    #[test]
    fn class_budget_and_minimums() {
        assert!(make_synthetic_transfer_task(&SyntheticSpec { target_classes: 49, ..spec() }).is_err());
        assert!(make_synthetic_transfer_task(&SyntheticSpec { image_size: 15, ..spec() }).is_err());
        let names: std::collections::HashSet<String> = (0..MAX_CLASSES).map(class_name).collect();
        assert_eq!(names.len(), MAX_CLASSES);
    }
}

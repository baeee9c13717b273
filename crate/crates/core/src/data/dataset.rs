use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::image::resize;
use crate::data::pgm;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    /// `C×H×W`; raw samples hold values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub id: String,
}

/// Per-channel mean and (population) standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn compute<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        let images: Vec<&Tensor> = images.into_iter().collect();
        let first = images.first().ok_or_else(|| Error::Data("channel statistics of an empty set".into()))?;
        let channels = first.shape()[0];
        let plane = first.numel() / channels;
        sum.resize(channels, 0.0);
        for img in &images {
            for (c, s) in sum.iter_mut().enumerate() {
                *s += img.data()[c * plane..(c + 1) * plane].iter().sum::<f64>();
            }
            count += plane;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        sq.resize(channels, 0.0);
        for img in &images {
            for (c, q) in sq.iter_mut().enumerate() {
                *q += img.data()[c * plane..(c + 1) * plane].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        let std = sq.iter().map(|q| (q / count as f64).sqrt()).collect();
        Ok(ChannelStats { mean, std })
    }

    /// Divisors actually used: zero or non-finite deviations fall back to 1.
    pub fn effective_std(&self) -> Vec<f64> {
        self.std
            .iter()
            .enumerate()
            .map(|(c, &s)| {
                if s > 0.0 && s.is_finite() {
                    s
                } else {
                    log::warn!("channel {c} has zero variance; standardising with std = 1");
                    1.0
                }
            })
            .collect()
    }

    pub fn apply(&self, img: &Tensor) -> Tensor {
        self.apply_with(img, &self.effective_std())
    }

    pub(crate) fn apply_with(&self, img: &Tensor, std: &[f64]) -> Tensor {
        let channels = img.shape()[0];
        let plane = img.numel() / channels;
        Tensor::from_fn(img.shape(), |i| {
            let c = i / plane;
            (img.data()[i] - self.mean[c]) / std[c]
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    samples: Vec<LabeledSample>,
    class_names: Vec<String>,
    /// Statistics this dataset was standardised with, if any.
    pub channel_stats: Option<ChannelStats>,
}

impl LabeledDataset {
    pub fn new(samples: Vec<LabeledSample>, class_names: Vec<String>) -> Result<Self> {
        let k = class_names.len();
        let mut seen = HashSet::with_capacity(samples.len());
        let mut per_class = vec![0usize; k];
        let shape = samples.first().map(|s| s.image.shape().to_vec());
        for s in &samples {
            if s.label >= k {
                return Err(Error::Data(format!("sample `{}` has label {} but only {k} classes", s.id, s.label)));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id `{}`", s.id)));
            }
            if s.image.shape().len() != 3 || Some(s.image.shape()) != shape.as_deref() {
                return Err(Error::Data(format!("sample `{}` has shape {:?}, expected {shape:?}", s.id, s.image.shape())));
            }
            per_class[s.label] += 1;
        }
        if let Some(c) = per_class.iter().position(|&n| n == 0) {
            return Err(Error::Data(format!("class `{}` has no samples", class_names[c])));
        }
        Ok(LabeledDataset { samples, class_names, channel_stats: None })
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `C×H×W` shared by every sample.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.samples[0].image.shape();
        [s[0], s[1], s[2]]
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        self.samples.iter().for_each(|s| counts[s.label] += 1);
        counts
    }

    pub fn stats_of(&self, indices: &[usize]) -> Result<ChannelStats> {
        ChannelStats::compute(indices.iter().map(|&i| &self.samples[i].image))
    }
}

/// Per-channel `(x − mean)/std` with the given statistics.
pub fn standardize(dataset: &LabeledDataset, stats: &ChannelStats) -> Result<LabeledDataset> {
    let channels = dataset.image_shape()[0];
    if stats.mean.len() != channels || stats.std.len() != channels {
        return Err(Error::Dimension(format!("{}-channel stats for {channels}-channel images", stats.mean.len())));
    }
    if stats.mean.iter().any(|m| !m.is_finite()) {
        return Err(Error::Data("non-finite channel mean".into()));
    }
    let std = stats.effective_std();
    let samples = dataset
        .samples
        .iter()
        .map(|s| LabeledSample { image: stats.apply_with(&s.image, &std), label: s.label, id: s.id.clone() })
        .collect();
    Ok(LabeledDataset { samples, class_names: dataset.class_names.clone(), channel_stats: Some(stats.clone()) })
}

/// Loads `root/<class>/<name>.pgm`, resizing to `height×width`.
///
/// Classes are the sorted subdirectory names; samples are ordered by
/// (class, file name) and identified as `<class>/<file stem>`.
pub fn load_directory(root: &Path, height: usize, width: usize) -> Result<LabeledDataset> {
    let mut classes: Vec<String> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_ok_and(|t| t.is_dir()))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Data(format!("{} contains no class directories", root.display())));
    }
    let mut samples = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        let dir = root.join(class);
        let mut files: Vec<_> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!("class directory {} is empty", dir.display())));
        }
        for path in files {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let img = pgm::decode(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let raw = Tensor::new(&[1, img.height, img.width], img.pixels.iter().map(|&p| f64::from(p) / 255.0).collect())?;
            let stem = path.file_stem().unwrap_or_default().to_string_lossy();
            samples.push(LabeledSample { image: resize(&raw, height, width), label, id: format!("{class}/{stem}") });
        }
    }
    LabeledDataset::new(samples, classes)
}

/// Writes the dataset as 8-bit PGM files in the `root/<class>/<stem>.pgm` layout.
pub fn write_directory(dataset: &LabeledDataset, root: &Path) -> Result<()> {
    for s in dataset.samples() {
        let class = &dataset.class_names()[s.label];
        let stem = s.id.rsplit('/').next().unwrap_or(&s.id);
        let [_, h, w] = dataset.image_shape();
        let pixels = s.image.data()[..h * w].iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let bytes = pgm::encode(&pgm::GrayImage { width: w, height: h, pixels });
        crate::io::write_atomic(&root.join(class).join(format!("{stem}.pgm")), &bytes)?;
    }
    Ok(())
}

/// Source and target problems over one shared input space.
#[derive(Clone, Debug)]
pub struct TransferSetting {
    pub source: LabeledDataset,
    pub target: LabeledDataset,
}

impl TransferSetting {
    pub fn new(source: LabeledDataset, target: LabeledDataset) -> Result<Self> {
        if source.image_shape() != target.image_shape() {
            return Err(Error::Data(format!(
                "source images {:?} and target images {:?} differ in shape",
                source.image_shape(),
                target.image_shape()
            )));
        }
        Ok(TransferSetting { source, target })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.target.image_shape()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, label: usize, v: f64) -> LabeledSample {
        LabeledSample { image: Tensor::filled(&[1, 2, 2], v), label, id: id.into() }
    }

    #[test]
    fn validation_rejects_bad_datasets() {
        let names = vec!["a".to_string(), "b".to_string()];
        assert!(LabeledDataset::new(vec![sample("x", 0, 0.1)], names.clone()).is_err());
        assert!(LabeledDataset::new(vec![sample("x", 0, 0.1), sample("x", 1, 0.1)], names.clone()).is_err());
        assert!(LabeledDataset::new(vec![sample("x", 0, 0.1), sample("y", 2, 0.1)], names.clone()).is_err());
        assert!(LabeledDataset::new(vec![sample("x", 0, 0.1), sample("y", 1, 0.1)], names).is_ok());
    }

    #[test]
    fn self_standardisation_is_zero_mean_unit_std() {
        let names = vec!["a".to_string(), "b".to_string()];
        let samples = (0..6)
            .map(|i| LabeledSample {
                image: Tensor::from_fn(&[2, 3, 3], |j| ((i * 17 + j * 5) % 11) as f64 / 11.0),
                label: i % 2,
                id: format!("s{i}"),
            })
            .collect();
        let ds = LabeledDataset::new(samples, names).unwrap();
        let stats = ds.stats_of(&(0..6).collect::<Vec<_>>()).unwrap();
        let z = standardize(&ds, &stats).unwrap();
        let again = z.stats_of(&(0..6).collect::<Vec<_>>()).unwrap();
        for c in 0..2 {
            assert!(again.mean[c].abs() < 1e-9);
            assert!((again.std[c] - 1.0).abs() < 1e-9);
        }
        assert_eq!(z.channel_stats.as_ref(), Some(&stats));
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let names = vec!["a".to_string()];
        let ds = LabeledDataset::new(vec![sample("p", 0, 0.4), sample("q", 0, 0.4)], names).unwrap();
        let stats = ds.stats_of(&[0, 1]).unwrap();
        assert_eq!(stats.std, vec![0.0]);
        let z = standardize(&ds, &stats).unwrap();
        assert!(z.samples().iter().all(|s| s.image.data().iter().all(|&v| v == 0.0)));
    }
}

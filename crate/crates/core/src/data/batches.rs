use rand::seq::SliceRandom;

use crate::data::augment::{augment_image, AugmentPolicy};
use crate::data::dataset::{ChannelStats, LabeledDataset};
use crate::data::folds::FoldPlan;
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
}

/// A stacked minibatch, `N×C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Dataset indices of the rows.
    pub indices: Vec<usize>,
}

/// Minibatches over a subset of a raw (`[0, 1]`-valued) dataset.
///
/// Training streams reshuffle every epoch and augment each sample from a
/// stream keyed by `(seed, epoch, sample index)`, so results never depend on
/// evaluation order. Standardisation, when set, runs after augmentation.
#[derive(Clone, Debug)]
pub struct BatchStream<'a> {
    dataset: &'a LabeledDataset,
    indices: Vec<usize>,
    split: Split,
    batch_size: usize,
    policy: Option<AugmentPolicy>,
    seed: u64,
    stats: Option<(ChannelStats, Vec<f64>)>,
}

/// Stream over the training (all folds but `fold`) or validation portion.
pub fn batches<'a>(
    dataset: &'a LabeledDataset,
    plan: &FoldPlan,
    fold: usize,
    split: Split,
    batch_size: usize,
    policy: Option<AugmentPolicy>,
    seed: u64,
) -> Result<BatchStream<'a>> {
    if fold >= plan.k {
        return Err(Error::Config(format!("fold {fold} out of range for k = {}", plan.k)));
    }
    if plan.len() != dataset.len() {
        return Err(Error::Data(format!("fold plan covers {} samples, dataset has {}", plan.len(), dataset.len())));
    }
    let indices = match split {
        Split::Train => plan.train_indices(fold),
        Split::Valid => plan.valid_indices(fold),
    };
    BatchStream::over(dataset, indices, split, batch_size, policy, seed)
}

impl<'a> BatchStream<'a> {
    pub fn over(
        dataset: &'a LabeledDataset,
        indices: Vec<usize>,
        split: Split,
        batch_size: usize,
        policy: Option<AugmentPolicy>,
        seed: u64,
    ) -> Result<Self> {
        if batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let Some(i) = indices.iter().find(|&&i| i >= dataset.len()) {
            return Err(Error::Data(format!("sample index {i} out of range")));
        }
        if let Some(p) = &policy {
            p.validate()?;
        }
        // Validation is never augmented.
        let policy = policy.filter(|p| split == Split::Train && !p.is_identity());
        Ok(BatchStream { dataset, indices, split, batch_size, policy, seed, stats: None })
    }

    pub fn with_stats(mut self, stats: ChannelStats) -> Self {
        let std = stats.effective_std();
        self.stats = Some((stats, std));
        self
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn num_batches(&self) -> usize {
        self.indices.len().div_ceil(self.batch_size)
    }

    /// Visiting order for `epoch`.
    pub fn order(&self, epoch: usize) -> Vec<usize> {
        let mut order = self.indices.clone();
        if self.split == Split::Train {
            order.shuffle(&mut rng::stream(self.seed, &[tag::SHUFFLE, epoch as u64]));
        }
        order
    }

    /// Sample `index` as the network sees it in `epoch`.
    pub fn prepared(&self, index: usize, epoch: usize) -> Tensor {
        let raw = &self.dataset.samples()[index].image;
        let img = match &self.policy {
            Some(p) => augment_image(raw, p, &mut rng::stream(self.seed, &[tag::AUGMENT, epoch as u64, index as u64])),
            None => raw.clone(),
        };
        match &self.stats {
            Some((stats, std)) => stats.apply_with(&img, std),
            None => img,
        }
    }

    pub fn epoch(&self, epoch: usize) -> Vec<Batch> {
        let [c, h, w] = self.dataset.image_shape();
        self.order(epoch)
            .chunks(self.batch_size)
            .map(|chunk| {
                let mut data = Vec::with_capacity(chunk.len() * c * h * w);
                for &i in chunk {
                    data.extend_from_slice(self.prepared(i, epoch).data());
                }
                Batch {
                    images: Tensor::new(&[chunk.len(), c, h, w], data).expect("stacked batch"),
                    labels: chunk.iter().map(|&i| self.dataset.samples()[i].label).collect(),
                    indices: chunk.to_vec(),
                }
            })
            .collect()
    }
}

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::data::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Stratified k-fold assignment of dataset samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// Fold of each sample, indexed like the dataset.
    assignments: Vec<usize>,
    ids: Vec<String>,
}

/// Shuffles each class with a seeded RNG and deals it round-robin across
/// folds. Each class starts where the previous one stopped, so fold totals
/// stay balanced too. Per-class fold counts differ by at most one; a class
/// with fewer than `k` samples appears in only some folds.
pub fn stratified_kfold(dataset: &LabeledDataset, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k ≥ 2, got {k}")));
    }
    if k > dataset.len() {
        return Err(Error::Config(format!("k = {k} exceeds dataset size {}", dataset.len())));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, s) in dataset.samples().iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut assignments = vec![usize::MAX; dataset.len()];
    let mut offset = 0;
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng::stream(seed, &[tag::FOLDS, c as u64]));
        for (j, &i) in members.iter().enumerate() {
            assignments[i] = (offset + j) % k;
        }
        offset = (offset + members.len()) % k;
    }
    let ids = dataset.samples().iter().map(|s| s.id.clone()).collect();
    Ok(FoldPlan { k, seed, assignments, ids })
}

impl FoldPlan {
    pub fn fold_of(&self, index: usize) -> usize {
        self.assignments[index]
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Sample indices validated in `fold`, ascending.
    pub fn valid_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.assignments[i] == fold).collect()
    }

    /// Sample indices trained on when `fold` is held out, ascending.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.assignments[i] != fold).collect()
    }

    /// `counts[class][fold]`.
    pub fn class_fold_counts(&self, dataset: &LabeledDataset) -> Vec<Vec<usize>> {
        let mut counts = vec![vec![0; self.k]; dataset.num_classes()];
        for (s, &f) in dataset.samples().iter().zip(&self.assignments) {
            counts[s.label][f] += 1;
        }
        counts
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,fold\n");
        for (id, f) in self.ids.iter().zip(&self.assignments) {
            let _ = writeln!(s, "{id},{f}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::LabeledSample;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn dataset(counts: &[usize]) -> LabeledDataset {
        let mut samples = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                samples.push(LabeledSample { image: Tensor::zeros(&[1, 1, 1]), label: c, id: format!("{c}-{i}") });
            }
        }
        LabeledDataset::new(samples, (0..counts.len()).map(|c| format!("k{c}")).collect()).unwrap()
    }

    #[test]
    fn balanced_classes_divide_evenly() {
        let ds = dataset(&[25, 25, 25, 25]);
        let plan = stratified_kfold(&ds, 5, 9).unwrap();
        for f in 0..5 {
            assert_eq!(plan.valid_indices(f).len(), 20);
        }
        for row in plan.class_fold_counts(&ds) {
            assert_eq!(row, vec![5; 5]);
        }
    }

    #[test]
    fn small_class_lands_in_exactly_three_folds() {
        let ds = dataset(&[3, 20]);
        let plan = stratified_kfold(&ds, 5, 1).unwrap();
        let row = &plan.class_fold_counts(&ds)[0];
        assert_eq!(row.iter().filter(|&&n| n == 1).count(), 3);
        assert_eq!(row.iter().filter(|&&n| n == 0).count(), 2);
    }

    #[test]
    fn rejects_bad_k() {
        let ds = dataset(&[2, 2]);
        assert!(matches!(stratified_kfold(&ds, 5, 0), Err(Error::Config(_))));
        assert!(matches!(stratified_kfold(&ds, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn csv_lists_every_sample() {
        let ds = dataset(&[3, 4]);
        let plan = stratified_kfold(&ds, 2, 0).unwrap();
        let csv = plan.to_csv();
        assert!(csv.starts_with("sample_id,fold\n"));
        assert_eq!(csv.lines().count(), 8);
    }

    proptest! {
        #[test]
        fn partition_and_stratification(counts in prop::collection::vec(1usize..40, 2..8), k in 2usize..7, seed in 0u64..1000) {
            let ds = dataset(&counts);
            prop_assume!(k <= ds.len());
            let plan = stratified_kfold(&ds, k, seed).unwrap();
            let mut seen = vec![0; ds.len()];
            for f in 0..k {
                for i in plan.valid_indices(f) {
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&n| n == 1));
            for row in plan.class_fold_counts(&ds) {
                let (lo, hi) = (row.iter().min().unwrap(), row.iter().max().unwrap());
                prop_assert!(hi - lo <= 1);
            }
        }
    }
}

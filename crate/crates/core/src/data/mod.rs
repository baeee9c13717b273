//! Dataset ingestion, standardisation, augmentation, synthetic corpora,
//! stratified folds and batch assembly.

pub mod augment;
mod batches;
mod dataset;
mod folds;
pub mod image;
pub mod pgm;
pub mod synthetic;

pub use augment::{augment, AugmentPolicy};
pub use batches::{batches, Batch, BatchStream, Split};
pub use dataset::{
    load_directory, standardize, write_directory, ChannelStats, LabeledDataset, LabeledSample, TransferSetting,
};
pub use folds::{stratified_kfold, FoldPlan};
pub use synthetic::{make_synthetic_transfer_task, SyntheticSpec};

//! Source pretraining followed by the three fine-tuning stages, run per fold
//! of a stratified split, plus a from-scratch control arm.
//!
//! Stage I trains the new head with the base frozen. Stage II keeps the base
//! frozen, turns augmentation on and picks its rate with the range test.
//! Stage III unfreezes everything with geometrically spaced per-group rates.
//!
//! Each stage starts a fresh optimizer and draws its randomness from streams
//! keyed by `(seed, fold, stage)`, so a stage depends only on the model it
//! starts from. That is what lets Stage III resume from a checkpoint file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{batches, stratified_kfold, AugmentPolicy, Batch, BatchStream, ChannelStats, FoldPlan, LabeledDataset, Split, TransferSetting};
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionMatrix, Evaluation, TopLossEntry};
use crate::nn::{checkpoint, Mode, Model, BASE_GROUPS};
use crate::optim::{lr_range_test, model_groups, slice_lrs, Adam, AdamConfig, CosineRestartSchedule, LrFinderConfig, LrFinderTrace, Optimizer, SweepTarget};
use crate::rng::{derive_seed, tag};

/// Number of worst validation samples kept per stage report.
const TOP_LOSSES: usize = 10;
/// Share of the source corpus held out for validation, as `1/SOURCE_FOLDS`.
const SOURCE_FOLDS: usize = 5;
// Sub-tags under `tag::STAGE` for streams that are not one of the three stages.
const SOURCE_STREAM: u64 = 10;
const SCRATCH_STREAM: u64 = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    I,
    II,
    III,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::I, Stage::II, Stage::III];

    pub fn number(self) -> usize {
        match self {
            Stage::I => 1,
            Stage::II => 2,
            Stage::III => 3,
        }
    }

    pub fn next(self) -> Option<Stage> {
        match self {
            Stage::I => Some(Stage::II),
            Stage::II => Some(Stage::III),
            Stage::III => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::I => "I",
            Stage::II => "II",
            Stage::III => "III",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrPolicy {
    Fixed {
        lr: f64,
    },
    /// Range test over `[sweep_lo, sweep_hi]`; the suggestion is clamped to `[min, max]`.
    Olrf {
        #[serde(default = "default_sweep_lo")]
        sweep_lo: f64,
        #[serde(default = "default_sweep_hi")]
        sweep_hi: f64,
        #[serde(default = "default_sweep_iters")]
        iters: usize,
        min: f64,
        max: f64,
    },
    /// Per-group rates from `lo` (stem) to `hi` (head).
    Slice {
        lo: f64,
        hi: f64,
    },
}

fn default_sweep_lo() -> f64 {
    1e-6
}
fn default_sweep_hi() -> f64 {
    1.0
}
fn default_sweep_iters() -> usize {
    60
}

/// Cosine annealing with warm restarts, applied as a multiplier on the
/// stage's base rates: 1 at a cycle start, `min_lr_ratio` at its end.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    pub cycle_epochs: usize,
    pub cycle_mult: usize,
    pub min_lr_ratio: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams { cycle_epochs: 1, cycle_mult: 1, min_lr_ratio: 0.01 }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        if self.cycle_epochs == 0 || self.cycle_mult == 0 {
            return Err(Error::Config("schedule cycle_epochs and cycle_mult must be ≥ 1".into()));
        }
        if !(self.min_lr_ratio > 0.0 && self.min_lr_ratio < 1.0) {
            return Err(Error::Config(format!("min_lr_ratio {} must lie in (0, 1)", self.min_lr_ratio)));
        }
        Ok(())
    }

    fn build(&self, batches_per_epoch: usize) -> Result<CosineRestartSchedule> {
        CosineRestartSchedule::new(1.0, self.min_lr_ratio, self.cycle_epochs * batches_per_epoch.max(1), self.cycle_mult)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub lr_policy: LrPolicy,
    #[serde(default)]
    pub augmentation: Option<AugmentPolicy>,
    #[serde(default)]
    pub schedule: Option<ScheduleParams>,
}

fn check_rate(what: &str, lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} must be positive and finite, got {lr}")))
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.stage;
        if self.epochs == 0 {
            return Err(Error::Config(format!("stage {s}: epochs must be ≥ 1")));
        }
        match (s, self.lr_policy) {
            (Stage::III, LrPolicy::Slice { lo, hi }) => {
                slice_lrs(lo, hi, BASE_GROUPS.len() + 1)?;
            }
            (Stage::III, _) => return Err(Error::Config("stage III needs a slice learning-rate policy".into())),
            (_, LrPolicy::Slice { .. }) => {
                return Err(Error::Config(format!("stage {s} trains only the head; a slice policy needs stage III")))
            }
            (_, LrPolicy::Fixed { lr }) => check_rate(&format!("stage {s} lr"), lr)?,
            (_, LrPolicy::Olrf { sweep_lo, sweep_hi, iters, min, max }) => {
                LrFinderConfig { lr_lo: sweep_lo, lr_hi: sweep_hi, num_iters: iters, ..LrFinderConfig::default() }
                    .validate()?;
                check_rate("olrf min", min)?;
                if !(max >= min && max.is_finite()) {
                    return Err(Error::Config(format!("olrf bounds must satisfy min ≤ max, got {min} and {max}")));
                }
            }
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        if let Some(p) = &self.schedule {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub augmentation: Option<AugmentPolicy>,
    #[serde(default)]
    pub schedule: Option<ScheduleParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub lr: f64,
    #[serde(default)]
    pub augmentation: Option<AugmentPolicy>,
    #[serde(default)]
    pub schedule: Option<ScheduleParams>,
}

/// Settings shared by every training loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub batch_size: usize,
    /// Standardise inputs with training-portion channel statistics.
    #[serde(default = "yes")]
    pub standardize: bool,
    #[serde(skip)]
    pub adam: AdamConfig,
}

fn yes() -> bool {
    true
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { batch_size: 16, standardize: true, adam: AdamConfig::default() }
    }
}

/// Everything that determines a protocol run apart from data and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub width: usize,
    pub k: usize,
    pub train: TrainOptions,
    pub pretrain: PretrainConfig,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub baseline: Option<BaselineConfig>,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("model width must be ≥ 1".into()));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("k-fold needs k ≥ 2, got {}", self.k)));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        check_rate("pretrain lr", self.pretrain.lr)?;
        if let Some(a) = &self.pretrain.augmentation {
            a.validate()?;
        }
        if let Some(s) = &self.pretrain.schedule {
            s.validate()?;
        }
        let order: Vec<Stage> = self.stages.iter().map(|s| s.stage).collect();
        if order != Stage::ALL {
            return Err(Error::Config(format!("stages must be listed as I, II, III; got {order:?}")));
        }
        for s in &self.stages {
            s.validate()?;
        }
        if let Some(b) = &self.baseline {
            check_rate("baseline lr", b.lr)?;
            if let Some(a) = &b.augmentation {
                a.validate()?;
            }
            if let Some(s) = &b.schedule {
                s.validate()?;
            }
        }
        Ok(())
    }

    /// Fine-tuning epochs summed over the three stages.
    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        &self.stages[stage.number() - 1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub error_rate: f64,
    pub accuracy: f64,
}

pub const EPOCH_CSV_HEADER: &str = "stage,epoch,train_loss,valid_loss,error_rate,accuracy";

pub fn epochs_to_csv(records: &[EpochRecord]) -> String {
    let mut s = format!("{EPOCH_CSV_HEADER}\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.stage, r.epoch, r.train_loss, r.valid_loss, r.error_rate, r.accuracy
        ));
    }
    s
}

/// Final metrics of a stage, micro-averaged like the headline table columns,
/// with macro averages alongside.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub train_loss: f64,
    pub valid_loss: f64,
    pub error_rate: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl StageMetrics {
    fn from_eval(train_loss: f64, ev: &Evaluation, confusion: &ConfusionMatrix) -> Result<Self> {
        let m = metrics::metrics(confusion)?;
        Ok(StageMetrics {
            train_loss,
            valid_loss: ev.mean_loss(),
            error_rate: m.error_rate,
            accuracy: m.accuracy,
            precision: m.micro.precision,
            recall: m.micro.recall,
            f1: m.micro.f1,
            macro_precision: m.macro_avg.precision,
            macro_recall: m.macro_avg.recall,
            macro_f1: m.macro_avg.f1,
        })
    }

    pub fn fields(&self) -> [(&'static str, f64); 10] {
        [
            ("train_loss", self.train_loss),
            ("valid_loss", self.valid_loss),
            ("error_rate", self.error_rate),
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("macro_precision", self.macro_precision),
            ("macro_recall", self.macro_recall),
            ("macro_f1", self.macro_f1),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (`n − 1`); zero for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

pub fn aggregate(metrics: &[StageMetrics]) -> BTreeMap<String, MeanStd> {
    let mut out = BTreeMap::new();
    if metrics.is_empty() {
        return out;
    }
    for (i, (name, _)) in metrics[0].fields().iter().enumerate() {
        let values: Vec<f64> = metrics.iter().map(|m| m.fields()[i].1).collect();
        out.insert(name.to_string(), MeanStd::of(&values));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OlrfChoice {
    pub suggested: f64,
    pub chosen: f64,
    pub sweep_points: usize,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub epochs: Vec<EpochRecord>,
    pub metrics: StageMetrics,
    /// Base rate per group (stem first), before any schedule multiplier.
    pub group_lrs: Vec<f64>,
    pub olrf: Option<OlrfChoice>,
    pub base_checksum_before: String,
    pub base_checksum_after: String,
    pub confusion: ConfusionMatrix,
    pub top_losses: Vec<TopLossEntry>,
}

fn hex(v: u64) -> String {
    format!("{v:016x}")
}

// ---------------------------------------------------------------------------
// Training loop

fn train_step(model: &mut Model, opt: &mut Adam, batch: Batch, iteration: usize) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(batch.images);
    let fwd = model.forward(&mut g, x, Mode::Train)?;
    let loss = g.softmax_cross_entropy(fwd.logits, &batch.labels)?;
    let value = g.value(loss)[0];
    if !value.is_finite() {
        return Err(Error::Divergence { iteration, detail: format!("training loss is {value}") });
    }
    g.backward(loss)?;
    model.zero_grad();
    model.accumulate_grads(&g, &fwd)?;
    opt.step(&mut model_groups(model)).map_err(|e| match e {
        Error::Divergence { detail, .. } => Error::Divergence { iteration, detail },
        other => other,
    })?;
    model.commit_stats(&fwd);
    Ok(value)
}

/// One pass over `stream` in `epoch`; returns the sample-weighted mean loss.
fn train_epoch(
    model: &mut Model,
    opt: &mut Adam,
    stream: &BatchStream<'_>,
    epoch: usize,
    base_lrs: &[f64],
    schedule: &mut Option<CosineRestartSchedule>,
    iteration: &mut usize,
) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for batch in stream.epoch(epoch) {
        let mult = schedule.as_mut().and_then(Iterator::next).unwrap_or(1.0);
        let lrs: Vec<f64> = base_lrs.iter().map(|lr| lr * mult).collect();
        model.set_learning_rates(&lrs)?;
        let n = batch.labels.len();
        total += train_step(model, opt, batch, *iteration)? * n as f64;
        count += n;
        *iteration += 1;
    }
    Ok(total / count.max(1) as f64)
}

struct FitOutcome {
    records: Vec<EpochRecord>,
    metrics: StageMetrics,
    confusion: ConfusionMatrix,
    evaluation: Evaluation,
}

/// Trains for `epochs`, evaluating after each. On failure the model is rolled
/// back to the end of the last completed epoch before the error is returned.
#[allow(clippy::too_many_arguments)]
fn fit(
    model: &mut Model,
    adam: AdamConfig,
    label: &str,
    train: &BatchStream<'_>,
    valid: &BatchStream<'_>,
    train_eval: &BatchStream<'_>,
    ids: &[String],
    class_names: &[String],
    epochs: usize,
    base_lrs: &[f64],
    schedule: Option<ScheduleParams>,
) -> Result<FitOutcome> {
    let mut opt = Adam::new(adam);
    let mut sched = schedule.map(|p| p.build(train.num_batches())).transpose()?;
    let mut iteration = 0;
    let mut records = Vec::with_capacity(epochs);
    let mut last_train = None;
    for epoch in 0..epochs {
        let good = model.clone();
        let train_loss = match train_epoch(model, &mut opt, train, epoch, base_lrs, &mut sched, &mut iteration) {
            Ok(l) => l,
            Err(e) => {
                *model = good;
                return Err(e);
            }
        };
        let ev = metrics::evaluate(model, valid, ids)?;
        let m = metrics::metrics(&ev.confusion()?)?;
        records.push(EpochRecord {
            stage: label.to_string(),
            epoch,
            train_loss,
            valid_loss: ev.mean_loss(),
            error_rate: m.error_rate,
            accuracy: m.accuracy,
        });
        last_train = Some(train_loss);
    }
    let evaluation = metrics::evaluate(model, valid, ids)?;
    let train_loss = match last_train {
        Some(l) => l,
        None => metrics::evaluate(model, train_eval, ids)?.mean_loss(),
    };
    let confusion = evaluation.confusion()?.with_class_names(class_names)?;
    let metrics = StageMetrics::from_eval(train_loss, &evaluation, &confusion)?;
    Ok(FitOutcome { records, metrics, confusion, evaluation })
}

/// Streams for one fold: augmented training, plain training, validation.
struct Streams<'d> {
    train: BatchStream<'d>,
    train_eval: BatchStream<'d>,
    valid: BatchStream<'d>,
}

fn make_streams<'d>(
    data: &'d LabeledDataset,
    plan: &FoldPlan,
    fold: usize,
    opts: &TrainOptions,
    policy: Option<AugmentPolicy>,
    stream_seed: u64,
    stats: Option<&ChannelStats>,
) -> Result<Streams<'d>> {
    let bs = opts.batch_size;
    let mut train = batches(data, plan, fold, Split::Train, bs, policy, stream_seed)?;
    let mut train_eval = BatchStream::over(data, plan.train_indices(fold), Split::Valid, bs, None, stream_seed)?;
    let mut valid = batches(data, plan, fold, Split::Valid, bs, None, stream_seed)?;
    if valid.is_empty() || train.is_empty() {
        return Err(Error::Data(format!("fold {fold} has an empty training or validation portion")));
    }
    if let Some(s) = stats {
        train = train.with_stats(s.clone());
        train_eval = train_eval.with_stats(s.clone());
        valid = valid.with_stats(s.clone());
    }
    Ok(Streams { train, train_eval, valid })
}

fn sample_ids(data: &LabeledDataset) -> Vec<String> {
    data.samples().iter().map(|s| s.id.clone()).collect()
}

// ---------------------------------------------------------------------------
// Learning-rate range test on a model

struct ModelSweep<'m, 's, 'd> {
    model: &'m mut Model,
    optimizer: Adam,
    stream: &'s BatchStream<'d>,
    cache: Vec<Batch>,
    cache_epoch: Option<usize>,
}

impl SweepTarget for ModelSweep<'_, '_, '_> {
    type Snapshot = (Model, Adam);

    fn snapshot(&self) -> Self::Snapshot {
        (self.model.clone(), self.optimizer.clone())
    }

    fn restore(&mut self, (model, optimizer): Self::Snapshot) {
        *self.model = model;
        self.optimizer = optimizer;
    }

    fn step(&mut self, lr: f64, iteration: usize) -> Result<f64> {
        let per_epoch = self.stream.num_batches();
        let epoch = iteration / per_epoch;
        if self.cache_epoch != Some(epoch) {
            self.cache = self.stream.epoch(epoch);
            self.cache_epoch = Some(epoch);
        }
        let lrs: Vec<f64> = self.model.groups().iter().map(|g| if g.trainable { lr } else { 0.0 }).collect();
        self.model.set_learning_rates(&lrs)?;
        let batch = self.cache[iteration % per_epoch].clone();
        train_step(self.model, &mut self.optimizer, batch, iteration)
    }
}

/// Range test on the model's currently trainable groups, one minibatch of
/// `stream` per rate. The model is left exactly as it was.
pub fn lr_find(model: &mut Model, stream: &BatchStream<'_>, cfg: &LrFinderConfig, adam: AdamConfig) -> Result<LrFinderTrace> {
    if stream.is_empty() {
        return Err(Error::Data("range test needs a non-empty training stream".into()));
    }
    let mut target = ModelSweep { model, optimizer: Adam::new(adam), stream, cache: Vec::new(), cache_epoch: None };
    lr_range_test(&mut target, cfg)
}

// ---------------------------------------------------------------------------
// Source pretraining

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: Vec<EpochRecord>,
    pub source_classes: usize,
    pub source_train_samples: usize,
    pub source_valid_samples: usize,
    pub metrics: StageMetrics,
    pub checksum: String,
    pub wall_clock_secs: f64,
}

/// Trains every group of `model` on the source task, validating on a
/// stratified 20% hold-out.
pub fn pretrain_source(
    mut model: Model,
    source: &LabeledDataset,
    cfg: &PretrainConfig,
    opts: &TrainOptions,
    seed: u64,
) -> Result<(Model, PretrainReport)> {
    let started = Instant::now();
    if model.num_classes() != source.num_classes() {
        return Err(Error::Config(format!(
            "model head has {} outputs but the source task has {} classes",
            model.num_classes(),
            source.num_classes()
        )));
    }
    let plan = stratified_kfold(source, SOURCE_FOLDS, derive_seed(seed, &[tag::SOURCE_SPLIT]))?;
    let stats = if opts.standardize { Some(source.stats_of(&plan.train_indices(0))?) } else { None };
    let stream_seed = derive_seed(seed, &[tag::STAGE, SOURCE_STREAM]);
    let streams = make_streams(source, &plan, 0, opts, cfg.augmentation, stream_seed, stats.as_ref())?;
    model.set_all_trainable(true);
    let lrs = vec![cfg.lr; model.groups().len()];
    let ids = sample_ids(source);
    let out = fit(
        &mut model,
        opts.adam,
        "source",
        &streams.train,
        &streams.valid,
        &streams.train_eval,
        &ids,
        source.class_names(),
        cfg.epochs,
        &lrs,
        cfg.schedule,
    )?;
    let report = PretrainReport {
        epochs: out.records,
        source_classes: source.num_classes(),
        source_train_samples: streams.train.len(),
        source_valid_samples: streams.valid.len(),
        metrics: out.metrics,
        checksum: hex(model.checksum()),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

// ---------------------------------------------------------------------------
// Per-fold stage state machine

/// One fold's fine-tuning run. Stages must be run in order I → II → III.
pub struct FoldSession<'a> {
    fold: usize,
    model: Model,
    data: &'a LabeledDataset,
    plan: &'a FoldPlan,
    opts: &'a TrainOptions,
    seed: u64,
    stats: Option<ChannelStats>,
    ids: Vec<String>,
    completed: Option<Stage>,
}

impl<'a> FoldSession<'a> {
    /// Copies `pretrained` and gives it a fresh head sized for `data`.
    pub fn start(
        pretrained: &Model,
        data: &'a LabeledDataset,
        plan: &'a FoldPlan,
        fold: usize,
        opts: &'a TrainOptions,
        seed: u64,
    ) -> Result<Self> {
        let mut model = pretrained.clone();
        model.replace_head(data.num_classes(), derive_seed(seed, &[tag::HEAD, fold as u64]))?;
        Self::with_model(model, None, data, plan, fold, opts, seed)
    }

    /// Continues from a model that has already completed `completed`.
    pub fn resume(
        model: Model,
        completed: Stage,
        data: &'a LabeledDataset,
        plan: &'a FoldPlan,
        fold: usize,
        opts: &'a TrainOptions,
        seed: u64,
    ) -> Result<Self> {
        if model.num_classes() != data.num_classes() {
            return Err(Error::Checkpoint(format!(
                "checkpoint head has {} outputs but the target task has {} classes",
                model.num_classes(),
                data.num_classes()
            )));
        }
        Self::with_model(model, Some(completed), data, plan, fold, opts, seed)
    }

    fn with_model(
        model: Model,
        completed: Option<Stage>,
        data: &'a LabeledDataset,
        plan: &'a FoldPlan,
        fold: usize,
        opts: &'a TrainOptions,
        seed: u64,
    ) -> Result<Self> {
        if fold >= plan.k {
            return Err(Error::Config(format!("fold {fold} out of range for k = {}", plan.k)));
        }
        let stats = if opts.standardize { Some(data.stats_of(&plan.train_indices(fold))?) } else { None };
        Ok(FoldSession { fold, model, data, plan, opts, seed, stats, ids: sample_ids(data), completed })
    }

    pub fn fold(&self) -> usize {
        self.fold
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn completed(&self) -> Option<Stage> {
        self.completed
    }

    pub fn channel_stats(&self) -> Option<&ChannelStats> {
        self.stats.as_ref()
    }

    pub fn run_stage(&mut self, cfg: &StageConfig) -> Result<StageReport> {
        let expected = self.completed.map_or(Some(Stage::I), Stage::next);
        if expected != Some(cfg.stage) {
            return Err(Error::ProtocolOrder(match (self.completed, expected) {
                (_, None) => format!("all stages already completed; cannot run stage {}", cfg.stage),
                (None, Some(e)) => format!("stage {} requested before stage {e}", cfg.stage),
                (Some(done), Some(e)) => format!("stage {} requested after stage {done}; stage {e} must run next", cfg.stage),
            }));
        }
        cfg.validate()?;
        let stage = cfg.stage;
        let stream_seed = derive_seed(self.seed, &[tag::STAGE, self.fold as u64, stage.number() as u64]);
        let streams =
            make_streams(self.data, self.plan, self.fold, self.opts, cfg.augmentation, stream_seed, self.stats.as_ref())?;
        let groups = self.model.groups().len();
        if stage == Stage::III {
            self.model.set_all_trainable(true);
        } else {
            self.model.set_all_trainable(true);
            self.model.set_trainable(&BASE_GROUPS, false)?;
        }
        let before = self.model.base_checksum();
        let mut olrf = None;
        let lrs = match cfg.lr_policy {
            LrPolicy::Fixed { lr } => vec![lr; groups],
            LrPolicy::Slice { lo, hi } => slice_lrs(lo, hi, groups)?,
            LrPolicy::Olrf { sweep_lo, sweep_hi, iters, min, max } => {
                let sweep_cfg = LrFinderConfig { lr_lo: sweep_lo, lr_hi: sweep_hi, num_iters: iters, ..LrFinderConfig::default() };
                let sweep_stream = BatchStream::over(
                    self.data,
                    self.plan.train_indices(self.fold),
                    Split::Train,
                    self.opts.batch_size,
                    cfg.augmentation,
                    derive_seed(self.seed, &[tag::SWEEP, self.fold as u64]),
                )?;
                let sweep_stream = match &self.stats {
                    Some(s) => sweep_stream.with_stats(s.clone()),
                    None => sweep_stream,
                };
                let trace = lr_find(&mut self.model, &sweep_stream, &sweep_cfg, self.opts.adam)?;
                let chosen = trace.suggested_lr.clamp(min, max);
                log::info!(
                    "fold {} stage {stage}: range test suggested {:.3e}, using {chosen:.3e}",
                    self.fold,
                    trace.suggested_lr
                );
                olrf = Some(OlrfChoice {
                    suggested: trace.suggested_lr,
                    chosen,
                    sweep_points: trace.points.len(),
                    diverged: trace.divergence_index.is_some(),
                });
                vec![chosen; groups]
            }
        };
        let out = fit(
            &mut self.model,
            self.opts.adam,
            &stage.to_string(),
            &streams.train,
            &streams.valid,
            &streams.train_eval,
            &self.ids,
            self.data.class_names(),
            cfg.epochs,
            &lrs,
            cfg.schedule,
        )?;
        self.model.set_learning_rates(&lrs)?;
        let after = self.model.base_checksum();
        if stage != Stage::III && before != after {
            return Err(Error::Config(format!("stage {stage} modified frozen base groups")));
        }
        self.completed = Some(stage);
        Ok(StageReport {
            stage,
            epochs: out.records,
            metrics: out.metrics,
            group_lrs: lrs,
            olrf,
            base_checksum_before: hex(before),
            base_checksum_after: hex(after),
            confusion: out.confusion,
            top_losses: out.evaluation.top_losses(TOP_LOSSES),
        })
    }
}

// ---------------------------------------------------------------------------
// Cross-validated runs

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub valid_samples: usize,
    pub stages: Vec<StageReport>,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageAggregate {
    pub stage: Stage,
    pub metrics: BTreeMap<String, MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub pretrain: PretrainReport,
    pub folds: Vec<FoldResult>,
    pub aggregate: Vec<StageAggregate>,
    pub wall_clock_secs: f64,
}

impl ProtocolResult {
    /// Mean final-stage validation accuracy across folds.
    pub fn mean_accuracy(&self) -> f64 {
        let last: Vec<f64> = self.folds.iter().filter_map(|f| f.stages.last()).map(|s| s.metrics.accuracy).collect();
        last.iter().sum::<f64>() / last.len().max(1) as f64
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker threads for fold-level parallelism; 0 uses the global pool.
    pub jobs: usize,
    /// Where per-stage checkpoints go, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
}

fn in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    Ok(pool.install(f))
}

/// Folds run independently; the first failing fold (by index) is reported.
fn per_fold<T: Send>(k: usize, jobs: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    let results: Vec<Result<T>> = in_pool(jobs, || (0..k).into_par_iter().map(&f).collect())?;
    results
        .into_iter()
        .enumerate()
        .map(|(fold, r)| r.map_err(|e| Error::Fold { fold, source: Box::new(e) }))
        .collect()
}

pub fn checkpoint_name(fold: usize, stage: Stage) -> String {
    format!("fold_{fold}_stage_{}.ckpt", stage.number())
}

fn run_fold(
    pretrained: &Model,
    target: &LabeledDataset,
    plan: &FoldPlan,
    fold: usize,
    cfg: &ProtocolConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<FoldResult> {
    let started = Instant::now();
    let mut session = FoldSession::start(pretrained, target, plan, fold, &cfg.train, seed)?;
    let mut stages = Vec::with_capacity(3);
    for stage_cfg in &cfg.stages {
        match session.run_stage(stage_cfg) {
            Ok(report) => stages.push(report),
            Err(e) => {
                if let (Some(dir), true) = (checkpoint_dir, e.is_divergence()) {
                    let name = format!("fold_{fold}_stage_{}_last_good.ckpt", stage_cfg.stage.number());
                    checkpoint::save(session.model(), &dir.join(name))?;
                }
                return Err(e);
            }
        }
        if let Some(dir) = checkpoint_dir {
            checkpoint::save(session.model(), &dir.join(checkpoint_name(fold, stage_cfg.stage)))?;
        }
    }
    Ok(FoldResult {
        fold,
        valid_samples: plan.valid_indices(fold).len(),
        stages,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Fine-tunes `pretrained` on every fold of `plan`.
pub fn run_folds(
    pretrained: &Model,
    target: &LabeledDataset,
    plan: &FoldPlan,
    cfg: &ProtocolConfig,
    seed: u64,
    opts: &RunOptions,
) -> Result<(Vec<FoldResult>, Vec<StageAggregate>)> {
    cfg.validate()?;
    if plan.k < 2 {
        return Err(Error::Config(format!("k-fold needs k ≥ 2, got {}", plan.k)));
    }
    let dir = opts.checkpoint_dir.as_deref();
    let folds = per_fold(plan.k, opts.jobs, |fold| run_fold(pretrained, target, plan, fold, cfg, seed, dir))?;
    let aggregate = Stage::ALL
        .iter()
        .enumerate()
        .map(|(i, &stage)| StageAggregate {
            stage,
            metrics: aggregate(&folds.iter().map(|f| f.stages[i].metrics).collect::<Vec<_>>()),
        })
        .collect();
    Ok((folds, aggregate))
}

/// Pretrains on the source task, then fine-tunes on every target fold.
pub fn run_protocol(
    setting: &TransferSetting,
    plan: &FoldPlan,
    cfg: &ProtocolConfig,
    seed: u64,
    opts: &RunOptions,
) -> Result<(ProtocolResult, Model)> {
    let started = Instant::now();
    cfg.validate()?;
    let model = crate::nn::build_micro_resnet(setting.input_shape(), setting.source.num_classes(), cfg.width, seed)?;
    let (pretrained, pretrain) = pretrain_source(model, &setting.source, &cfg.pretrain, &cfg.train, seed)?;
    if let Some(dir) = &opts.checkpoint_dir {
        checkpoint::save(&pretrained, &dir.join("pretrained.ckpt"))?;
    }
    let (folds, aggregate) = run_folds(&pretrained, &setting.target, plan, cfg, seed, opts)?;
    let result = ProtocolResult { pretrain, folds, aggregate, wall_clock_secs: started.elapsed().as_secs_f64() };
    Ok((result, pretrained))
}

/// Target fold plan used by [`run_protocol`] callers for a given seed.
pub fn target_folds(target: &LabeledDataset, k: usize, seed: u64) -> Result<FoldPlan> {
    stratified_kfold(target, k, derive_seed(seed, &[tag::FOLDS]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineFold {
    pub fold: usize,
    pub epochs: Vec<EpochRecord>,
    pub metrics: StageMetrics,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub total_epochs: usize,
    pub folds: Vec<BaselineFold>,
    pub aggregate: BTreeMap<String, MeanStd>,
    pub wall_clock_secs: f64,
}

impl BaselineResult {
    pub fn mean_accuracy(&self) -> f64 {
        self.folds.iter().map(|f| f.metrics.accuracy).sum::<f64>() / self.folds.len().max(1) as f64
    }
}

/// Control arm: a randomly initialised model, every group trainable, trained
/// on each fold for `total_epochs` with no source pretraining.
#[allow(clippy::too_many_arguments)]
pub fn scratch_baseline(
    target: &LabeledDataset,
    plan: &FoldPlan,
    total_epochs: usize,
    cfg: &BaselineConfig,
    width: usize,
    opts: &TrainOptions,
    seed: u64,
    jobs: usize,
) -> Result<BaselineResult> {
    let started = Instant::now();
    check_rate("baseline lr", cfg.lr)?;
    let ids = sample_ids(target);
    let folds = per_fold(plan.k, jobs, |fold| {
        let t0 = Instant::now();
        let shape = target.image_shape();
        let mut model =
            crate::nn::build_micro_resnet(shape, target.num_classes(), width, derive_seed(seed, &[tag::INIT, fold as u64]))?;
        model.set_all_trainable(true);
        let stats = if opts.standardize { Some(target.stats_of(&plan.train_indices(fold))?) } else { None };
        let stream_seed = derive_seed(seed, &[tag::STAGE, fold as u64, SCRATCH_STREAM]);
        let streams = make_streams(target, plan, fold, opts, cfg.augmentation, stream_seed, stats.as_ref())?;
        let lrs = vec![cfg.lr; model.groups().len()];
        let out = fit(
            &mut model,
            opts.adam,
            "scratch",
            &streams.train,
            &streams.valid,
            &streams.train_eval,
            &ids,
            target.class_names(),
            total_epochs,
            &lrs,
            cfg.schedule,
        )?;
        Ok(BaselineFold { fold, epochs: out.records, metrics: out.metrics, wall_clock_secs: t0.elapsed().as_secs_f64() })
    })?;
    let aggregate = aggregate(&folds.iter().map(|f| f.metrics).collect::<Vec<_>>());
    Ok(BaselineResult { total_epochs, folds, aggregate, wall_clock_secs: started.elapsed().as_secs_f64() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stage(stage: Stage, lr_policy: LrPolicy) -> StageConfig {
        StageConfig { stage, epochs: 1, lr_policy, augmentation: None, schedule: None }
    }

    #[test]
    fn stage_policies_are_checked() {
        assert!(stage(Stage::III, LrPolicy::Fixed { lr: 1e-3 }).validate().is_err());
        assert!(stage(Stage::I, LrPolicy::Slice { lo: 1e-5, hi: 1e-3 }).validate().is_err());
        assert!(stage(Stage::III, LrPolicy::Slice { lo: 1e-5, hi: 1e-3 }).validate().is_ok());
        assert!(stage(Stage::II, LrPolicy::Olrf { sweep_lo: 1e-6, sweep_hi: 1.0, iters: 10, min: 0.1, max: 0.01 })
            .validate()
            .is_err());
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[0.7]).std, 0.0);
    }

    #[test]
    fn stage_numbering() {
        assert_eq!(Stage::ALL.map(Stage::number), [1, 2, 3]);
        assert_eq!(Stage::III.next(), None);
        assert_eq!(Stage::II.to_string(), "II");
    }

    #[test]
    fn epoch_csv_header() {
        let csv = epochs_to_csv(&[EpochRecord {
            stage: "I".into(),
            epoch: 0,
            train_loss: 1.0,
            valid_loss: 2.0,
            error_rate: 0.25,
            accuracy: 0.75,
        }]);
        assert_eq!(csv, "stage,epoch,train_loss,valid_loss,error_rate,accuracy\nI,0,1,2,0.25,0.75\n");
    }
}

//! Command implementations. Everything is computed before anything but
//! checkpoints is written, and every file goes through a temp-file rename.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;
use transfer_core::data::{batches, make_synthetic_transfer_task, write_directory, Split, SyntheticSpec, TransferSetting};
use transfer_core::io::write_atomic;
use transfer_core::nn::{build_micro_resnet, checkpoint, HEAD_GROUP};
use transfer_core::optim::{lr_range_test, AdamConfig, LrFinderConfig, LrFinderTrace, QuadraticBowl};
use transfer_core::protocol::{
    epochs_to_csv, lr_find, pretrain_source, run_protocol, scratch_baseline, target_folds, BaselineResult, FoldSession,
    ProtocolResult, RunOptions, Stage,
};

use crate::config::ExperimentConfig;
use crate::{CliError, CommonArgs, GenArgs, LrfindArgs, RunArgs};

fn output_dir(common: &CommonArgs, from_config: Option<&Path>) -> Result<PathBuf, CliError> {
    let out = common
        .out
        .clone()
        .or_else(|| from_config.map(Path::to_path_buf))
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set `out` in the config".into()))?;
    let occupied = fs::read_dir(&out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !common.force {
        return Err(CliError::OutputExists(out));
    }
    Ok(out)
}

fn write(out: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    Ok(write_atomic(&out.join(name), contents.as_ref())?)
}

fn write_json(out: &Path, name: &str, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialise");
    text.push('\n');
    write(out, name, text)
}

/// Config with command-line overrides applied, plus where to write.
fn prepare(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.common.seed {
        cfg.seed = seed;
    }
    let out = output_dir(&args.common, cfg.out.as_deref())?;
    Ok((cfg, out))
}

#[derive(Serialize)]
struct DatasetSummary {
    image_shape: [usize; 3],
    source_classes: Vec<String>,
    source_samples: usize,
    target_classes: Vec<String>,
    target_samples: usize,
    target_class_counts: Vec<usize>,
}

impl DatasetSummary {
    fn of(s: &TransferSetting) -> Self {
        DatasetSummary {
            image_shape: s.input_shape(),
            source_classes: s.source.class_names().to_vec(),
            source_samples: s.source.len(),
            target_classes: s.target.class_names().to_vec(),
            target_samples: s.target.len(),
            target_class_counts: s.target.class_counts(),
        }
    }
}

/// `summary.json`. Only the `wall_clock_secs` fields vary between identical runs.
#[derive(Serialize)]
struct Summary<'a> {
    command: &'static str,
    seed: u64,
    config: &'a ExperimentConfig,
    dataset: DatasetSummary,
    total_fine_tune_epochs: usize,
    protocol_mean_accuracy: Option<f64>,
    baseline_mean_accuracy: Option<f64>,
    protocol: Option<&'a ProtocolResult>,
    baseline: Option<&'a BaselineResult>,
    wall_clock_secs: f64,
}

fn write_baseline_reports(out: &Path, b: &BaselineResult) -> Result<(), CliError> {
    for f in &b.folds {
        write(out, &format!("baseline_fold_{}.csv", f.fold), epochs_to_csv(&f.epochs))?;
    }
    Ok(())
}

fn run_baseline(
    cfg: &ExperimentConfig,
    setting: &TransferSetting,
    plan: &transfer_core::data::FoldPlan,
    jobs: usize,
) -> Result<Option<BaselineResult>, CliError> {
    let pc = cfg.protocol_config();
    let Some(b) = &pc.baseline else { return Ok(None) };
    let result = scratch_baseline(&setting.target, plan, pc.total_epochs(), b, pc.width, &pc.train, cfg.seed, jobs)?;
    println!("baseline: mean accuracy {:.4} over {} folds", result.mean_accuracy(), result.folds.len());
    Ok(Some(result))
}

pub fn run(args: &RunArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let (cfg, out) = prepare(args)?;
    let setting = cfg.load_data()?;
    let pc = cfg.protocol_config();
    let plan = target_folds(&setting.target, pc.k, cfg.seed)?;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| transfer_core::Error::Io { path: ckpt_dir.clone(), source: e })?;
    let opts = RunOptions { jobs: args.common.jobs, checkpoint_dir: Some(ckpt_dir) };
    log::info!("pretraining on {} source samples, then {} folds", setting.source.len(), pc.k);
    let (result, _) = run_protocol(&setting, &plan, &pc, cfg.seed, &opts)?;
    for agg in &result.aggregate {
        let acc = &agg.metrics["accuracy"];
        println!("stage {}: accuracy {:.4} ± {:.4}", agg.stage, acc.mean, acc.std);
    }
    let baseline = run_baseline(&cfg, &setting, &plan, args.common.jobs)?;

    write(&out, "folds.csv", plan.to_csv())?;
    write(&out, "pretrain.csv", epochs_to_csv(&result.pretrain.epochs))?;
    for f in &result.folds {
        for s in &f.stages {
            let n = s.stage.number();
            write(&out, &format!("stage_{n}_fold_{}.csv", f.fold), epochs_to_csv(&s.epochs))?;
            write(&out, &format!("confusion_{n}_{}.json", f.fold), s.confusion.to_json() + "\n")?;
            write(&out, &format!("confusion_{n}_{}.csv", f.fold), s.confusion.to_csv())?;
        }
    }
    if let Some(b) = &baseline {
        write_baseline_reports(&out, b)?;
    }
    let summary = Summary {
        command: "run",
        seed: cfg.seed,
        config: &cfg,
        dataset: DatasetSummary::of(&setting),
        total_fine_tune_epochs: pc.total_epochs(),
        protocol_mean_accuracy: Some(result.mean_accuracy()),
        baseline_mean_accuracy: baseline.as_ref().map(BaselineResult::mean_accuracy),
        protocol: Some(&result),
        baseline: baseline.as_ref(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write_json(&out, "summary.json", &summary)?;
    println!("reports written to {}", out.display());
    Ok(())
}

pub fn baseline(args: &RunArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let (cfg, out) = prepare(args)?;
    if cfg.protocol.baseline.is_none() {
        return Err(CliError::Config("the config has no [protocol.baseline] section".into()));
    }
    let setting = cfg.load_data()?;
    let plan = target_folds(&setting.target, cfg.protocol.k, cfg.seed)?;
    let result = run_baseline(&cfg, &setting, &plan, args.common.jobs)?.expect("checked above");
    write(&out, "folds.csv", plan.to_csv())?;
    write_baseline_reports(&out, &result)?;
    let summary = Summary {
        command: "baseline",
        seed: cfg.seed,
        config: &cfg,
        dataset: DatasetSummary::of(&setting),
        total_fine_tune_epochs: cfg.protocol_config().total_epochs(),
        protocol_mean_accuracy: None,
        baseline_mean_accuracy: Some(result.mean_accuracy()),
        protocol: None,
        baseline: Some(&result),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write_json(&out, "summary.json", &summary)?;
    println!("reports written to {}", out.display());
    Ok(())
}

fn write_trace(out: &Path, trace: &LrFinderTrace, cfg: &LrFinderConfig, extra: serde_json::Value) -> Result<(), CliError> {
    write(out, "lrfind.csv", trace.to_csv())?;
    let mut meta = json!({
        "lr_lo": cfg.lr_lo,
        "lr_hi": cfg.lr_hi,
        "iters": cfg.num_iters,
        "points": trace.points.len(),
        "divergence_index": trace.divergence_index,
        "divergence_lr": trace.divergence_index.map(|i| trace.points[i].lr),
        "suggested_lr": trace.suggested_lr,
    });
    meta.as_object_mut().expect("object").extend(extra.as_object().cloned().unwrap_or_default());
    write_json(out, "lrfind.json", &meta)?;
    println!("suggested lr: {:e}", trace.suggested_lr);
    if let Some(i) = trace.divergence_index {
        println!("diverged at lr {:e} (iteration {i})", trace.points[i].lr);
    }
    Ok(())
}

pub fn lrfind(args: &LrfindArgs) -> Result<(), CliError> {
    let finder = LrFinderConfig { lr_lo: args.lo, lr_hi: args.hi, num_iters: args.iters, ..LrFinderConfig::default() };
    finder.validate()?;
    if let Some(lambda) = args.quadratic {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(CliError::Config(format!("--quadratic needs a positive curvature, got {lambda}")));
        }
        let out = output_dir(&args.common, None)?;
        let mut bowl = QuadraticBowl::new(lambda, 1.0);
        let trace = lr_range_test(&mut bowl, &finder)?;
        return write_trace(&out, &trace, &finder, json!({ "stability_threshold": bowl.stability_threshold() }));
    }

    let mut cfg = ExperimentConfig::load(args.config.as_deref().expect("clap requires --config"))?;
    if let Some(seed) = args.common.seed {
        cfg.seed = seed;
    }
    let out = output_dir(&args.common, cfg.out.as_deref())?;
    let setting = cfg.load_data()?;
    let pc = cfg.protocol_config();
    let plan = target_folds(&setting.target, pc.k, cfg.seed)?;
    let model = match &args.checkpoint {
        Some(path) => checkpoint::load(path)?,
        None => {
            let init = build_micro_resnet(setting.input_shape(), setting.source.num_classes(), pc.width, cfg.seed)?;
            pretrain_source(init, &setting.source, &pc.pretrain, &pc.train, cfg.seed)?.0
        }
    };
    if model.input_shape() != setting.input_shape() {
        return Err(transfer_core::Error::Checkpoint(format!(
            "model expects {:?} inputs but the data is {:?}",
            model.input_shape(),
            setting.input_shape()
        ))
        .into());
    }
    if args.fold >= pc.k {
        return Err(CliError::Config(format!("--fold {} out of range for k = {}", args.fold, pc.k)));
    }
    let mut model = if model.num_classes() == setting.target.num_classes() {
        model
    } else {
        FoldSession::start(&model, &setting.target, &plan, args.fold, &pc.train, cfg.seed)?.into_model()
    };
    model.set_all_trainable(args.unfreeze);
    model.set_trainable(&[HEAD_GROUP], true)?;
    let policy = pc.stage(Stage::II).augmentation;
    let mut stream =
        batches(&setting.target, &plan, args.fold, Split::Train, pc.train.batch_size, policy, cfg.seed ^ args.fold as u64)?;
    if pc.train.standardize {
        stream = stream.with_stats(setting.target.stats_of(&plan.train_indices(args.fold))?);
    }
    let trace = lr_find(&mut model, &stream, &finder, AdamConfig::default())?;
    write_trace(&out, &trace, &finder, json!({ "fold": args.fold, "unfrozen": args.unfreeze }))
}

pub fn gen(args: &GenArgs) -> Result<(), CliError> {
    let cfg = args.config.as_deref().map(ExperimentConfig::load).transpose()?;
    let base = cfg.as_ref().and_then(ExperimentConfig::synthetic_spec);
    if cfg.is_some() && base.is_none() {
        return Err(CliError::Config("gen needs a config with a [dataset.synthetic] section".into()));
    }
    let d = base.unwrap_or(SyntheticSpec {
        seed: 0,
        source_classes: 6,
        target_classes: 4,
        source_per_class: 200,
        target_per_class: 40,
        image_size: 16,
    });
    let spec = SyntheticSpec {
        seed: args.common.seed.unwrap_or(d.seed),
        source_classes: args.source_classes.unwrap_or(d.source_classes),
        target_classes: args.target_classes.unwrap_or(d.target_classes),
        source_per_class: args.source_per_class.unwrap_or(d.source_per_class),
        target_per_class: args.target_per_class.unwrap_or(d.target_per_class),
        image_size: args.image_size.unwrap_or(d.image_size),
    };
    spec.validate()?;
    let out = output_dir(&args.common, cfg.as_ref().and_then(|c| c.out.as_deref()))?;
    let task = make_synthetic_transfer_task(&spec)?;
    write_directory(&task.source, &out.join("source"))?;
    write_directory(&task.target, &out.join("target"))?;
    let manifest = json!({
        "seed": spec.seed,
        "image_size": spec.image_size,
        "source_classes": task.source.class_names(),
        "source_per_class": spec.source_per_class,
        "target_classes": task.target.class_names(),
        "target_per_class": spec.target_per_class,
    });
    write_json(&out, "corpus.json", &manifest)?;
    println!(
        "wrote {} source and {} target images to {}",
        task.source.len(),
        task.target.len(),
        out.display()
    );
    Ok(())
}

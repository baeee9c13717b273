//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Every tolerance is pinned below. Criterion 8 trains five seeds of the
//! shipped `transfer_benefit.toml` experiment and dominates the runtime.

#[path = "../../core/tests/support/gradcases.rs"]
mod gradcases;
mod support;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use transfer_cli::ExperimentConfig;
use transfer_core::autodiff::kernels::{cross_entropy_rows, softmax_rows};
use transfer_core::data::{batches, stratified_kfold, LabeledDataset, LabeledSample, Split};
use transfer_core::metrics::{confusion, metrics};
use transfer_core::nn::checkpoint;
use transfer_core::optim::{cosine_lr, lr_range_test, slice_lrs, AdamConfig, LrFinderConfig, QuadraticBowl};
use transfer_core::protocol::{
    lr_find, run_protocol, scratch_baseline, target_folds, FoldSession, RunOptions, Stage,
};
use transfer_core::{rng, Tensor};

use support::{code, dtl, read_json, shipped, strip_timing, tiny_config, write_config};

const GRAD_BUDGET_SECS: f64 = 60.0;
const LN_K_TOL: f64 = 1e-9;
const SOFTMAX_SUM_TOL: f64 = 1e-12;
const MICRO_TOL: f64 = 1e-12;
const RANDOM_MATRICES: usize = 1000;
const COSINE_TOL: f64 = 1e-12;
const SLICE_REL_TOL: f64 = 1e-15;
const QUAD_LAMBDA: f64 = 20.0;
const BENEFIT_SEEDS: u64 = 5;
const BENEFIT_SLACK: f64 = 0.02;
const BENEFIT_MIN_WINS: usize = 4;
const BENEFIT_FLOOR: f64 = 0.85;
const RESUMED_EPOCHS: usize = 3;

/// Class sizes spanning 36 to 1749, the spread of the 37-category corpus.
const IMBALANCED_37: [usize; 37] = [
    264, 38, 76, 76, 36, 74, 38, 38, 114, 76, 36, 76, 36, 38, 76, 36, 76, 38, 38, 112, 38, 38, 72, 38, 36, 1749, 76, 38,
    38, 38, 38, 564, 906, 36, 76, 76, 36,
];

type Verdict = (bool, String);

fn c1_gradients() -> Verdict {
    let t0 = Instant::now();
    let mut worst = (0.0, "");
    let mut failed = Vec::new();
    for op in gradcases::OPS {
        let rep = gradcases::check_op(op).unwrap_or_else(|e| panic!("{op}: {e}"));
        if rep.max_rel_error >= gradcases::TOLERANCE {
            failed.push(*op);
        }
        if rep.max_rel_error > worst.0 {
            worst = (rep.max_rel_error, op);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = failed.is_empty() && secs < GRAD_BUDGET_SECS && gradcases::STEP == 1e-5 && gradcases::INSTANCES >= 20;
    let detail = format!(
        "{} ops x {} instances, h = {:e}, worst rel err {:.2e} ({}) < {:e}, {secs:.1} s < {GRAD_BUDGET_SECS} s; failing: {failed:?}",
        gradcases::OPS.len(),
        gradcases::INSTANCES,
        gradcases::STEP,
        worst.0,
        worst.1,
        gradcases::TOLERANCE
    );
    (pass, detail)
}

fn c2_loss_identities() -> Verdict {
    let mut worst_ce: f64 = 0.0;
    for k in [2usize, 3, 10, 37] {
        let n = 4;
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        for l in cross_entropy_rows(&vec![0.7; n * k], n, k, &labels) {
            worst_ce = worst_ce.max((l - (k as f64).ln()).abs());
        }
    }
    let mut r = rng::stream(2, &[0xACC]);
    let mut worst_sum: f64 = 0.0;
    for k in [2usize, 3, 10, 37] {
        let n = 50;
        let scores: Vec<f64> = (0..n * k).map(|_| r.gen_range(-30.0..30.0)).collect();
        for row in softmax_rows(&scores, n, k).chunks(k) {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    (
        worst_ce < LN_K_TOL && worst_sum < SOFTMAX_SUM_TOL,
        format!("|CE - ln K| max {worst_ce:.1e} < {LN_K_TOL:e}; |sum softmax - 1| max {worst_sum:.1e} < {SOFTMAX_SUM_TOL:e}"),
    )
}

fn c3_metrics_oracle() -> Verdict {
    let mut r = rng::stream(3, &[0xACC]);
    let mut worst: f64 = 0.0;
    let mut exact = true;
    for _ in 0..RANDOM_MATRICES {
        let k = r.gen_range(2..=10);
        let n = r.gen_range(1..200);
        let truth: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let pred: Vec<usize> = truth.iter().map(|&t| if r.gen_bool(0.7) { t } else { r.gen_range(0..k) }).collect();
        let m = metrics(&confusion(&truth, &pred, k).unwrap()).unwrap();
        for v in [m.micro.precision, m.micro.recall, m.micro.f1] {
            worst = worst.max((v - m.accuracy).abs());
        }
        exact &= m.accuracy + m.error_rate == 1.0;
    }
    // 1155 of 1321 correct gives the 0.874338 / 0.125662 pair.
    let truth: Vec<usize> = (0..1321).map(|i| i % 2).collect();
    let pred: Vec<usize> = truth.iter().enumerate().map(|(i, &t)| if i < 1155 { t } else { 1 - t }).collect();
    let m = metrics(&confusion(&truth, &pred, 2).unwrap()).unwrap();
    let table = format!("{:.6}/{:.6}", m.accuracy, m.error_rate);
    let pass = worst < MICRO_TOL && exact && table == "0.874338/0.125662" && m.accuracy + m.error_rate == 1.0;
    (pass, format!("{RANDOM_MATRICES} matrices: max |micro - acc| {worst:.1e} < {MICRO_TOL:e}, acc + err == 1 exactly: {exact}; 1155/1321 -> {table}"))
}

fn c4_schedules() -> Verdict {
    let (hi, lo) = (0.1, 1e-4);
    let mut err: f64 = 0.0;
    for t_i in [2usize, 10, 64, 1000] {
        err = err.max((cosine_lr(hi, lo, 0, t_i).unwrap() - hi).abs());
        err = err.max((cosine_lr(hi, lo, t_i, t_i).unwrap() - lo).abs());
        err = err.max((cosine_lr(hi, lo, t_i / 2, t_i).unwrap() - (hi + lo) / 2.0).abs());
    }
    let s = slice_lrs(3e-6, 4e-3, 3).unwrap();
    let mid = 1.2e-8f64.sqrt();
    let rel = (s[1] - mid).abs() / mid;
    let pass = err < COSINE_TOL && s[0] == 3e-6 && s[2] == 4e-3 && rel < SLICE_REL_TOL;
    (pass, format!("cosine endpoint/midpoint max err {err:.1e} < {COSINE_TOL:e}; slice {s:?}, middle rel err {rel:.1e} < {SLICE_REL_TOL:e}"))
}

fn c5_freeze(dir: &Path) -> Verdict {
    let cfg = ExperimentConfig::parse(&tiny_config(3, 6, 1e-2, 1)).unwrap();
    let (setting, pc) = (cfg.load_data().unwrap(), cfg.protocol_config());
    let plan = target_folds(&setting.target, pc.k, cfg.seed).unwrap();
    let ckpts = dir.join("c5");
    fs::create_dir_all(&ckpts).unwrap();
    let opts = RunOptions { jobs: 0, checkpoint_dir: Some(ckpts.clone()) };
    let (result, _) = run_protocol(&setting, &plan, &pc, cfg.seed, &opts).unwrap();
    let pretrained = format!("{:016x}", checkpoint::load(&ckpts.join("pretrained.ckpt")).unwrap().base_checksum());
    let mut checked = 0;
    let mut ok = true;
    for f in &result.folds {
        for s in f.stages.iter().filter(|s| s.stage != Stage::III) {
            ok &= s.base_checksum_before == pretrained && s.base_checksum_after == pretrained;
            checked += 1;
        }
        let after_ii = checkpoint::load(&ckpts.join(format!("fold_{}_stage_2.ckpt", f.fold))).unwrap();
        ok &= format!("{:016x}", after_ii.base_checksum()) == pretrained;
        let after_iii = checkpoint::load(&ckpts.join(format!("fold_{}_stage_3.ckpt", f.fold))).unwrap();
        ok &= format!("{:016x}", after_iii.base_checksum()) != pretrained;
    }
    (ok, format!("{checked} stage I/II reports and {} stage II checkpoints keep base checksum {pretrained}; stage III moves it", result.folds.len()))
}

fn c6_stratified() -> Verdict {
    let mut samples = Vec::new();
    for (c, &n) in IMBALANCED_37.iter().enumerate() {
        samples.extend((0..n).map(|i| LabeledSample { image: Tensor::zeros(&[1, 1, 1]), label: c, id: format!("{c}/{i}") }));
    }
    let ds = LabeledDataset::new(samples, (0..37).map(|c| format!("c{c:02}")).collect()).unwrap();
    let mut spread = 0;
    let mut union_ok = true;
    for seed in 0..5 {
        let plan = stratified_kfold(&ds, 5, seed).unwrap();
        for row in plan.class_fold_counts(&ds) {
            spread = spread.max(row.iter().max().unwrap() - row.iter().min().unwrap());
        }
        let mut all: Vec<usize> = (0..5).flat_map(|f| plan.valid_indices(f)).collect();
        all.sort_unstable();
        union_ok &= all == (0..ds.len()).collect::<Vec<_>>();
    }
    (spread <= 1 && union_ok, format!("{} samples, 5 seeds x 5 folds: max per-class fold spread {spread} <= 1, union of validation folds = dataset: {union_ok}", ds.len()))
}

fn c7_lr_finder() -> Verdict {
    let x0 = 0.731;
    let mut bowl = QuadraticBowl::new(QUAD_LAMBDA, x0);
    let trace = lr_range_test(&mut bowl, &LrFinderConfig::default()).unwrap();
    let limit = bowl.stability_threshold();
    let restored = bowl.x.to_bits() == x0.to_bits();

    let cfg = ExperimentConfig::parse(&tiny_config(3, 6, 1e-2, 1)).unwrap();
    let (setting, pc) = (cfg.load_data().unwrap(), cfg.protocol_config());
    let plan = target_folds(&setting.target, pc.k, cfg.seed).unwrap();
    let init = transfer_core::nn::build_micro_resnet(setting.input_shape(), 3, 2, 1).unwrap();
    let mut model = FoldSession::start(&init, &setting.target, &plan, 0, &pc.train, 1).unwrap().into_model();
    model.set_all_trainable(true);
    let before = checkpoint::encode(&model);
    let stream = batches(&setting.target, &plan, 0, Split::Train, 8, None, 5).unwrap();
    lr_find(&mut model, &stream, &LrFinderConfig { num_iters: 30, ..LrFinderConfig::default() }, AdamConfig::default()).unwrap();
    let model_restored = checkpoint::encode(&model) == before;
    (
        trace.suggested_lr < limit && restored && model_restored,
        format!(
            "lambda {QUAD_LAMBDA}: suggested {:.4e} < 2/lambda = {limit}; bowl restored bit-exactly: {restored}; model state restored bit-exactly: {model_restored}",
            trace.suggested_lr
        ),
    )
}

fn c8_transfer_benefit() -> Verdict {
    let t0 = Instant::now();
    let base = ExperimentConfig::load(&shipped("transfer_benefit.toml")).unwrap();
    let mut wins = 0;
    let mut floor_ok = true;
    let mut rows = Vec::new();
    for seed in 0..BENEFIT_SEEDS {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let (setting, pc) = (cfg.load_data().unwrap(), cfg.protocol_config());
        let plan = target_folds(&setting.target, pc.k, seed).unwrap();
        let (result, _) = run_protocol(&setting, &plan, &pc, seed, &RunOptions::default()).unwrap();
        let b = pc.baseline.as_ref().expect("shipped config has a baseline");
        let scratch = scratch_baseline(&setting.target, &plan, pc.total_epochs(), b, pc.width, &pc.train, seed, 0).unwrap();
        let (p, s) = (result.mean_accuracy(), scratch.mean_accuracy());
        wins += usize::from(p >= s - BENEFIT_SLACK);
        floor_ok &= p >= BENEFIT_FLOOR;
        rows.push(format!("seed {seed}: {p:.3} vs {s:.3}"));
    }
    (
        wins >= BENEFIT_MIN_WINS && floor_ok,
        format!(
            "protocol >= scratch - {BENEFIT_SLACK} in {wins}/{BENEFIT_SEEDS} seeds (need {BENEFIT_MIN_WINS}), every protocol mean >= {BENEFIT_FLOOR}: {floor_ok} [{}], {:.0} s",
            rows.join("; "),
            t0.elapsed().as_secs_f64()
        ),
    )
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let name = p.strip_prefix(dir).unwrap().display().to_string();
        if p.is_dir() {
            out.extend(files(&p).into_iter().map(|(n, b)| (format!("{name}/{n}"), b)));
        } else if name != "summary.json" {
            out.push((name, fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

fn c9_determinism(dir: &Path) -> Verdict {
    let cfg = write_config(dir, &tiny_config(3, 8, 1e-2, 2));
    let run = |name: &str| {
        let out = dir.join(name);
        let res = dtl(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
        out
    };
    let (a, b) = (run("c9a"), run("c9b"));
    let (mut sa, mut sb) = (read_json(&a.join("summary.json")), read_json(&b.join("summary.json")));
    strip_timing(&mut sa);
    strip_timing(&mut sb);
    let summary_eq = serde_json::to_string(&sa).unwrap() == serde_json::to_string(&sb).unwrap();
    let (fa, fb) = (files(&a), files(&b));
    let others_eq = fa == fb;
    (summary_eq && others_eq, format!("two `dtl run` invocations: summary.json equal modulo wall_clock_secs: {summary_eq}; other {} files byte-identical: {others_eq}", fa.len()))
}

fn c10_resume(dir: &Path) -> Verdict {
    let cfg_path = write_config(dir, &tiny_config(3, 8, 1e-2, RESUMED_EPOCHS));
    let out = dir.join("c10");
    let res = dtl(&["run", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let summary = read_json(&out.join("summary.json"));
    let cfg = ExperimentConfig::load(&cfg_path).unwrap();
    let (setting, pc) = (cfg.load_data().unwrap(), cfg.protocol_config());
    let plan = target_folds(&setting.target, pc.k, cfg.seed).unwrap();
    let mut ok = true;
    for fold in 0..pc.k {
        let ckpts = out.join("checkpoints");
        let model = checkpoint::load(&ckpts.join(format!("fold_{fold}_stage_2.ckpt"))).unwrap();
        let mut session = FoldSession::resume(model, Stage::II, &setting.target, &plan, fold, &pc.train, cfg.seed).unwrap();
        let report = session.run_stage(pc.stage(Stage::III)).unwrap();
        // Both sides pass through the same shortest-round-trip float text.
        let resumed: serde_json::Value = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
        ok &= resumed == summary["protocol"]["folds"][fold]["stages"][2];
        ok &= report.epochs.len() == RESUMED_EPOCHS;
        let straight = checkpoint::load(&ckpts.join(format!("fold_{fold}_stage_3.ckpt"))).unwrap();
        ok &= checkpoint::encode(session.model()) == checkpoint::encode(&straight);
    }
    (ok, format!("{} folds: stage III resumed from the stage II checkpoint file matches the uninterrupted run (report and model bytes) over {RESUMED_EPOCHS} epochs: {ok}", pc.k))
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Verdict>)> = vec![
        (1, "gradient correctness", Box::new(c1_gradients)),
        (2, "loss identities", Box::new(c2_loss_identities)),
        (3, "metrics oracle", Box::new(c3_metrics_oracle)),
        (4, "scheduler contracts", Box::new(c4_schedules)),
        (5, "freeze invariance", Box::new(move || c5_freeze(d))),
        (6, "stratified cross-validation", Box::new(c6_stratified)),
        (7, "lr finder safety", Box::new(c7_lr_finder)),
        (8, "transfer benefit", Box::new(c8_transfer_benefit)),
        (9, "end-to-end determinism", Box::new(move || c9_determinism(d))),
        (10, "checkpoint round trip", Box::new(move || c10_resume(d))),
    ];
    let mut failures = 0;
    for (n, name, check) in &criteria {
        let (pass, detail) = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            (false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        failures += usize::from(!pass);
        println!("criterion {n:>2} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}

// Helpers shared by the CLI integration tests and the acceptance suite.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn dtl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dtl")).args(args).output().expect("dtl binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("dtl exited normally")
}

pub fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

/// A few-second experiment: 3 source × 20 and 3 target × `per_class` images.
pub fn tiny_config(k: usize, per_class: usize, stage1_lr: f64, stage3_epochs: usize) -> String {
    format!(
        r#"
seed = 3

[dataset]
image_size = 16
synthetic = {{ source_classes = 3, target_classes = 3, source_per_class = 20, target_per_class = {per_class} }}

[model]
width = 2

[protocol]
k = {k}
batch_size = 8
pretrain = {{ epochs = 1, lr = 3e-3 }}

[[protocol.stages]]
stage = "I"
epochs = 1
lr_policy = {{ policy = "fixed", lr = {stage1_lr:e} }}

[[protocol.stages]]
stage = "II"
epochs = 1
lr_policy = {{ policy = "olrf", iters = 12, min = 1e-3, max = 1e-2 }}
augmentation = {{ flip_h = 0.5, max_rotate = 10.0 }}
schedule = {{}}

[[protocol.stages]]
stage = "III"
epochs = {stage3_epochs}
lr_policy = {{ policy = "slice", lo = 1e-4, hi = 1e-2 }}
augmentation = {{ flip_h = 0.5, max_rotate = 10.0 }}
schedule = {{}}

[protocol.baseline]
lr = 5e-3
"#
    )
}

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("experiment.toml");
    std::fs::write(&p, text).unwrap();
    p
}

/// Drops every `wall_clock_secs` field, at any depth.
pub fn strip_timing(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            m.remove("wall_clock_secs");
            m.values_mut().for_each(strip_timing);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

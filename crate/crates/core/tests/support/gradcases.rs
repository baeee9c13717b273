// Random instances of every differentiable tape op for finite-difference checks.
// Shared by the core gradient tests and the workspace acceptance suite.

use rand::seq::SliceRandom;
use rand::Rng as _;
use transfer_core::autodiff::check::{check_gradients, GradCheckReport};
use transfer_core::autodiff::{BnMode, Graph, Var};
use transfer_core::{rng, Result, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: u64 = 20;

pub const OPS: &[&str] = &[
    "matmul",
    "conv2d",
    "relu",
    "maxpool2d",
    "avgpool2d",
    "add",
    "scale",
    "reshape",
    "flatten",
    "add_channel_bias",
    "batch_norm_batch",
    "batch_norm_fixed",
    "softmax_cross_entropy",
    "residual_chain",
];

fn uniform(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

/// Values bounded away from zero, so no element sits on the ReLU kink.
fn off_kink(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(0.05..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values at least 0.04 apart, so pooling maxima are stable under ±h.
fn well_separated(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(r);
    Tensor::from_fn(shape, |i| ranks[i] as f64 * 0.05 + r.gen_range(0.0..0.01) - 1.0)
}

fn dim(r: &mut rng::Rng, lo: usize, hi: usize) -> usize {
    r.gen_range(lo..=hi)
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn case(op: &str, seed: u64) -> (Vec<Tensor>, Build) {
    let op_tag = OPS.iter().position(|o| *o == op).expect("known op") as u64;
    let mut r = rng::stream(seed, &[0xC4EC, op_tag]);
    let r = &mut r;
    match op {
        "matmul" => {
            let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 5), dim(r, 1, 4));
            (vec![uniform(&[m, k], r), uniform(&[k, n], r)], Box::new(|g, v| g.matmul(v[0], v[1])))
        }
        "conv2d" => {
            let (n, c, f) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3));
            let k = *[1usize, 2, 3].choose(r).unwrap();
            let stride = dim(r, 1, 2);
            let pad = dim(r, 0, 1);
            let (h, w) = (dim(r, k.max(3), 6), dim(r, k.max(3), 6));
            (
                vec![uniform(&[n, c, h, w], r), uniform(&[f, c, k, k], r)],
                Box::new(move |g, v| g.conv2d(v[0], v[1], stride, pad)),
            )
        }
        "relu" => {
            let shape = [dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 3)];
            (vec![off_kink(&shape, r)], Box::new(|g, v| Ok(g.relu(v[0]))))
        }
        "maxpool2d" | "avgpool2d" => {
            let (n, c) = (dim(r, 1, 2), dim(r, 1, 2));
            let k = dim(r, 1, 3);
            let stride = dim(r, 1, k);
            let (h, w) = (dim(r, k, 7), dim(r, k, 7));
            let x = well_separated(&[n, c, h, w], r);
            if op == "maxpool2d" {
                (vec![x], Box::new(move |g, v| g.maxpool2d(v[0], k, k, stride)))
            } else {
                (vec![x], Box::new(move |g, v| g.avgpool2d(v[0], k, k, stride)))
            }
        }
        "add" => {
            let shape = [dim(r, 1, 3), dim(r, 1, 5)];
            (vec![uniform(&shape, r), uniform(&shape, r)], Box::new(|g, v| g.add(v[0], v[1])))
        }
        "scale" => {
            let f = r.gen_range(-3.0..3.0);
            let shape = [dim(r, 1, 4), dim(r, 1, 4)];
            (vec![uniform(&shape, r)], Box::new(move |g, v| Ok(g.scale(v[0], f))))
        }
        "reshape" => {
            let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
            (vec![uniform(&[a, b], r)], Box::new(move |g, v| g.reshape(v[0], &[b, a])))
        }
        "flatten" => {
            let shape = [dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)];
            (vec![uniform(&shape, r)], Box::new(|g, v| g.flatten(v[0])))
        }
        "add_channel_bias" => {
            let (n, c, h, w) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3));
            (vec![uniform(&[n, c, h, w], r), uniform(&[c], r)], Box::new(|g, v| g.add_channel_bias(v[0], v[1])))
        }
        "batch_norm_batch" => {
            let (n, c, h, w) = (dim(r, 2, 3), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3));
            let gamma = Tensor::from_fn(&[c], |_| r.gen_range(0.5..1.5));
            (
                vec![uniform(&[n, c, h, w], r), gamma, uniform(&[c], r)],
                Box::new(|g, v| Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, BnMode::Batch)?.0)),
            )
        }
        "batch_norm_fixed" => {
            let (n, c, h, w) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3));
            let mean: Vec<f64> = (0..c).map(|_| r.gen_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| r.gen_range(0.2..2.0)).collect();
            let gamma = Tensor::from_fn(&[c], |_| r.gen_range(0.5..1.5));
            (
                vec![uniform(&[n, c, h, w], r), gamma, uniform(&[c], r)],
                Box::new(move |g, v| Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, BnMode::Fixed { mean: &mean, var: &var })?.0)),
            )
        }
        "softmax_cross_entropy" => {
            let (n, k) = (dim(r, 1, 5), dim(r, 2, 6));
            let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
            let scores = Tensor::from_fn(&[n, k], |_| r.gen_range(-3.0..3.0));
            (vec![scores], Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels)))
        }
        "residual_chain" => {
            // x + bn(conv(relu(x))) followed by global average pooling
            let (n, c, hw) = (2, dim(r, 1, 2), dim(r, 3, 4));
            let gamma = Tensor::from_fn(&[c], |_| r.gen_range(0.5..1.5));
            (
                vec![off_kink(&[n, c, hw, hw], r), uniform(&[c, c, 3, 3], r), gamma, uniform(&[c], r)],
                Box::new(move |g, v| {
                    let a = g.relu(v[0]);
                    let b = g.conv2d(a, v[1], 1, 1)?;
                    let (b, _) = g.batch_norm(b, v[2], v[3], 1e-5, BnMode::Batch)?;
                    let s = g.add(v[0], b)?;
                    g.avgpool2d(s, hw, hw, 1)
                }),
            )
        }
        other => panic!("unknown op {other}"),
    }
}

/// Checks `INSTANCES` random instances of `op`; returns the worst report.
pub fn check_op(op: &str) -> Result<GradCheckReport> {
    let mut worst: Option<GradCheckReport> = None;
    for seed in 0..INSTANCES {
        let (inputs, build) = case(op, seed);
        let rep = check_gradients(&inputs, build, STEP)?;
        if worst.as_ref().is_none_or(|w| rep.max_rel_error > w.max_rel_error) {
            worst = Some(rep);
        }
    }
    Ok(worst.expect("at least one instance"))
}

//! Confusion matrices, precision/recall/F1 in micro and macro flavours, and
//! per-sample loss ranking.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{cross_entropy_rows, softmax_rows};
use crate::data::BatchStream;
use crate::error::{Error, Result};
use crate::nn::Model;

/// `counts[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

pub fn confusion(truth: &[usize], predicted: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::Data(format!("{} labels but {} predictions", truth.len(), predicted.len())));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (i, (&t, &p)) in truth.iter().zip(predicted).enumerate() {
        if t >= k || p >= k {
            return Err(Error::Data(format!("sample {i}: label pair ({t}, {p}) outside {k} classes")));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { class_names: (0..k).map(|c| c.to_string()).collect(), counts })
}

impl ConfusionMatrix {
    pub fn with_class_names(mut self, names: &[String]) -> Result<Self> {
        if names.len() != self.counts.len() {
            return Err(Error::Data(format!("{} names for {} classes", names.len(), self.counts.len())));
        }
        self.class_names = names.to_vec();
        Ok(self)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|c| self.counts[c][c]).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serialises")
    }

    /// Header row of predicted class names, then one row per true class.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("truth\\predicted");
        for n in &self.class_names {
            let _ = write!(s, ",{n}");
        }
        s.push('\n');
        for (n, row) in self.class_names.iter().zip(&self.counts) {
            s.push_str(n);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when a denominator was zero and the affected score was defined as 0.
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averaged {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub error_rate: f64,
    pub micro: Averaged,
    pub macro_avg: Averaged,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

pub fn metrics(m: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = m.total();
    if total == 0 {
        return Err(Error::Data("metrics of an empty confusion matrix".into()));
    }
    let k = m.num_classes();
    let (mut sum_a, mut sum_theta, mut sum_b) = (0, 0, 0);
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let a = m.counts[c][c];
        let theta = (0..k).map(|r| m.counts[r][c]).sum::<u64>() - a;
        let b = m.counts[c].iter().sum::<u64>() - a;
        sum_a += a;
        sum_theta += theta;
        sum_b += b;
        let (p, r) = (ratio(a, a + theta), ratio(a, a + b));
        let degenerate = p.is_none() || r.is_none();
        let (p, r) = (p.unwrap_or(0.0), r.unwrap_or(0.0));
        per_class.push(ClassMetrics {
            name: m.class_names[c].clone(),
            precision: p,
            recall: r,
            f1: f1(p, r),
            support: a + b,
            degenerate,
        });
    }
    let mp = ratio(sum_a, sum_a + sum_theta).unwrap_or(0.0);
    let mr = ratio(sum_a, sum_a + sum_b).unwrap_or(0.0);
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    let macro_avg = Averaged { precision: mean(|c| c.precision), recall: mean(|c| c.recall), f1: mean(|c| c.f1) };
    let accuracy = m.trace() as f64 / total as f64;
    Ok(MetricsReport {
        accuracy,
        error_rate: 1.0 - accuracy,
        micro: Averaged { precision: mp, recall: mr, f1: f1(mp, mr) },
        macro_avg,
        per_class,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopLossEntry {
    pub id: String,
    pub predicted: usize,
    pub truth: usize,
    pub loss: f64,
}

/// Per-sample evaluation of a model on a stream, in stream order.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub ids: Vec<String>,
    pub truth: Vec<usize>,
    pub predicted: Vec<usize>,
    pub losses: Vec<f64>,
    /// Softmax probability of the predicted class.
    pub confidence: Vec<f64>,
    pub num_classes: usize,
}

impl Evaluation {
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len().max(1) as f64
    }

    pub fn confusion(&self) -> Result<ConfusionMatrix> {
        confusion(&self.truth, &self.predicted, self.num_classes)
    }

    /// The `n` highest-loss samples, descending; ties keep stream order.
    pub fn top_losses(&self, n: usize) -> Vec<TopLossEntry> {
        let mut order: Vec<usize> = (0..self.losses.len()).collect();
        order.sort_by(|&a, &b| self.losses[b].total_cmp(&self.losses[a]));
        order
            .into_iter()
            .take(n)
            .map(|i| TopLossEntry {
                id: self.ids[i].clone(),
                predicted: self.predicted[i],
                truth: self.truth[i],
                loss: self.losses[i],
            })
            .collect()
    }
}

/// First index of the row maximum.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Evaluation-mode pass over epoch 0 of `stream`.
pub fn evaluate(model: &Model, stream: &BatchStream<'_>, ids: &[String]) -> Result<Evaluation> {
    let k = model.num_classes();
    let mut ev = Evaluation {
        ids: Vec::with_capacity(stream.len()),
        truth: Vec::with_capacity(stream.len()),
        predicted: Vec::with_capacity(stream.len()),
        losses: Vec::with_capacity(stream.len()),
        confidence: Vec::with_capacity(stream.len()),
        num_classes: k,
    };
    for batch in stream.epoch(0) {
        let n = batch.labels.len();
        let logits = model.predict(batch.images)?;
        if let Some((i, &l)) = batch.labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::Data(format!("sample {}: label {l} outside {k} classes", batch.indices[i])));
        }
        let probs = softmax_rows(logits.data(), n, k);
        ev.losses.extend(cross_entropy_rows(logits.data(), n, k, &batch.labels));
        for (r, &idx) in batch.indices.iter().enumerate() {
            let p = argmax(&logits.data()[r * k..(r + 1) * k]);
            ev.predicted.push(p);
            ev.confidence.push(probs[r * k + p]);
            ev.ids.push(ids[idx].clone());
        }
        ev.truth.extend(batch.labels);
    }
    Ok(ev)
}

pub fn top_losses(model: &Model, stream: &BatchStream<'_>, ids: &[String], n: usize) -> Result<Vec<TopLossEntry>> {
    Ok(evaluate(model, stream, ids)?.top_losses(n))
}

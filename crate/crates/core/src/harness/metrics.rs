//! Sentiment metrics: two binary accuracies with their weighted F1 scores,
//! seven-class accuracy, MAE and Pearson correlation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Negative vs non-negative; zero counts as non-negative.
    pub acc2_nonneg: f64,
    /// Negative vs positive over samples with non-zero labels.
    pub acc2_pos: f64,
    pub f1_nonneg: f64,
    pub f1_pos: f64,
    pub acc7: f64,
    pub mae: f64,
    pub corr: f64,
    pub n: usize,
}

impl Metrics {
    pub fn as_pairs(&self) -> [(&'static str, f64); 7] {
        [
            ("acc2_nonneg", self.acc2_nonneg),
            ("acc2_pos", self.acc2_pos),
            ("f1_nonneg", self.f1_nonneg),
            ("f1_pos", self.f1_pos),
            ("acc7", self.acc7),
            ("mae", self.mae),
            ("corr", self.corr),
        ]
    }
}

/// Order-independent sum: values are added in ascending order.
pub fn sorted_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    sorted_sum(v) / n
}

fn accuracy(truth: &[bool], pred: &[bool]) -> f64 {
    mean(truth.iter().zip(pred).map(|(t, p)| f64::from(u8::from(t == p))))
}

/// Support-weighted mean of the per-class F1 scores of a binary problem.
pub fn weighted_f1(truth: &[bool], pred: &[bool]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for class in [false, true] {
        let count = |t: bool, p: bool| truth.iter().zip(pred).filter(|&(&a, &b)| (a == class) == t && (b == class) == p).count();
        let tp = count(true, true) as f64;
        let fp = count(false, true) as f64;
        let fnn = count(true, false) as f64;
        let support = tp + fnn;
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fnn) };
        total += support * f1;
    }
    total / truth.len() as f64
}

/// Pearson correlation; zero when either side has no variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x.iter().copied()), mean(y.iter().copied()));
    let sxy = sorted_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let sxx = sorted_sum(x.iter().map(|a| (a - mx) * (a - mx)));
    let syy = sorted_sum(y.iter().map(|b| (b - my) * (b - my)));
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

fn bin7(v: f64) -> i64 {
    v.clamp(-3.0, 3.0).round() as i64
}

pub fn compute(pred: &[f64], labels: &[f64]) -> Result<Metrics> {
    if pred.is_empty() {
        return Err(Error::contract("cannot evaluate an empty dataset"));
    }
    if pred.len() != labels.len() {
        return Err(Error::shape("metrics", &[pred.len()], &[labels.len()]));
    }
    let truth_nn: Vec<bool> = labels.iter().map(|&y| y >= 0.0).collect();
    let pred_nn: Vec<bool> = pred.iter().map(|&p| p >= 0.0).collect();
    let nonzero: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 0.0).collect();
    let truth_pos: Vec<bool> = nonzero.iter().map(|&i| labels[i] > 0.0).collect();
    let pred_pos: Vec<bool> = nonzero.iter().map(|&i| pred[i] > 0.0).collect();
    Ok(Metrics {
        acc2_nonneg: accuracy(&truth_nn, &pred_nn),
        acc2_pos: accuracy(&truth_pos, &pred_pos),
        f1_nonneg: weighted_f1(&truth_nn, &pred_nn),
        f1_pos: weighted_f1(&truth_pos, &pred_pos),
        acc7: mean(pred.iter().zip(labels).map(|(&p, &y)| f64::from(u8::from(bin7(p) == bin7(y))))),
        mae: mean(pred.iter().zip(labels).map(|(p, y)| (p - y).abs())),
        corr: pearson(pred, labels),
        n: pred.len(),
    })
}

//! Brute-force references shared by the integration and acceptance tests.

#![allow(dead_code)]

use rand::Rng;
use sati::numcore::{rng, Rng as SatiRng};

pub struct RefMetrics {
    pub acc2_nonneg: f64,
    pub acc2_pos: f64,
    pub f1_nonneg: f64,
    pub f1_pos: f64,
    pub acc7: f64,
    pub mae: f64,
    pub corr: f64,
}

fn class7(v: f64) -> i64 {
    let v = v.clamp(-3.0, 3.0);
    let f = v.floor();
    let frac = v - f;
    let r = if frac > 0.5 || (frac == 0.5 && v > 0.0) { f + 1.0 } else { f };
    r as i64
}

/// Support-weighted F1 from a confusion matrix with precision and recall.
fn f1_weighted(truth: &[bool], pred: &[bool]) -> f64 {
    let n = truth.len();
    if n == 0 {
        return 0.0;
    }
    let mut out = 0.0;
    for c in [false, true] {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for i in 0..n {
            match (truth[i] == c, pred[i] == c) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fn_ += 1.0,
                _ => {}
            }
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        out += f1 * (tp + fn_) / n as f64;
    }
    out
}

fn frac_equal(a: &[bool], b: &[bool]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

pub fn reference_metrics(pred: &[f64], labels: &[f64]) -> RefMetrics {
    let n = pred.len() as f64;
    let tn: Vec<bool> = labels.iter().map(|&y| !(y < 0.0)).collect();
    let pn: Vec<bool> = pred.iter().map(|&p| !(p < 0.0)).collect();
    let mut tp = Vec::new();
    let mut pp = Vec::new();
    for (p, y) in pred.iter().zip(labels) {
        if *y != 0.0 {
            tp.push(*y > 0.0);
            pp.push(*p > 0.0);
        }
    }
    let acc7 = pred.iter().zip(labels).filter(|(p, y)| class7(**p) == class7(**y)).count() as f64 / n;
    let mae = pred.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / n;
    let mp = pred.iter().sum::<f64>() / n;
    let my = labels.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (p, y) in pred.iter().zip(labels) {
        sxy += (p - mp) * (y - my);
        sxx += (p - mp) * (p - mp);
        syy += (y - my) * (y - my);
    }
    let corr = if sxx > 0.0 && syy > 0.0 { sxy / (sxx * syy).sqrt() } else { 0.0 };
    RefMetrics {
        acc2_nonneg: frac_equal(&tn, &pn),
        acc2_pos: frac_equal(&tp, &pp),
        f1_nonneg: f1_weighted(&tn, &pn),
        f1_pos: f1_weighted(&tp, &pp),
        acc7,
        mae,
        corr,
    }
}

/// A random prediction/label pair with exact zeros, half-integers and
/// out-of-range scores mixed in, so every tie rule is exercised.
pub fn random_case(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r: SatiRng = rng(seed);
    let n = r.random_range(5..80);
    let draw = |r: &mut SatiRng| match r.random_range(0..6) {
        0 => 0.0,
        1 => r.random_range(-3..=3) as f64 + 0.5,
        2 => r.random_range(-3..=3) as f64,
        3 => r.random_range(-4.0..4.0),
        _ => r.random_range(-3.0..3.0),
    };
    let labels: Vec<f64> = (0..n).map(|_| draw(&mut r)).collect();
    let pred: Vec<f64> = labels
        .iter()
        .map(|&y| if r.random_bool(0.3) { draw(&mut r) } else { y + r.random_range(-1.0..1.0) })
        .collect();
    (pred, labels)
}

/// Largest absolute difference between the library metrics and the
/// reference, over the five reported metric families.
pub fn metric_gap(pred: &[f64], labels: &[f64]) -> f64 {
    let m = sati::harness::metrics::compute(pred, labels).expect("non-empty case");
    let r = reference_metrics(pred, labels);
    [
        m.acc2_nonneg - r.acc2_nonneg,
        m.acc2_pos - r.acc2_pos,
        m.f1_nonneg - r.f1_nonneg,
        m.f1_pos - r.f1_pos,
        m.acc7 - r.acc7,
        m.mae - r.mae,
        m.corr - r.corr,
    ]
    .iter()
    .map(|d| d.abs())
    .fold(0.0, f64::max)
}

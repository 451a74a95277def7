//! Post-hoc analyses of a trained model: linear modality probes on pooled
//! subspace embeddings and the adjacent-frame divergence of the video stream.

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Sample};
use crate::error::{Error, Result};
use crate::harness::train::{batches, Trained};
use crate::model::{pooled_reps, SatiModel};
use crate::modality::Modality;
use crate::nn::Dropout;
use crate::numcore::{BoundParams, ParamStore, Tape, Tensor};
use crate::temporal::{temporal_invariance_loss, TemporalTarget};

/// Multinomial logistic regression trained by full-batch gradient descent
/// on standardized features.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[d + 1, classes]`, last row is the bias.
    weights: Vec<f64>,
    d: usize,
    classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

fn softmax_row(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

impl LinearProbe {
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        let n = x.len();
        if n == 0 || n != y.len() {
            return Err(Error::contract("probe needs matching, non-empty features and labels"));
        }
        let d = x[0].len();
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        let mut scale = vec![0.0; d];
        for row in x {
            for j in 0..d {
                scale[j] += (row[j] - mean[j]).powi(2) / n as f64;
            }
        }
        for s in scale.iter_mut() {
            *s = if *s > 1e-12 { 1.0 / s.sqrt() } else { 0.0 };
        }
        let mut probe = Self {
            mean,
            scale,
            weights: vec![0.0; (d + 1) * classes],
            d,
            classes,
        };
        let z: Vec<Vec<f64>> = x.iter().map(|r| probe.standardize(r)).collect();
        let mut grad = vec![0.0; probe.weights.len()];
        for _ in 0..cfg.steps {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for (row, &label) in z.iter().zip(y) {
                let mut p = probe.logits_std(row);
                softmax_row(&mut p);
                p[label] -= 1.0;
                for (j, &xj) in row.iter().chain(std::iter::once(&1.0)).enumerate() {
                    for c in 0..classes {
                        grad[j * classes + c] += xj * p[c] / n as f64;
                    }
                }
            }
            for (w, g) in probe.weights.iter_mut().zip(&grad) {
                *w -= cfg.lr * (g + cfg.l2 * *w);
            }
        }
        Ok(probe)
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    fn logits_std(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.weights[self.d * self.classes..].to_vec();
        for (j, zj) in z.iter().enumerate() {
            for (c, o) in out.iter_mut().enumerate() {
                *o += zj * self.weights[j * self.classes + c];
            }
        }
        out
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let l = self.logits_std(&self.standardize(x));
        (0..l.len()).max_by(|&a, &b| l[a].total_cmp(&l[b])).unwrap_or(0)
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        let hits = x.iter().zip(y).filter(|(r, &l)| self.predict(r) == l).count();
        hits as f64 / x.len().max(1) as f64
    }
}

/// Pooled embeddings with their modality labels, one row per sample and
/// modality.
#[derive(Default)]
pub struct LabeledEmbeddings {
    pub invariant: Vec<Vec<f64>>,
    pub specific: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

pub fn embeddings(model: &SatiModel, store: &ParamStore, bs: &[Batch]) -> Result<LabeledEmbeddings> {
    let mut out = LabeledEmbeddings::default();
    for batch in bs {
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, store, false);
        let fwd = model.forward(&mut tape, &p, batch, &mut Dropout::off())?;
        let pooled = pooled_reps(&mut tape, &fwd)?;
        for m in Modality::ALL {
            let rows = |t: &Tensor| (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
            out.invariant.extend(rows(&pooled.invariant[m]));
            out.specific.extend(rows(&pooled.specific[m]));
            out.labels.extend(std::iter::repeat_n(m.label(), batch.len()));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Test accuracy of a modality probe on specific embeddings.
    pub specific_accuracy: f64,
    /// Test accuracy of a modality probe on invariant embeddings.
    pub invariant_accuracy: f64,
}

/// Fits fresh probes on the training split and scores them on the test
/// split.
pub fn modality_probe(trained: &Trained, samples: &[Sample], cfg: &ProbeConfig) -> Result<ProbeReport> {
    let mc = &trained.model.cfg;
    let train = embeddings(&trained.model, &trained.store, &batches(samples, &trained.split.train, 128, mc)?)?;
    let test = embeddings(&trained.model, &trained.store, &batches(samples, &trained.split.test, 128, mc)?)?;
    let classes = Modality::ALL.len();
    let spec = LinearProbe::fit(&train.specific, &train.labels, classes, cfg)?;
    let inv = LinearProbe::fit(&train.invariant, &train.labels, classes, cfg)?;
    Ok(ProbeReport {
        specific_accuracy: spec.accuracy(&test.specific, &test.labels),
        invariant_accuracy: inv.accuracy(&test.invariant, &test.labels),
    })
}

/// Mean over samples (with at least two frames) of the mean adjacent-frame
/// JSD of the video representation the temporal term targets.
pub fn video_adjacent_jsd(model: &SatiModel, store: &ParamStore, bs: &[Batch]) -> Result<f64> {
    let mut weighted = 0.0;
    let mut count = 0usize;
    for batch in bs {
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, store, false);
        let fwd = model.forward(&mut tape, &p, batch, &mut Dropout::off())?;
        let target = match model.cfg.temporal.target {
            TemporalTarget::Extracted => fwd.extracted.video,
            TemporalTarget::Specific => fwd.reps.specific.video,
        };
        let til = temporal_invariance_loss(&mut tape, target, &fwd.lengths.video, &model.cfg.temporal.mapping)?;
        let eligible = batch.len() - til.skipped;
        weighted += tape.value(til.loss).item() * eligible as f64;
        count += eligible;
    }
    if count == 0 {
        return Err(Error::contract("no video sequence has two or more frames"));
    }
    Ok(weighted / count as f64)
}

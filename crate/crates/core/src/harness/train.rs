//! Mini-batch training with early stopping, evaluation, and checkpoints.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{split_indices, Batch, Sample, Split};
use crate::error::{Error, Result};
use crate::fusion::TotalLossBreakdown;
use crate::harness::metrics::{self, Metrics};
use crate::model::{ModelConfig, SatiModel};
use crate::nn::Dropout;
use crate::numcore::{checkpoint, mix_seed, rng, Adam, AdamConfig, BoundParams, ParamStore, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Epochs without validation-MAE improvement before stopping.
    pub patience: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            patience: 10,
            train_fraction: 0.7,
            val_fraction: 0.15,
            eval_batch_size: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::config("epochs and batch sizes must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("learning rate must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: Metrics,
    /// Mean objective over the evaluated batches.
    pub loss: TotalLossBreakdown,
    pub config: serde_json::Value,
    pub wall_clock_secs: f64,
}

impl MetricsReport {
    /// Equality ignoring wall-clock time.
    pub fn same_numbers(&self, other: &Self) -> bool {
        self.metrics == other.metrics && self.loss == other.loss && self.config == other.config
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: TotalLossBreakdown,
    pub val: Metrics,
}

pub struct Trained {
    pub model: SatiModel,
    pub store: ParamStore,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub split: Split,
    pub wall_clock_secs: f64,
}

pub fn batches<'a>(samples: &'a [Sample], idx: &[usize], size: usize, cfg: &ModelConfig) -> Result<Vec<Batch>> {
    idx.chunks(size)
        .map(|chunk| {
            let refs: Vec<&'a Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            Batch::collate(&refs, &cfg.encoder.max_len)
        })
        .collect()
}

/// Builds an untrained model whose input widths match the dataset.
pub fn init_model(cfg: &TrainConfig) -> Result<(SatiModel, ParamStore)> {
    let mut store = ParamStore::new();
    let model = SatiModel::new(&mut store, &cfg.model, &mut rng(mix_seed(cfg.seed, 1)))?;
    Ok((model, store))
}

fn mean_breakdown(parts: &[(TotalLossBreakdown, usize)]) -> TotalLossBreakdown {
    let n: usize = parts.iter().map(|(_, k)| k).sum();
    let avg = |f: fn(&TotalLossBreakdown) -> f64| {
        metrics::sorted_sum(parts.iter().map(|(b, k)| f(b) * *k as f64)) / n.max(1) as f64
    };
    let first = parts.first().map(|p| p.0).unwrap_or_default();
    TotalLossBreakdown {
        task: avg(|b| b.task),
        con: avg(|b| b.con),
        ti: avg(|b| b.ti),
        dom: avg(|b| b.dom),
        total: avg(|b| b.total),
        ..first
    }
}

pub fn train(cfg: &TrainConfig, samples: &[Sample]) -> Result<Trained> {
    cfg.validate()?;
    crate::data::validate_dataset(samples)?;
    let start = Instant::now();
    let split = split_indices(samples.len(), cfg.train_fraction, cfg.val_fraction, cfg.seed)?;
    if split.train.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let (model, mut store) = init_model(cfg)?;
    let val_batches = batches(samples, &split.val, cfg.eval_batch_size, &cfg.model)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        store.len(),
    );
    let mut dropout_rng = rng(mix_seed(cfg.seed, 2));
    let mut order = split.train.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng(mix_seed(cfg.seed, 1000 + epoch as u64)));
        let mut parts = Vec::new();
        for batch in batches(samples, &order, cfg.batch_size, &cfg.model)? {
            let mut tape = Tape::new();
            let p = BoundParams::bind(&mut tape, &store, true);
            let mut dropout = Dropout {
                p: cfg.model.encoder.dropout,
                rng: Some(&mut dropout_rng),
            };
            let fwd = model.forward(&mut tape, &p, &batch, &mut dropout)?;
            let obj = model.objective(&mut tape, &p, &fwd, &batch.labels)?;
            if let Some(component) = obj.breakdown.non_finite() {
                return Err(Error::Divergence {
                    epoch,
                    component: component.to_string(),
                });
            }
            let mut grads = tape.backward(obj.total)?;
            adam.step(&mut store, &p.collect(&mut grads));
            parts.push((obj.breakdown, batch.len()));
        }
        let val = if val_batches.is_empty() {
            Metrics::default()
        } else {
            evaluate_batches(&model, &store, &val_batches)?.0
        };
        history.push(EpochRecord {
            epoch,
            train_loss: mean_breakdown(&parts),
            val,
        });
        let improved = best.as_ref().is_none_or(|(mae, _, _)| val.mae < *mae);
        if improved {
            best = Some((val.mae, epoch, store.clone()));
        } else if best.as_ref().is_some_and(|(_, e, _)| epoch - e >= cfg.patience) {
            break;
        }
    }
    let (_, best_epoch, best_store) = best.expect("at least one epoch");
    Ok(Trained {
        model,
        store: best_store,
        history,
        best_epoch,
        split,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Predicted scores, labels and the mean objective over `batches`.
pub fn predict(model: &SatiModel, store: &ParamStore, batches: &[Batch]) -> Result<(Vec<f64>, Vec<f64>, TotalLossBreakdown)> {
    let mut pred = Vec::new();
    let mut labels = Vec::new();
    let mut parts = Vec::new();
    for batch in batches {
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, store, false);
        let fwd = model.forward(&mut tape, &p, batch, &mut Dropout::off())?;
        let obj = model.objective(&mut tape, &p, &fwd, &batch.labels)?;
        pred.extend(model.scores(tape.value(fwd.output)));
        labels.extend_from_slice(&batch.labels);
        parts.push((obj.breakdown, batch.len()));
    }
    Ok((pred, labels, mean_breakdown(&parts)))
}

fn evaluate_batches(model: &SatiModel, store: &ParamStore, batches: &[Batch]) -> Result<(Metrics, TotalLossBreakdown)> {
    let (pred, labels, loss) = predict(model, store, batches)?;
    Ok((metrics::compute(&pred, &labels)?, loss))
}

pub fn evaluate(model: &SatiModel, store: &ParamStore, samples: &[Sample], batch_size: usize) -> Result<MetricsReport> {
    let start = Instant::now();
    let idx: Vec<usize> = (0..samples.len()).collect();
    let bs = batches(samples, &idx, batch_size, &model.cfg)?;
    let (metrics, loss) = evaluate_batches(model, store, &bs)?;
    Ok(MetricsReport {
        metrics,
        loss,
        config: serde_json::to_value(&model.cfg)?,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

pub fn subset(samples: &[Sample], idx: &[usize]) -> Vec<Sample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

pub fn save_checkpoint(dir: &Path, cfg: &TrainConfig, trained: &Trained) -> Result<()> {
    let meta = serde_json::json!({
        "train_config": cfg,
        "best_epoch": trained.best_epoch,
    });
    checkpoint::save(dir, &trained.store, meta)
}

/// Rebuilds the model from the configuration stored in a checkpoint.
pub fn load_checkpoint(dir: &Path) -> Result<(SatiModel, ParamStore, TrainConfig)> {
    let (loaded, meta) = checkpoint::load(dir)?;
    let cfg: TrainConfig = serde_json::from_value(meta["train_config"].clone())
        .map_err(|e| Error::Checkpoint(format!("bad configuration in manifest: {e}")))?;
    let (model, mut store) = init_model(&cfg)?;
    if loaded.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            loaded.len(),
            store.len()
        )));
    }
    for (id, name, t) in loaded.iter() {
        if store.name(id) != name {
            return Err(Error::Checkpoint(format!("tensor {name:?} out of order")));
        }
        store.set(id, t.clone())?;
    }
    Ok((model, store, cfg))
}

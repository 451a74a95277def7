//! Ablation table and the noise-robustness protocol.

use serde::{Deserialize, Serialize};

use crate::data::{add_noise, NoiseConfig, Sample};
use crate::error::Result;
use crate::fusion::LossWeights;
use crate::harness::metrics::{sorted_sum, Metrics};
use crate::harness::probe::{modality_probe, video_adjacent_jsd, ProbeConfig, ProbeReport};
use crate::harness::train::{batches, evaluate, subset, train, EpochRecord, MetricsReport, TrainConfig, Trained};
use crate::modality::{Modality, PerModality};
use crate::model::Ablation;

/// Strategy labels, in table order.
pub const STRATEGIES: [(&str, Ablation); 4] = [
    (
        "SATI",
        Ablation {
            no_til: false,
            no_gm: false,
            no_al: false,
        },
    ),
    (
        "w/o TIL",
        Ablation {
            no_til: true,
            no_gm: false,
            no_al: false,
        },
    ),
    (
        "w/o GM",
        Ablation {
            no_til: false,
            no_gm: true,
            no_al: false,
        },
    ),
    (
        "w/o AL",
        Ablation {
            no_til: false,
            no_gm: false,
            no_al: true,
        },
    ),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub probe: ProbeReport,
    /// Mean adjacent-frame JSD of the video representation on the test split.
    pub video_jsd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub test: MetricsReport,
    pub analysis: Analysis,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub train_secs: f64,
}

pub fn analyze(trained: &Trained, samples: &[Sample]) -> Result<Analysis> {
    let mc = &trained.model.cfg;
    let test = batches(samples, &trained.split.test, 128, mc)?;
    Ok(Analysis {
        probe: modality_probe(trained, samples, &ProbeConfig::default())?,
        video_jsd: video_adjacent_jsd(&trained.model, &trained.store, &test)?,
    })
}

/// Trains, then evaluates and analyzes on the held-out test split.
pub fn run(cfg: &TrainConfig, samples: &[Sample]) -> Result<(Trained, RunReport)> {
    let trained = train(cfg, samples)?;
    let test = evaluate(&trained.model, &trained.store, &subset(samples, &trained.split.test), cfg.eval_batch_size)?;
    let analysis = analyze(&trained, samples)?;
    let report = RunReport {
        test,
        analysis,
        history: trained.history.clone(),
        best_epoch: trained.best_epoch,
        train_secs: trained.wall_clock_secs,
    };
    Ok((trained, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: String,
    pub ablation: Ablation,
    pub effective_weights: LossWeights,
    pub report: RunReport,
}

/// Runs every strategy with identical seeds and data.
pub fn ablate(cfg: &TrainConfig, samples: &[Sample]) -> Result<Vec<AblationRow>> {
    ablate_with(cfg, samples, |_, _| {})
}

/// [`ablate`] with a callback invoked after each row.
pub fn ablate_with(
    cfg: &TrainConfig,
    samples: &[Sample],
    mut on_row: impl FnMut(&AblationRow, &Trained),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(STRATEGIES.len());
    for (label, ablation) in STRATEGIES {
        let mut c = cfg.clone();
        c.model.ablation = ablation;
        let (trained, report) = run(&c, samples)?;
        let row = AblationRow {
            strategy: label.to_string(),
            ablation,
            effective_weights: c.model.effective_weights(),
            report,
        };
        on_row(&row, &trained);
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricDeltas {
    pub acc2_nonneg: f64,
    pub acc2_pos: f64,
    pub f1_nonneg: f64,
    pub f1_pos: f64,
    pub acc7: f64,
    pub mae: f64,
    pub corr: f64,
}

impl MetricDeltas {
    /// `noisy − clean` per metric.
    pub fn between(clean: &Metrics, noisy: &Metrics) -> Self {
        Self {
            acc2_nonneg: noisy.acc2_nonneg - clean.acc2_nonneg,
            acc2_pos: noisy.acc2_pos - clean.acc2_pos,
            f1_nonneg: noisy.f1_nonneg - clean.f1_nonneg,
            f1_pos: noisy.f1_pos - clean.f1_pos,
            acc7: noisy.acc7 - clean.acc7,
            mae: noisy.mae - clean.mae,
            corr: noisy.corr - clean.corr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub noise: NoiseConfig,
    pub clean: MetricsReport,
    pub noisy: MetricsReport,
    pub delta: MetricDeltas,
    /// Sample variance of the injected perturbation over the test split.
    pub empirical_variance: f64,
    pub perturbed_features: usize,
}

/// Sample variance of `noisy − clean` over every feature of the selected
/// modalities.
pub fn injected_variance(clean: &[Sample], noisy: &[Sample], modalities: &PerModality<bool>) -> (f64, usize) {
    let mut diffs = Vec::new();
    for (c, n) in clean.iter().zip(noisy) {
        for m in Modality::ALL.into_iter().filter(|&m| modalities[m]) {
            for (fc, fnz) in c.frames(m).iter().zip(n.frames(m)) {
                diffs.extend(fc.iter().zip(fnz).map(|(a, b)| b - a));
            }
        }
    }
    let n = diffs.len();
    if n < 2 {
        return (0.0, n);
    }
    let mean = sorted_sum(diffs.iter().copied()) / n as f64;
    let ss = sorted_sum(diffs.iter().map(|d| (d - mean).powi(2)));
    (ss / (n - 1) as f64, n)
}

/// Trains once on clean data and evaluates the test split clean and noisy.
pub fn noise_experiment(cfg: &TrainConfig, samples: &[Sample], noise: &NoiseConfig) -> Result<NoiseReport> {
    let trained = train(cfg, samples)?;
    noise_on_trained(&trained, samples, noise, cfg.eval_batch_size)
}

pub fn noise_on_trained(trained: &Trained, samples: &[Sample], noise: &NoiseConfig, batch_size: usize) -> Result<NoiseReport> {
    let clean_test = subset(samples, &trained.split.test);
    let noisy_test = add_noise(&clean_test, noise)?;
    let clean = evaluate(&trained.model, &trained.store, &clean_test, batch_size)?;
    let noisy = evaluate(&trained.model, &trained.store, &noisy_test, batch_size)?;
    let (empirical_variance, perturbed_features) = injected_variance(&clean_test, &noisy_test, &noise.modalities);
    Ok(NoiseReport {
        noise: noise.clone(),
        delta: MetricDeltas::between(&clean.metrics, &noisy.metrics),
        clean,
        noisy,
        empirical_variance,
        perturbed_features,
    })
}

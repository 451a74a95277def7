//! The assembled model: extraction, disentanglement, adversary, temporal
//! constraint, fusion and prediction, plus the combined objective.

use serde::{Deserialize, Serialize};

use crate::adversary::{domain_loss, AdversaryConfig, Discriminator, DomainLoss};
use crate::data::Batch;
use crate::disentangle::{consistency_loss, CmdConfig};
use crate::encoders::{DisentangledReps, EncoderConfig, Encoders};
use crate::error::{Error, Result};
use crate::fusion::{
    cross_entropy_loss, mse_loss, total_loss, Fusion, FusionConfig, FusionInputs, FusionOutput, LossTerms,
    LossWeights, PredictionHead, TotalLossBreakdown,
};
use crate::modality::{Modality, PerModality};
use crate::nn::{masked_mean_pool, valid_rows, Dropout};
use crate::numcore::{BoundParams, ParamStore, Rng, Tape, Tensor, Var};
use crate::temporal::{temporal_invariance_loss, TemporalConfig, TemporalTarget};

/// Number of sentiment classes in classification mode (integer scores
/// −3..=3).
pub const N_SENTIMENT_CLASSES: usize = 7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Regression,
    Classification,
}

/// Class index of a sentiment score.
pub fn sentiment_class(label: f64) -> usize {
    (label.clamp(-3.0, 3.0).round() + 3.0) as usize
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Drop the temporal-invariance term.
    pub no_til: bool,
    /// Replace gated fusion with plain concatenation.
    pub no_gm: bool,
    /// Drop the adversarial term; the discriminator never sees a gradient.
    pub no_al: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub cmd: CmdConfig,
    pub adversary: AdversaryConfig,
    pub temporal: TemporalConfig,
    pub fusion: FusionConfig,
    pub weights: LossWeights,
    pub task: Task,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.cmd.validate()?;
        self.adversary.validate()?;
        self.fusion.validate()?;
        let w = &self.weights;
        if [w.alpha_w, w.beta, w.gamma].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::config("loss weights must be >= 0"));
        }
        Ok(())
    }

    /// Loss weights after the ablation flags are applied.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.ablation.no_til {
            w.beta = 0.0;
        }
        if self.ablation.no_al {
            w.gamma = 0.0;
        }
        w
    }

    pub fn output_width(&self) -> usize {
        match self.task {
            Task::Regression => 1,
            Task::Classification => N_SENTIMENT_CLASSES,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SatiModel {
    pub cfg: ModelConfig,
    pub encoders: Encoders,
    pub discriminator: Discriminator,
    pub fusion: Fusion,
    pub head: PredictionHead,
}

pub struct Forward {
    pub extracted: PerModality<Var>,
    pub reps: DisentangledReps,
    pub fusion: FusionOutput,
    /// `[B, 1]` scores or `[B, 7]` logits.
    pub output: Var,
    pub lengths: PerModality<Vec<usize>>,
}

pub struct Objective {
    pub total: Var,
    pub breakdown: TotalLossBreakdown,
    pub domain: Option<DomainLoss>,
    /// Samples skipped by the temporal term.
    pub temporal_skipped: usize,
}

impl SatiModel {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.encoder.d_model;
        let encoders = Encoders::new(store, &cfg.encoder, rng)?;
        let discriminator = Discriminator::new(store, d, &cfg.adversary, rng)?;
        let fusion = Fusion::new(store, d, &cfg.fusion, rng)?;
        let hidden = if cfg.fusion.head_hidden == 0 { d } else { cfg.fusion.head_hidden };
        let head = PredictionHead::new(store, "head", 2 * d, hidden, cfg.output_width(), rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            encoders,
            discriminator,
            fusion,
            head,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, batch: &Batch, dropout: &mut Dropout) -> Result<Forward> {
        let lengths = batch.lengths();
        let inputs = PerModality::from_fn(|m| tape.constant(batch.inputs[m].features.clone()));
        let extracted = self.encoders.extract(tape, p, &inputs, &lengths, dropout)?;
        let reps = self.encoders.disentangle(tape, p, &extracted)?;
        let guides = if self.cfg.fusion.fbp_on_specific {
            &reps.specific
        } else {
            &reps.invariant
        };
        let fusion_inputs = FusionInputs {
            specific_t: reps.specific.text,
            specific_a: reps.specific.audio,
            specific_v: reps.specific.video,
            guide_t: guides.text,
            guide_a: guides.audio,
            guide_v: guides.video,
            lengths: &lengths,
        };
        let fusion = self.fusion.forward(tape, p, &fusion_inputs, !self.cfg.ablation.no_gm)?;
        let output = self.head.forward(tape, p, fusion.fused, &lengths.text)?;
        Ok(Forward {
            extracted,
            reps,
            fusion,
            output,
            lengths,
        })
    }

    fn valid_frames(tape: &mut Tape, x: Var, lengths: &[usize]) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let flat = tape.reshape(x, [s[0] * s[1], s[2]])?;
        tape.select_rows(flat, valid_rows(lengths, s[1]))
    }

    pub fn objective(&self, tape: &mut Tape, p: &BoundParams, fwd: &Forward, labels: &[f64]) -> Result<Objective> {
        let task = match self.cfg.task {
            Task::Regression => mse_loss(tape, fwd.output, labels)?,
            Task::Classification => {
                let classes: Vec<usize> = labels.iter().map(|&y| sentiment_class(y)).collect();
                cross_entropy_loss(tape, fwd.output, &classes)?
            }
        };
        let frames = PerModality::try_from_fn(|m| Self::valid_frames(tape, fwd.reps.invariant[m], &fwd.lengths[m]))?;
        let con = consistency_loss(tape, frames.audio, frames.video, frames.text, &self.cfg.cmd)?;
        let target = match self.cfg.temporal.target {
            TemporalTarget::Extracted => fwd.extracted.video,
            TemporalTarget::Specific => fwd.reps.specific.video,
        };
        let til = temporal_invariance_loss(tape, target, &fwd.lengths.video, &self.cfg.temporal.mapping)?;
        let domain = if self.cfg.ablation.no_al {
            None
        } else {
            Some(domain_loss(
                tape,
                p,
                &self.discriminator,
                &fwd.reps,
                &fwd.lengths,
                &self.cfg.adversary,
            )?)
        };
        let terms = LossTerms {
            task,
            con,
            ti: til.loss,
            dom: domain.as_ref().map(|d| d.total),
        };
        let (total, breakdown) = total_loss(tape, &terms, &self.cfg.effective_weights())?;
        Ok(Objective {
            total,
            breakdown,
            domain,
            temporal_skipped: til.skipped,
        })
    }

    /// Sentiment scores from the model output: the regression value, or the
    /// arg-max class mapped back to −3..=3.
    pub fn scores(&self, output: &Tensor) -> Vec<f64> {
        match self.cfg.task {
            Task::Regression => output.data().to_vec(),
            Task::Classification => (0..output.rows())
                .map(|r| {
                    let row = output.row(r);
                    let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(3);
                    best as f64 - 3.0
                })
                .collect(),
        }
    }
}

/// Time-pooled `[B, d]` embeddings of each subspace.
pub struct PooledReps {
    pub invariant: PerModality<Tensor>,
    pub specific: PerModality<Tensor>,
}

pub fn pooled_reps(tape: &mut Tape, fwd: &Forward) -> Result<PooledReps> {
    let mut pool = |x: Var, m: Modality| -> Result<Tensor> {
        let v = masked_mean_pool(tape, x, &fwd.lengths[m])?;
        Ok(tape.value(v).clone())
    };
    let invariant = PerModality::try_from_fn(|m| pool(fwd.reps.invariant[m], m))?;
    let specific = PerModality::try_from_fn(|m| pool(fwd.reps.specific[m], m))?;
    Ok(PooledReps { invariant, specific })
}

/// Rows of `x: [B, L, d]` restricted to the valid steps of sample `b`.
pub fn sample_frames(x: &Tensor, b: usize, len: usize) -> Tensor {
    let (l, d) = (x.shape()[1], x.shape()[2]);
    let start = b * l * d;
    Tensor::new([len, d], x.data()[start..start + len * d].to_vec()).expect("in-bounds slice")
}

//! Modality discriminator on the unit hypersphere.
//!
//! Representations are mean-pooled over time, projected, and L2-normalized;
//! the class weights are renormalized to unit columns on every forward pass,
//! so logits are pure cosines. The objective is the additive angular margin
//! loss. Invariant representations reach the discriminator through a
//! gradient reversal layer: the discriminator learns to tell modalities
//! apart while the shared encoder learns to make that impossible.

use serde::{Deserialize, Serialize};

use crate::encoders::DisentangledReps;
use crate::error::{Error, Result};
use crate::modality::{Modality, PerModality};
use crate::nn::{masked_mean_pool, Linear};
use crate::numcore::{BoundParams, ParamId, ParamStore, Rng, Tape, Tensor, Var};

/// Number of modality classes.
pub const N_CLASSES: usize = 3;

const NORM_FLOOR: f64 = 1e-12;

/// How a representation reaches the discriminator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientPath {
    /// Gradient reversal with strength `lambda`.
    Reversed,
    /// Plain connection (no reversal layer).
    Identity,
    /// Forward value only; no gradient flows back.
    Detached,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdversaryConfig {
    /// Width of the projection before the cosine classifier.
    pub d_hidden: usize,
    /// Angular scale `α`.
    pub scale: f64,
    /// Additive angular margin `τ` in radians.
    pub margin: f64,
    /// Gradient reversal strength `λ`.
    pub lambda: f64,
    /// Path of invariant representations into the discriminator.
    pub invariant_path: GradientPath,
    /// Also reverse gradients on the specific path.
    pub grl_on_specific: bool,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        Self {
            d_hidden: 32,
            scale: 30.0,
            margin: 0.35,
            lambda: 1.0,
            invariant_path: GradientPath::Reversed,
            grl_on_specific: false,
        }
    }
}

impl AdversaryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_hidden == 0 {
            return Err(Error::config("discriminator width must be >= 1"));
        }
        if !(self.scale > 0.0) {
            return Err(Error::config("angular scale must be > 0"));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::config("angular margin must lie in [0, pi/2)"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("gradient reversal strength must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub proj: Linear,
    /// Class weights `[d_hidden, M]`.
    pub weights: ParamId,
}

pub const DISCRIMINATOR_PREFIX: &str = "disc.";

impl Discriminator {
    pub fn new(store: &mut ParamStore, d_model: usize, cfg: &AdversaryConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let proj = Linear::new(store, "disc.proj", d_model, cfg.d_hidden, true, rng)?;
        let weights = store.xavier("disc.classes", cfg.d_hidden, N_CLASSES, rng)?;
        Ok(Self { proj, weights })
    }

    /// `ĥ`: mean-pool `h: [B, L, d]` over valid steps, project, and normalize
    /// each row to unit length. Returns `[B, d_hidden]`.
    pub fn embed(&self, tape: &mut Tape, p: &BoundParams, h: Var, lengths: &[usize]) -> Result<Var> {
        let pooled = masked_mean_pool(tape, h, lengths)?;
        let z = self.proj.forward(tape, p, pooled)?;
        Ok(tape.l2_normalize_last(z, NORM_FLOOR))
    }

    /// Cosines between embeddings and the unit class columns, `[B, M]`.
    pub fn cosines(&self, tape: &mut Tape, p: &BoundParams, embedded: Var) -> Result<Var> {
        cosine_logits(tape, embedded, p.var(self.weights))
    }
}

/// `cos θ[b, m] = ĥ_b · W_m / ‖W_m‖` for unit rows `ĥ: [B, d]` and
/// `w: [d, M]`.
pub fn cosine_logits(tape: &mut Tape, embedded: Var, w: Var) -> Result<Var> {
    let wt = tape.transpose(w)?;
    let wt = tape.l2_normalize_last(wt, NORM_FLOOR);
    tape.matmul_t(embedded, wt)
}

/// Additive angular margin loss on precomputed cosines `[B, M]`, averaged
/// over the batch.
pub fn aam_loss(tape: &mut Tape, cosines: Var, labels: &[usize], scale: f64, margin: f64) -> Result<Var> {
    let s = tape.shape(cosines).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("aam_loss", &s, &[labels.len()]));
    }
    let classes = s[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::contract(format!(
            "modality label {bad} outside 0..{classes}"
        )));
    }
    let mut onehot = vec![0.0; labels.len() * classes];
    for (b, &y) in labels.iter().enumerate() {
        onehot[b * classes + y] = 1.0;
    }
    let others: Vec<f64> = onehot.iter().map(|v| 1.0 - v).collect();
    let target = tape.constant(Tensor::new(s.clone(), onehot)?);
    let rest = tape.constant(Tensor::new(s, others)?);

    let shifted = tape.margin_cos(cosines, margin);
    let on_target = tape.mul(shifted, target)?;
    let off_target = tape.mul(cosines, rest)?;
    let logits = tape.add(on_target, off_target)?;
    let logits = tape.scale(logits, scale);
    let logp = tape.log_softmax(logits);
    let picked = tape.mul(logp, target)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / labels.len() as f64))
}

/// [`aam_loss`] from unit embeddings and raw class weights as tensors.
pub fn aam_loss_value(embedded: &Tensor, labels: &[usize], weights: &Tensor, scale: f64, margin: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let e = tape.constant(embedded.clone());
    let w = tape.constant(weights.clone());
    let cos = cosine_logits(&mut tape, e, w)?;
    let loss = aam_loss(&mut tape, cos, labels, scale, margin)?;
    Ok(tape.value(loss).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subspace {
    Invariant,
    Specific,
}

pub struct DomainLoss {
    pub total: Var,
    /// The six batch-averaged margin-loss terms.
    pub terms: Vec<(Modality, Subspace, Var)>,
    /// Discriminator cosines per term, `[B, M]`.
    pub cosines: Vec<(Modality, Subspace, Var)>,
}

fn route(tape: &mut Tape, x: Var, path: GradientPath, lambda: f64) -> Var {
    match path {
        GradientPath::Reversed => tape.grl(x, lambda),
        GradientPath::Identity => x,
        GradientPath::Detached => tape.detach(x),
    }
}

/// Sum over modalities of the margin loss on invariant and specific
/// representations, each term averaged over the batch.
pub fn domain_loss(
    tape: &mut Tape,
    p: &BoundParams,
    disc: &Discriminator,
    reps: &DisentangledReps,
    lengths: &PerModality<Vec<usize>>,
    cfg: &AdversaryConfig,
) -> Result<DomainLoss> {
    let batch = lengths.audio.len();
    let specific_path = if cfg.grl_on_specific {
        GradientPath::Reversed
    } else {
        GradientPath::Identity
    };
    let mut terms = Vec::with_capacity(2 * N_CLASSES);
    let mut cosines = Vec::with_capacity(2 * N_CLASSES);
    let mut total: Option<Var> = None;
    for m in Modality::ALL {
        let labels = vec![m.label(); batch];
        for (subspace, rep, path) in [
            (Subspace::Invariant, reps.invariant[m], cfg.invariant_path),
            (Subspace::Specific, reps.specific[m], specific_path),
        ] {
            let h = route(tape, rep, path, cfg.lambda);
            let e = disc.embed(tape, p, h, &lengths[m])?;
            let cos = disc.cosines(tape, p, e)?;
            let term = aam_loss(tape, cos, &labels, cfg.scale, cfg.margin)?;
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
            terms.push((m, subspace, term));
            cosines.push((m, subspace, cos));
        }
    }
    Ok(DomainLoss {
        total: total.expect("three modalities"),
        terms,
        cosines,
    })
}

/// Predicted class per row of a `[B, M]` cosine matrix.
pub fn predicted_classes(cosines: &Tensor) -> Vec<usize> {
    (0..cosines.rows())
        .map(|r| {
            let row = cosines.row(r);
            (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap_or(0)
        })
        .collect()
}

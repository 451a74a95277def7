//! Temporal-invariance regularization: adjacent frames of the video stream
//! are turned into categorical distributions and pulled together under the
//! Jensen–Shannon divergence.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// How one frame representation becomes a distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum FrameMapping {
    /// Softmax over the feature axis.
    Softmax,
    /// Per-group diagonal Gaussian (mean and variance of each contiguous
    /// feature group) evaluated on a fixed grid and normalized per group; the
    /// groups are mixed with equal weight.
    GaussianProxy {
        groups: usize,
        grid_points: usize,
        grid_min: f64,
        grid_max: f64,
    },
}

/// Which representation the constraint is applied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalTarget {
    /// `H_v`, the extracted video sequence.
    Extracted,
    /// `S_v`, the video-specific representation.
    Specific,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemporalConfig {
    pub mapping: FrameMapping,
    pub target: TemporalTarget,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            mapping: FrameMapping::Softmax,
            target: TemporalTarget::Extracted,
        }
    }
}

const GAUSS_VAR_EPS: f64 = 1e-6;

/// Maps each last-axis row of `r` to a probability vector.
pub fn to_distribution(tape: &mut Tape, r: Var, mapping: &FrameMapping) -> Result<Var> {
    let shape = tape.shape(r).to_vec();
    let d = *shape.last().ok_or_else(|| Error::contract("frame needs a feature axis"))?;
    if d < 2 {
        return Err(Error::contract("frame distributions need d >= 2"));
    }
    match mapping {
        FrameMapping::Softmax => tape.softmax(r, shape.len() - 1),
        &FrameMapping::GaussianProxy {
            groups,
            grid_points,
            grid_min,
            grid_max,
        } => {
            if groups == 0 || d % groups != 0 || grid_points < 2 || !(grid_max > grid_min) {
                return Err(Error::config(format!(
                    "gaussian proxy: {groups} groups, {grid_points} grid points over [{grid_min}, {grid_max}] for width {d}"
                )));
            }
            let rows = tape.value(r).rows();
            let step = (grid_max - grid_min) / (grid_points - 1) as f64;
            let grid = Arc::new((0..grid_points).map(|j| grid_min + step * j as f64).collect());
            let grouped = tape.reshape(r, [rows, groups, d / groups])?;
            let mu = tape.mean_axis(grouped, 2)?;
            let var = tape.var_axis(grouped, 2)?;
            let logits = tape.gaussian_logits(mu, var, grid, GAUSS_VAR_EPS)?;
            let per_group = tape.softmax(logits, 2)?;
            let mut out_shape = shape[..shape.len() - 1].to_vec();
            out_shape.push(groups * grid_points);
            let flat = tape.reshape(per_group, out_shape)?;
            Ok(tape.scale(flat, 1.0 / groups as f64))
        }
    }
}

/// Row-wise Jensen–Shannon divergence (natural log) between `p` and `q`,
/// both `[N, d]`. Returns `[N]`.
pub fn jsd_rows(tape: &mut Tape, p: Var, q: Var) -> Result<Var> {
    if tape.shape(p) != tape.shape(q) {
        return Err(Error::shape("jsd", tape.shape(p), tape.shape(q)));
    }
    let s = tape.add(p, q)?;
    let m = tape.scale(s, 0.5);
    let log_m = tape.log(m);
    let log_p = tape.log(p);
    let log_q = tape.log(q);
    let dp = tape.sub(log_p, log_m)?;
    let dq = tape.sub(log_q, log_m)?;
    let tp = tape.mul(p, dp)?;
    let tq = tape.mul(q, dq)?;
    let both = tape.add(tp, tq)?;
    let last = tape.shape(both).len() - 1;
    let summed = tape.sum_axis(both, last)?;
    Ok(tape.scale(summed, 0.5))
}

/// JSD of two probability vectors.
pub fn jsd(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() || p.rank() != 1 {
        return Err(Error::shape("jsd", p.shape(), q.shape()));
    }
    let mut tape = Tape::new();
    let pv = tape.constant(p.reshape([1, p.len()])?);
    let qv = tape.constant(q.reshape([1, q.len()])?);
    let out = jsd_rows(&mut tape, pv, qv)?;
    Ok(tape.value(out).item())
}

pub struct TemporalLoss {
    pub loss: Var,
    /// Samples with fewer than two valid frames; they contribute nothing.
    pub skipped: usize,
}

/// Mean over samples of the mean adjacent-frame JSD of `r: [B, L, d]`,
/// restricted to each sample's valid frames.
pub fn temporal_invariance_loss(
    tape: &mut Tape,
    r: Var,
    lengths: &[usize],
    mapping: &FrameMapping,
) -> Result<TemporalLoss> {
    let shape = tape.shape(r).to_vec();
    if shape.len() != 3 || shape[0] != lengths.len() {
        return Err(Error::shape("temporal_invariance_loss", &shape, &[lengths.len()]));
    }
    let max_len = shape[1];
    let eligible: Vec<(usize, usize)> = lengths
        .iter()
        .enumerate()
        .filter(|(_, &len)| len >= 2)
        .map(|(b, &len)| (b, len.min(max_len)))
        .collect();
    let skipped = lengths.len() - eligible.len();
    if eligible.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(TemporalLoss {
            loss: zero,
            skipped,
        });
    }

    let dist = to_distribution(tape, r, mapping)?;
    let mut first = Vec::new();
    let mut second = Vec::new();
    let mut weights = Vec::new();
    let per_sample = 1.0 / eligible.len() as f64;
    for &(b, len) in &eligible {
        for t in 0..len - 1 {
            first.push(b * max_len + t);
            second.push(b * max_len + t + 1);
            weights.push(per_sample / (len - 1) as f64);
        }
    }
    let p = tape.select_rows(dist, Arc::new(first))?;
    let q = tape.select_rows(dist, Arc::new(second))?;
    let j = jsd_rows(tape, p, q)?;
    let w = tape.constant(Tensor::vector(weights));
    let weighted = tape.mul(j, w)?;
    Ok(TemporalLoss {
        loss: tape.sum(weighted),
        skipped,
    })
}

/// Single-sequence form on a plain `[n, d]` tensor. Returns `(loss, skipped)`
/// where `skipped` flags a sequence too short to constrain.
pub fn temporal_invariance_value(r: &Tensor, valid_len: usize, mapping: &FrameMapping) -> Result<(f64, bool)> {
    if r.rank() != 2 {
        return Err(Error::shape("temporal_invariance_loss", r.shape(), &[0, 0]));
    }
    let mut tape = Tape::new();
    let x = tape.constant(r.reshape([1, r.shape()[0], r.shape()[1]])?);
    let out = temporal_invariance_loss(&mut tape, x, &[valid_len], mapping)?;
    Ok((tape.value(out.loss).item(), out.skipped > 0))
}

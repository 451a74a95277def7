//! Text-driven fusion: cross-attention from text onto the audio and video
//! specific streams, FBP gate signals from the invariant streams, gated
//! concatenation, the prediction head, and the weighted training objective.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::nn::{key_mask, masked_mean_pool, Linear, MASKED_LOGIT};
use crate::numcore::{BoundParams, ParamId, ParamStore, Rng, Tape, Tensor, Var};

const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// FBP output width after pooling.
    pub d_fbp: usize,
    /// Sum-pool window `k`.
    pub pool_window: usize,
    /// Squash gate signals through a sigmoid.
    pub gate_sigmoid: bool,
    /// Feed FBP the specific instead of the invariant representations.
    pub fbp_on_specific: bool,
    /// Hidden width of the prediction MLP; `0` means `d_model`.
    pub head_hidden: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_fbp: 16,
            pool_window: 4,
            gate_sigmoid: true,
            fbp_on_specific: false,
            head_hidden: 0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_fbp == 0 || self.pool_window == 0 {
            return Err(Error::config("FBP width and pool window must be >= 1"));
        }
        Ok(())
    }
}

/// `softmax(S_t S_iᵀ / √d) S_i` with padded key steps of `S_i` masked.
/// `s_t: [B, L_t, d]`, `s_i: [B, L_i, d]`. Returns `F_ti` and the attention
/// weights `[B, L_t, L_i]`.
pub fn cross_attention(tape: &mut Tape, s_t: Var, s_i: Var, key_lengths: &[usize]) -> Result<(Var, Var)> {
    let (st, si) = (tape.shape(s_t).to_vec(), tape.shape(s_i).to_vec());
    if st.len() != 3 || si.len() != 3 || st[0] != si[0] || st[2] != si[2] || key_lengths.len() != st[0] {
        return Err(Error::shape("cross_attention", &st, &si));
    }
    let scores = tape.matmul_t(s_t, s_i)?;
    let scores = tape.scale(scores, 1.0 / (st[2] as f64).sqrt());
    let scores = tape.masked_fill(scores, key_mask(key_lengths, 1, st[1], si[1]), MASKED_LOGIT)?;
    let weights = tape.softmax(scores, 2)?;
    Ok((tape.matmul(weights, s_i)?, weights))
}

/// `[B, L_t, L_i]` map taking `I_i` onto the text time axis: the identity on
/// valid steps when the two valid lengths agree, otherwise every row is the
/// mean over the valid steps of `I_i`.
pub fn alignment(len_t: &[usize], len_i: &[usize], max_t: usize, max_i: usize) -> Result<Tensor> {
    if len_t.len() != len_i.len() {
        return Err(Error::shape("alignment", &[len_t.len()], &[len_i.len()]));
    }
    let mut data = vec![0.0; len_t.len() * max_t * max_i];
    for (b, (&lt, &li)) in len_t.iter().zip(len_i).enumerate() {
        let li = li.min(max_i);
        let block = &mut data[b * max_t * max_i..(b + 1) * max_t * max_i];
        for t in 0..max_t {
            let row = &mut block[t * max_i..(t + 1) * max_i];
            if lt == li && t < li {
                row[t] = 1.0;
            } else {
                row[..li].fill(1.0 / li as f64);
            }
        }
    }
    Tensor::new([len_t.len(), max_t, max_i], data)
}

pub struct FbpTrace {
    pub f_mul: Var,
    pub f_sp: Var,
    pub f_norm: Var,
    pub gate: Var,
}

/// FBP gate: `F_mul = (I_t W_Q) ⊙ (A I_i W_K)`, sum-pooled in windows of `k`
/// along the feature axis, L2-normalized per row, then `F_norm W_norm`
/// (optionally through a sigmoid).
#[allow(clippy::too_many_arguments)]
pub fn fbp_gate(
    tape: &mut Tape,
    i_t: Var,
    i_i: Var,
    align: Var,
    w_q: Var,
    w_k: Var,
    w_norm: Var,
    k: usize,
    sigmoid: bool,
) -> Result<FbpTrace> {
    let aligned = tape.matmul(align, i_i)?;
    let q = tape.matmul(i_t, w_q)?;
    let kk = tape.matmul(aligned, w_k)?;
    let f_mul = tape.mul(q, kk)?;
    let f_sp = tape.sum_pool_last(f_mul, k)?;
    let f_norm = tape.l2_normalize_last(f_sp, NORM_FLOOR);
    let g = tape.matmul(f_norm, w_norm)?;
    let gate = if sigmoid { tape.sigmoid(g) } else { g };
    Ok(FbpTrace {
        f_mul,
        f_sp,
        f_norm,
        gate,
    })
}

/// Per-stream FBP weights.
#[derive(Clone, Debug)]
pub struct FbpParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_norm: ParamId,
}

impl FbpParams {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, cfg: &FusionConfig, rng: &mut Rng) -> Result<Self> {
        let wide = cfg.d_fbp * cfg.pool_window;
        Ok(Self {
            w_q: store.xavier(format!("{name}.w_q"), d_model, wide, rng)?,
            w_k: store.xavier(format!("{name}.w_k"), d_model, wide, rng)?,
            w_norm: store.xavier(format!("{name}.w_norm"), cfg.d_fbp, d_model, rng)?,
        })
    }
}

/// Concatenation of `gate_a ⊙ F_ta` and `gate_v ⊙ F_tv` along features.
pub fn fuse(tape: &mut Tape, gate_a: Var, gate_v: Var, f_ta: Var, f_tv: Var) -> Result<Var> {
    let a = tape.mul(gate_a, f_ta)?;
    let v = tape.mul(gate_v, f_tv)?;
    let axis = tape.shape(a).len() - 1;
    tape.concat(&[a, v], axis)
}

/// Ungated fusion.
pub fn concat_streams(tape: &mut Tape, f_ta: Var, f_tv: Var) -> Result<Var> {
    if tape.shape(f_ta) != tape.shape(f_tv) {
        return Err(Error::shape("fuse", tape.shape(f_ta), tape.shape(f_tv)));
    }
    let axis = tape.shape(f_ta).len() - 1;
    tape.concat(&[f_ta, f_tv], axis)
}

/// Masked mean-pool over time, then `linear → gelu → linear`.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub l1: Linear,
    pub l2: Linear,
}

impl PredictionHead {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}.l1"), d_in, hidden, true, rng)?,
            l2: Linear::new(store, &format!("{name}.l2"), hidden, d_out, true, rng)?,
        })
    }

    /// `x: [B, L, d_in]` → `[B, d_out]`.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var, lengths: &[usize]) -> Result<Var> {
        let pooled = masked_mean_pool(tape, x, lengths)?;
        let h = self.l1.forward(tape, p, pooled)?;
        let h = tape.gelu(h);
        self.l2.forward(tape, p, h)
    }
}

pub struct FusionOutput {
    pub f_ta: Var,
    pub f_tv: Var,
    /// `None` when gating is disabled.
    pub gate_a: Option<Var>,
    pub gate_v: Option<Var>,
    pub fused: Var,
    pub attention_a: Var,
    pub attention_v: Var,
}

/// Inputs to [`Fusion::forward`], all `[B, L_m, d]`.
pub struct FusionInputs<'a> {
    pub specific_t: Var,
    pub specific_a: Var,
    pub specific_v: Var,
    pub guide_t: Var,
    pub guide_a: Var,
    pub guide_v: Var,
    pub lengths: &'a crate::modality::PerModality<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub fbp_a: FbpParams,
    pub fbp_v: FbpParams,
    pub cfg: FusionConfig,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, d_model: usize, cfg: &FusionConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            fbp_a: FbpParams::new(store, "fusion.fbp.a", d_model, cfg, rng)?,
            fbp_v: FbpParams::new(store, "fusion.fbp.v", d_model, cfg, rng)?,
            cfg: cfg.clone(),
        })
    }

    fn gate(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        params: &FbpParams,
        guide_t: Var,
        guide_i: Var,
        len_t: &[usize],
        len_i: &[usize],
    ) -> Result<Var> {
        let (max_t, max_i) = (tape.shape(guide_t)[1], tape.shape(guide_i)[1]);
        let align = tape.constant(alignment(len_t, len_i, max_t, max_i)?);
        let trace = fbp_gate(
            tape,
            guide_t,
            guide_i,
            align,
            p.var(params.w_q),
            p.var(params.w_k),
            p.var(params.w_norm),
            self.cfg.pool_window,
            self.cfg.gate_sigmoid,
        )?;
        Ok(trace.gate)
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: &FusionInputs, gated: bool) -> Result<FusionOutput> {
        let lengths = x.lengths;
        let (f_ta, attention_a) = cross_attention(tape, x.specific_t, x.specific_a, &lengths[Modality::Audio])?;
        let (f_tv, attention_v) = cross_attention(tape, x.specific_t, x.specific_v, &lengths[Modality::Video])?;
        if !gated {
            let fused = concat_streams(tape, f_ta, f_tv)?;
            return Ok(FusionOutput {
                f_ta,
                f_tv,
                gate_a: None,
                gate_v: None,
                fused,
                attention_a,
                attention_v,
            });
        }
        let len_t = &lengths[Modality::Text];
        let gate_a = self.gate(tape, p, &self.fbp_a, x.guide_t, x.guide_a, len_t, &lengths[Modality::Audio])?;
        let gate_v = self.gate(tape, p, &self.fbp_v, x.guide_t, x.guide_v, len_t, &lengths[Modality::Video])?;
        let fused = fuse(tape, gate_a, gate_v, f_ta, f_tv)?;
        Ok(FusionOutput {
            f_ta,
            f_tv,
            gate_a: Some(gate_a),
            gate_v: Some(gate_v),
            fused,
            attention_a,
            attention_v,
        })
    }
}

/// Trade-off weights of the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha_w: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_w: 0.3,
            beta: 0.1,
            gamma: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TotalLossBreakdown {
    pub task: f64,
    pub con: f64,
    pub ti: f64,
    pub dom: f64,
    pub alpha_w: f64,
    pub beta: f64,
    pub gamma: f64,
    pub total: f64,
}

impl TotalLossBreakdown {
    /// Name of the first non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("task", self.task),
            ("consistency", self.con),
            ("temporal", self.ti),
            ("domain", self.dom),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Loss components on the tape. `dom` is `None` when the adversary is off.
pub struct LossTerms {
    pub task: Var,
    pub con: Var,
    pub ti: Var,
    pub dom: Option<Var>,
}

/// `L_task + α_w·L_con + β·L_ti + γ·L_dom`.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Result<(Var, TotalLossBreakdown)> {
    let con = tape.scale(terms.con, w.alpha_w);
    let ti = tape.scale(terms.ti, w.beta);
    let mut total = tape.add(terms.task, con)?;
    total = tape.add(total, ti)?;
    let mut dom_value = 0.0;
    if let Some(dom) = terms.dom {
        dom_value = tape.value(dom).item();
        let dom = tape.scale(dom, w.gamma);
        total = tape.add(total, dom)?;
    }
    let breakdown = TotalLossBreakdown {
        task: tape.value(terms.task).item(),
        con: tape.value(terms.con).item(),
        ti: tape.value(terms.ti).item(),
        dom: dom_value,
        alpha_w: w.alpha_w,
        beta: w.beta,
        gamma: w.gamma,
        total: tape.value(total).item(),
    };
    Ok((total, breakdown))
}

/// Mean squared error between `pred: [B, 1]` and scalar labels.
pub fn mse_loss(tape: &mut Tape, pred: Var, labels: &[f64]) -> Result<Var> {
    let target = tape.constant(Tensor::new([labels.len(), 1], labels.to_vec())?);
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Mean cross-entropy of `logits: [B, C]` against class indices.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, classes: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != classes.len() {
        return Err(Error::shape("cross_entropy", &s, &[classes.len()]));
    }
    if let Some(&bad) = classes.iter().find(|&&c| c >= s[1]) {
        return Err(Error::contract(format!("class {bad} outside 0..{}", s[1])));
    }
    let logp = tape.log_softmax(logits);
    let flat = tape.reshape(logp, [s[0] * s[1], 1])?;
    let rows = classes.iter().enumerate().map(|(b, &c)| b * s[1] + c).collect();
    let picked = tape.select_rows(flat, Arc::new(rows))?;
    let m = tape.mean(picked);
    Ok(tape.neg(m))
}

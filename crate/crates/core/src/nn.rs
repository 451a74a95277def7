//! Small parameterized layers and sequence-mask helpers shared by the model
//! modules.

use std::sync::Arc;

use rand::Rng as _;

use crate::error::Result;
use crate::numcore::{BoundParams, ParamId, ParamStore, Rng, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Logit assigned to masked attention positions.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.xavier(format!("{name}.weight"), d_in, d_out, rng)?;
        let bias = if bias {
            Some(store.zeros(format!("{name}.bias"), &[d_out])?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.ones(format!("{name}.gamma"), &[width])?,
            beta: store.zeros(format!("{name}.beta"), &[width])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), LN_EPS)
    }
}

/// Optional dropout during training. `None` or `p == 0` is the identity.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: Option<&'a mut Rng>,
}

impl Dropout<'_> {
    pub fn off() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = self.p;
        match self.rng.as_deref_mut() {
            Some(rng) if p > 0.0 => {
                let shape = tape.shape(x).to_vec();
                let n: usize = shape.iter().product();
                let keep = 1.0 / (1.0 - p);
                let mask = (0..n)
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                    .collect();
                tape.dropout(x, Tensor::new(shape, mask)?)
            }
            _ => Ok(x),
        }
    }
}

/// `keep[b, q, k] = k < lengths[b]`, repeated `heads` times per batch item.
pub fn key_mask(lengths: &[usize], heads: usize, n_q: usize, n_k: usize) -> Arc<Vec<bool>> {
    let mut keep = Vec::with_capacity(lengths.len() * heads * n_q * n_k);
    for &len in lengths {
        for _ in 0..heads * n_q {
            keep.extend((0..n_k).map(|k| k < len));
        }
    }
    Arc::new(keep)
}

/// `[B, 1, L]` weights that average the valid steps of each sequence.
pub fn pool_weights(lengths: &[usize], max_len: usize) -> Tensor {
    let mut w = Vec::with_capacity(lengths.len() * max_len);
    for &len in lengths {
        let inv = 1.0 / len as f64;
        w.extend((0..max_len).map(|t| if t < len { inv } else { 0.0 }));
    }
    Tensor::from_parts(vec![lengths.len(), 1, max_len], w)
}

/// Mean over the valid steps of `x: [B, L, d]`, giving `[B, d]`.
pub fn masked_mean_pool(tape: &mut Tape, x: Var, lengths: &[usize]) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let w = tape.constant(pool_weights(lengths, l));
    let pooled = tape.matmul(w, x)?;
    tape.reshape(pooled, [b, d])
}

/// Flat row indices `b * max_len + t` of every valid step.
pub fn valid_rows(lengths: &[usize], max_len: usize) -> Arc<Vec<usize>> {
    Arc::new(
        lengths
            .iter()
            .enumerate()
            .flat_map(|(b, &len)| (0..len).map(move |t| b * max_len + t))
            .collect(),
    )
}

//! Feature extraction and the shared / private representation encoders.
//!
//! Audio and video go through transformer encoders; text features come in
//! precomputed and pass through a learned affine projection. The resulting
//! `H_m` sequences are mapped into a modality-invariant subspace by one
//! shared encoder and into modality-specific subspaces by three private
//! encoders of identical architecture.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{Modality, PerModality};
use crate::nn::{key_mask, Dropout, LayerNorm, Linear, MASKED_LOGIT};
use crate::numcore::{BoundParams, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: PerModality<usize>,
    pub input_dims: PerModality<usize>,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            max_len: PerModality::new(8, 8, 10),
            input_dims: PerModality::new(12, 16, 20),
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [self.d_model, self.n_heads, self.n_layers, self.d_ff];
        if extents.contains(&0)
            || Modality::ALL
                .iter()
                .any(|&m| self.max_len[m] == 0 || self.input_dims[m] == 0)
        {
            return Err(Error::config("encoder extents must all be >= 1"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Sinusoidal positions: `PE[p, 2i] = sin(p / 10000^(2i/d))`,
/// `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn positional_encoding(n: usize, d: usize) -> Result<Tensor> {
    if n == 0 || d == 0 {
        return Err(Error::contract("positional encoding needs n, d >= 1"));
    }
    let mut data = vec![0.0; n * d];
    for p in 0..n {
        for j in 0..d {
            let pair = (j / 2) * 2;
            let angle = p as f64 / 10000f64.powf(pair as f64 / d as f64);
            data[p * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new([n, d], data)
}

/// Adds positional encodings to every sequence of `x: [B, L, d]`.
pub fn add_positional(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let pe = tape.constant(positional_encoding(s[1], s[2])?);
    tape.add_broadcast(x, pe)
}

fn expect_input(tape: &Tape, x: Var, d_in: usize) -> Result<(usize, usize)> {
    let s = tape.shape(x);
    if s.len() != 3 || s[2] != d_in {
        return Err(Error::shape("encoder input", s, &[0, 0, d_in]));
    }
    Ok((s[0], s[1]))
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, false, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, true, rng)?,
            heads,
        })
    }

    fn split(&self, tape: &mut Tape, x: Var, b: usize, l: usize, d: usize) -> Result<Var> {
        let dh = d / self.heads;
        let x = tape.reshape(x, [b, l, self.heads, dh])?;
        let x = tape.swap_axes12(x)?;
        tape.reshape(x, [b * self.heads, l, dh])
    }

    /// Self-attention over `x: [B, L, d]`. Returns the output and the
    /// attention weights `[B·heads, L, L]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        x: Var,
        lengths: &[usize],
    ) -> Result<(Var, Var)> {
        let s = tape.shape(x).to_vec();
        let (b, l, d) = (s[0], s[1], s[2]);
        let dh = d / self.heads;
        let q = self.q.forward(tape, p, x)?;
        let k = self.k.forward(tape, p, x)?;
        let v = self.v.forward(tape, p, x)?;
        let q = self.split(tape, q, b, l, d)?;
        let k = self.split(tape, k, b, l, d)?;
        let v = self.split(tape, v, b, l, d)?;
        let scores = tape.matmul_t(q, k)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = tape.masked_fill(scores, key_mask(lengths, self.heads, l, l), MASKED_LOGIT)?;
        let weights = tape.softmax(scores, 2)?;
        let ctx = tape.matmul(weights, v)?;
        let ctx = tape.reshape(ctx, [b, self.heads, l, dh])?;
        let ctx = tape.swap_axes12(ctx)?;
        let ctx = tape.reshape(ctx, [b, l, d])?;
        Ok((self.o.forward(tape, p, ctx)?, weights))
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNorm,
}

impl EncoderLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, cfg.n_heads, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), d, cfg.d_ff, true, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.d_ff, d, true, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
        })
    }

    fn forward(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        x: Var,
        lengths: &[usize],
        dropout: &mut Dropout,
    ) -> Result<(Var, Var)> {
        let (a, weights) = self.attn.forward(tape, p, x, lengths)?;
        let a = dropout.apply(tape, a)?;
        let h = tape.add(x, a)?;
        let h = self.ln1.forward(tape, p, h)?;
        let f = self.ff1.forward(tape, p, h)?;
        let f = tape.gelu(f);
        let f = self.ff2.forward(tape, p, f)?;
        let f = dropout.apply(tape, f)?;
        let out = tape.add(h, f)?;
        Ok((self.ln2.forward(tape, p, out)?, weights))
    }
}

pub struct EncodedSequence {
    pub output: Var,
    /// Attention weights of each layer, `[B·heads, L, L]`.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub input: Linear,
    pub layers: Vec<EncoderLayer>,
}

impl TransformerEncoder {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        let input = Linear::new(store, &format!("{name}.input"), d_in, cfg.d_model, true, rng)?;
        let layers = (0..cfg.n_layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { input, layers })
    }

    /// Projects `x: [B, L, d_in]` to the model width, adds positions, and runs
    /// the encoder layers with padded steps masked out of attention.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        x: Var,
        lengths: &[usize],
        dropout: &mut Dropout,
    ) -> Result<EncodedSequence> {
        expect_input(tape, x, self.input.d_in)?;
        let h = self.input.forward(tape, p, x)?;
        let mut h = add_positional(tape, h)?;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, w) = layer.forward(tape, p, h, lengths, dropout)?;
            h = next;
            attention.push(w);
        }
        Ok(EncodedSequence {
            output: h,
            attention,
        })
    }
}

/// Stand-in for a pretrained language model: affine map of the supplied text
/// features to the model width.
#[derive(Clone, Debug)]
pub struct TextProjection {
    pub proj: Linear,
}

impl TextProjection {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_model: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, &format!("{name}.proj"), d_in, d_model, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.last() != Some(&self.proj.d_in) {
            return Err(Error::shape("text_project", s, &[self.proj.d_in]));
        }
        self.proj.forward(tape, p, x)
    }
}

/// `linear → gelu → layernorm → linear`, applied row-wise.
#[derive(Clone, Debug)]
pub struct RepresentationEncoder {
    pub l1: Linear,
    pub ln: LayerNorm,
    pub l2: Linear,
}

impl RepresentationEncoder {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}.l1"), d, d, true, rng)?,
            ln: LayerNorm::new(store, &format!("{name}.ln"), d)?,
            l2: Linear::new(store, &format!("{name}.l2"), d, d, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, h: Var) -> Result<Var> {
        let x = self.l1.forward(tape, p, h)?;
        let x = tape.gelu(x);
        let x = self.ln.forward(tape, p, x)?;
        self.l2.forward(tape, p, x)
    }
}

pub const SHARED_PREFIX: &str = "shared.";
pub const PRIVATE_PREFIX: &str = "private.";

pub fn private_prefix(m: Modality) -> String {
    format!("{PRIVATE_PREFIX}{}.", m.tag())
}

pub struct DisentangledReps {
    pub invariant: PerModality<Var>,
    pub specific: PerModality<Var>,
}

/// Feature extraction plus the shared and private encoders.
#[derive(Clone, Debug)]
pub struct Encoders {
    pub audio: TransformerEncoder,
    pub video: TransformerEncoder,
    pub text: TextProjection,
    pub shared: RepresentationEncoder,
    pub private: PerModality<RepresentationEncoder>,
}

impl Encoders {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let audio = TransformerEncoder::new(store, "extract.a", cfg.input_dims.audio, cfg, rng)?;
        let video = TransformerEncoder::new(store, "extract.v", cfg.input_dims.video, cfg, rng)?;
        let text = TextProjection::new(store, "extract.t", cfg.input_dims.text, d, rng)?;
        let shared = RepresentationEncoder::new(store, "shared", d, rng)?;
        let private = PerModality::try_from_fn(|m| {
            RepresentationEncoder::new(store, &format!("private.{}", m.tag()), d, rng)
        })?;
        Ok(Self {
            audio,
            video,
            text,
            shared,
            private,
        })
    }

    /// `H_m` for every modality from padded inputs `[B, L_m, d_m]`.
    pub fn extract(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        inputs: &PerModality<Var>,
        lengths: &PerModality<Vec<usize>>,
        dropout: &mut Dropout,
    ) -> Result<PerModality<Var>> {
        let audio = self.audio.forward(tape, p, inputs.audio, &lengths.audio, dropout)?.output;
        let video = self.video.forward(tape, p, inputs.video, &lengths.video, dropout)?.output;
        let text = self.text.forward(tape, p, inputs.text)?;
        Ok(PerModality::new(audio, text, video))
    }

    pub fn shared_encode(&self, tape: &mut Tape, p: &BoundParams, h: Var) -> Result<Var> {
        self.shared.forward(tape, p, h)
    }

    pub fn private_encode(&self, tape: &mut Tape, p: &BoundParams, h: Var, m: Modality) -> Result<Var> {
        self.private[m].forward(tape, p, h)
    }

    /// Tag-based variant of [`Encoders::private_encode`].
    pub fn private_encode_tag(&self, tape: &mut Tape, p: &BoundParams, h: Var, tag: &str) -> Result<Var> {
        let m: Modality = tag.parse()?;
        self.private_encode(tape, p, h, m)
    }

    pub fn disentangle(&self, tape: &mut Tape, p: &BoundParams, h: &PerModality<Var>) -> Result<DisentangledReps> {
        let invariant = PerModality::try_from_fn(|m| self.shared_encode(tape, p, h[m]))?;
        let specific = PerModality::try_from_fn(|m| self.private_encode(tape, p, h[m], m))?;
        Ok(DisentangledReps {
            invariant,
            specific,
        })
    }
}

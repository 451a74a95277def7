//! Samples, the synthetic generator, noise injection, JSONL I/O, splits and
//! padded batches.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{Modality, PerModality};
use crate::numcore::{mix_seed, rng, Rng, Tensor};

pub const LABEL_MIN: f64 = -3.0;
pub const LABEL_MAX: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub label: f64,
    pub text: Vec<Vec<f64>>,
    pub audio: Vec<Vec<f64>>,
    pub video: Vec<Vec<f64>>,
}

impl Sample {
    pub fn frames(&self, m: Modality) -> &[Vec<f64>] {
        match m {
            Modality::Audio => &self.audio,
            Modality::Text => &self.text,
            Modality::Video => &self.video,
        }
    }

    pub fn frames_mut(&mut self, m: Modality) -> &mut Vec<Vec<f64>> {
        match m {
            Modality::Audio => &mut self.audio,
            Modality::Text => &mut self.text,
            Modality::Video => &mut self.video,
        }
    }

    /// Range, finiteness, non-empty sequences and rectangular frames.
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::Validation {
            id: self.id.clone(),
            message,
        };
        if !(LABEL_MIN..=LABEL_MAX).contains(&self.label) {
            return Err(fail(format!("label {} outside [-3, 3]", self.label)));
        }
        for m in Modality::ALL {
            let frames = self.frames(m);
            let Some(first) = frames.first() else {
                return Err(fail(format!("{m} sequence is empty")));
            };
            if first.is_empty() {
                return Err(fail(format!("{m} frames have zero width")));
            }
            for (t, f) in frames.iter().enumerate() {
                if f.len() != first.len() {
                    return Err(fail(format!(
                        "ragged {m} frames: width {} at step {t}, expected {}",
                        f.len(),
                        first.len()
                    )));
                }
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(fail(format!("non-finite {m} feature at step {t}")));
                }
            }
        }
        Ok(())
    }

    pub fn width(&self, m: Modality) -> usize {
        self.frames(m).first().map_or(0, Vec::len)
    }
}

/// Checks every sample and that feature widths agree across the dataset.
pub fn validate_dataset(samples: &[Sample]) -> Result<()> {
    let Some(first) = samples.first() else {
        return Ok(());
    };
    for s in samples {
        s.validate()?;
        for m in Modality::ALL {
            if s.width(m) != first.width(m) {
                return Err(Error::Validation {
                    id: s.id.clone(),
                    message: format!("{m} width {} differs from dataset width {}", s.width(m), first.width(m)),
                });
            }
        }
    }
    Ok(())
}

/// Per-modality feature widths of a validated, non-empty dataset.
pub fn dataset_dims(samples: &[Sample]) -> Result<PerModality<usize>> {
    let first = samples.first().ok_or_else(|| Error::contract("empty dataset"))?;
    Ok(PerModality::from_fn(|m| first.width(m)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthRange {
    pub min: usize,
    pub max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub dims: PerModality<usize>,
    pub lengths: PerModality<LengthRange>,
    /// Weight of the label-bearing shared signal in each modality.
    pub signal_strength: PerModality<f64>,
    /// Standard deviation of the per-frame noise.
    pub noise_scale: PerModality<f64>,
    /// AR(1) coefficient of the video noise.
    pub video_autocorrelation: f64,
    pub d_shared: usize,
    pub d_specific: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            dims: PerModality::new(12, 16, 20),
            lengths: PerModality::new(
                LengthRange { min: 4, max: 8 },
                LengthRange { min: 4, max: 8 },
                LengthRange { min: 6, max: 10 },
            ),
            signal_strength: PerModality::new(0.4, 1.0, 0.4),
            noise_scale: PerModality::new(0.3, 0.2, 0.3),
            video_autocorrelation: 0.9,
            d_shared: 8,
            d_specific: 4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.video_autocorrelation) {
            return Err(Error::config("video autocorrelation must lie in [0, 1)"));
        }
        if self.d_shared == 0 || self.d_specific == 0 {
            return Err(Error::config("latent widths must be >= 1"));
        }
        for m in Modality::ALL {
            let r = self.lengths[m];
            if r.min == 0 || r.max < r.min {
                return Err(Error::config(format!("{m} length range {}..={} is invalid", r.min, r.max)));
            }
            if self.dims[m] == 0 {
                return Err(Error::config(format!("{m} width must be >= 1")));
            }
            if !(self.signal_strength[m] >= 0.0) || !(self.noise_scale[m] >= 0.0) {
                return Err(Error::config(format!("{m} strength and noise scale must be >= 0")));
            }
        }
        Ok(())
    }
}

fn gaussian(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| scale * gaussian(rng)).collect())
        .collect()
}

/// `x · M` for a row vector and a row-major matrix.
fn vec_mat(x: &[f64], m: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; m[0].len()];
    for (xi, row) in x.iter().zip(m) {
        for (o, w) in out.iter_mut().zip(row) {
            *o += xi * w;
        }
    }
    out
}

struct Mixing {
    w_shared: Vec<f64>,
    b_shared: Vec<f64>,
    a: PerModality<Vec<Vec<f64>>>,
    b: PerModality<Vec<Vec<f64>>>,
}

impl Mixing {
    fn new(cfg: &SynthConfig) -> Self {
        let mut r = rng(mix_seed(cfg.seed, u64::MAX));
        let w_shared = (0..cfg.d_shared).map(|_| gaussian(&mut r)).collect();
        let b_shared = (0..cfg.d_shared).map(|_| 0.1 * gaussian(&mut r)).collect();
        let a = PerModality::from_fn(|m| {
            gaussian_matrix(&mut r, cfg.d_shared, cfg.dims[m], 1.0 / (cfg.d_shared as f64).sqrt())
        });
        let b = PerModality::from_fn(|m| {
            gaussian_matrix(&mut r, cfg.d_specific, cfg.dims[m], 1.0 / (cfg.d_specific as f64).sqrt())
        });
        Self {
            w_shared,
            b_shared,
            a,
            b,
        }
    }
}

/// Deterministic synthetic dataset. Each sample draws from its own seed
/// stream, so content does not depend on generation order.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mix = Mixing::new(cfg);
    Ok((0..cfg.n_samples).map(|i| generate_one(cfg, &mix, i)).collect())
}

fn generate_one(cfg: &SynthConfig, mix: &Mixing, index: usize) -> Sample {
    let mut r = rng(mix_seed(cfg.seed, index as u64));
    let label: f64 = r.random_range(LABEL_MIN..=LABEL_MAX);
    let u: Vec<f64> = mix
        .w_shared
        .iter()
        .zip(&mix.b_shared)
        .map(|(w, b)| (label * w + b).tanh())
        .collect();
    let mut frames = PerModality::from_fn(|_| Vec::new());
    for m in Modality::ALL {
        let len = r.random_range(cfg.lengths[m].min..=cfg.lengths[m].max);
        let s: Vec<f64> = (0..cfg.d_specific).map(|_| gaussian(&mut r)).collect();
        let signal = vec_mat(&u, &mix.a[m]);
        let own = vec_mat(&s, &mix.b[m]);
        let base: Vec<f64> = signal
            .iter()
            .zip(&own)
            .map(|(u, s)| cfg.signal_strength[m] * u + s)
            .collect();
        let sigma = cfg.noise_scale[m];
        let rho = if m == Modality::Video {
            cfg.video_autocorrelation
        } else {
            0.0
        };
        let innovation = (1.0 - rho * rho).sqrt();
        let mut eps: Vec<f64> = (0..base.len()).map(|_| sigma * gaussian(&mut r)).collect();
        let mut seq = Vec::with_capacity(len);
        for t in 0..len {
            if t > 0 {
                for e in eps.iter_mut() {
                    *e = rho * *e + innovation * sigma * gaussian(&mut r);
                }
            }
            seq.push(base.iter().zip(&eps).map(|(b, e)| b + e).collect());
        }
        frames[m] = seq;
    }
    Sample {
        id: format!("s{index:05}"),
        label,
        text: std::mem::take(&mut frames.text),
        audio: std::mem::take(&mut frames.audio),
        video: std::mem::take(&mut frames.video),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Variance of the injected Gaussian noise.
    pub variance: f64,
    /// When set, overrides `variance` with a standard deviation.
    pub std: Option<f64>,
    pub modalities: PerModality<bool>,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            variance: 0.5,
            std: None,
            modalities: PerModality::new(true, true, true),
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn sigma(&self) -> Result<f64> {
        let sigma = match self.std {
            Some(s) => s,
            None => self.variance.sqrt(),
        };
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::config("noise variance must be finite and >= 0"));
        }
        Ok(sigma)
    }
}

/// Adds i.i.d. zero-mean Gaussian noise to every selected feature.
pub fn add_noise(samples: &[Sample], cfg: &NoiseConfig) -> Result<Vec<Sample>> {
    let sigma = cfg.sigma()?;
    let mut out = samples.to_vec();
    if sigma == 0.0 {
        return Ok(out);
    }
    for (i, s) in out.iter_mut().enumerate() {
        let mut r = rng(mix_seed(cfg.seed ^ 0x4E4F_4953_45, i as u64));
        for m in Modality::ALL {
            if !cfg.modalities[m] {
                continue;
            }
            for frame in s.frames_mut(m) {
                for v in frame.iter_mut() {
                    *v += sigma * gaussian(&mut r);
                }
            }
        }
    }
    Ok(out)
}

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn write_jsonl(samples: &[Sample], path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w: Box<dyn Write> = if is_gzip(path) {
        Box::new(GzEncoder::new(BufWriter::new(file), Compression::default()))
    } else {
        Box::new(BufWriter::new(file))
    };
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parses one sample per non-blank line; errors carry the 1-based line.
pub fn parse_jsonl(reader: impl BufRead) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line).map_err(|e| Error::Data {
            line: i + 1,
            message: e.to_string(),
        })?;
        s.validate().map_err(|e| Error::Data {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(s);
    }
    validate_dataset(&out)?;
    Ok(out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let file = File::open(path)?;
    let raw: Box<dyn Read> = if is_gzip(path) {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    parse_jsonl(BufReader::new(raw))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle into train / val / test by the given fractions (the test
/// split takes the remainder).
pub fn split_indices(n: usize, train: f64, val: f64, seed: u64) -> Result<Split> {
    if !(train > 0.0 && val >= 0.0 && train + val < 1.0) {
        return Err(Error::config("split fractions need train > 0, val >= 0, train + val < 1"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng(mix_seed(seed, 0x5350_4C49_54)));
    let n_train = (n as f64 * train).round() as usize;
    let n_val = (n as f64 * val).round() as usize;
    let test = idx.split_off((n_train + n_val).min(n));
    let val = idx.split_off(n_train.min(idx.len()));
    Ok(Split {
        train: idx,
        val,
        test,
    })
}

/// One modality of a batch: `[B, L, d]` zero-padded features and the valid
/// length of each sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBatch {
    pub features: Tensor,
    pub lengths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: PerModality<ModalityBatch>,
    pub labels: Vec<f64>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn lengths(&self) -> PerModality<Vec<usize>> {
        PerModality::from_fn(|m| self.inputs[m].lengths.clone())
    }

    /// Pads to the longest sequence in the batch, truncating at `max_len`.
    pub fn collate(samples: &[&Sample], max_len: &PerModality<usize>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("cannot collate an empty batch"));
        }
        let inputs = PerModality::try_from_fn(|m| {
            let d = samples[0].width(m);
            let lengths: Vec<usize> = samples.iter().map(|s| s.frames(m).len().min(max_len[m])).collect();
            let l = *lengths.iter().max().expect("non-empty");
            let mut data = vec![0.0; samples.len() * l * d];
            for (b, s) in samples.iter().enumerate() {
                if s.width(m) != d {
                    return Err(Error::shape("collate", &[s.width(m)], &[d]));
                }
                for (t, frame) in s.frames(m).iter().take(l).enumerate() {
                    let at = (b * l + t) * d;
                    data[at..at + d].copy_from_slice(frame);
                }
            }
            Ok(ModalityBatch {
                features: Tensor::new([samples.len(), l, d], data)?,
                lengths,
            })
        })?;
        Ok(Self {
            inputs,
            labels: samples.iter().map(|s| s.label).collect(),
            ids: samples.iter().map(|s| s.id.clone()).collect(),
        })
    }
}

//! Finite-difference verification of every differentiable surface: tape
//! primitives, the losses, the fusion operations, and a tiny end-to-end
//! model.

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::adversary::{aam_loss, cosine_logits, domain_loss, AdversaryConfig, Discriminator, GradientPath};
use crate::data::{generate, Batch, LengthRange, Sample, SynthConfig};
use crate::disentangle::{cmd, consistency_loss, CmdConfig};
use crate::encoders::{DisentangledReps, EncoderConfig, TransformerEncoder};
use crate::error::{Error, Result};
use crate::fusion::{
    alignment, cross_attention, cross_entropy_loss, fbp_gate, fuse, mse_loss, total_loss, FusionConfig, LossTerms,
    LossWeights, PredictionHead,
};
use crate::modality::PerModality;
use crate::model::{ModelConfig, SatiModel, Task};
use crate::nn::{key_mask, Dropout};
use crate::numcore::{grad_check, mix_seed, rng, BoundParams, GradCheckReport, ParamStore, Rng, Tape, Tensor, Var};
use crate::temporal::{jsd_rows, temporal_invariance_loss, FrameMapping};

pub const OPS_TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-4;
pub const FULL_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_SEEDS: usize = 20;
/// Central-difference step for smooth, moderately scaled checks.
pub const EPS: f64 = 1e-6;
/// Step for deep composites, where roundoff in the loss dominates at `EPS`.
pub const COMPOSITE_EPS: f64 = 1e-4;
/// Angular scale used when checking the margin losses.
pub const CHECK_SCALE: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Ops,
    Losses,
    Full,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "losses" => Ok(Scope::Losses),
            "full" => Ok(Scope::Full),
            other => Err(Error::config(format!("unknown gradcheck scope {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckSummary {
    pub name: String,
    pub scope: Scope,
    pub seeds: usize,
    pub tolerance: f64,
    pub worst_rel_error: f64,
    pub passed: bool,
    /// Reports of failing seeds, each naming its worst coordinate per input.
    pub failures: Vec<GradCheckReport>,
}

type CheckFn = fn(u64) -> Result<GradCheckReport>;

pub fn checks(scope: Scope) -> Vec<(&'static str, CheckFn)> {
    match scope {
        Scope::Ops => vec![
            ("add_sub_mul", op_arith as CheckFn),
            ("broadcast", op_broadcast),
            ("matmul", op_matmul),
            ("batched_matmul", op_batched_matmul),
            ("transpose_swap", op_layout),
            ("unary", op_unary),
            ("log", op_log),
            ("reductions", op_reductions),
            ("softmax", op_softmax),
            ("log_softmax", op_log_softmax),
            ("masked_softmax", op_masked_softmax),
            ("layer_norm", op_layer_norm),
            ("l2", op_l2),
            ("concat_slice_select", op_concat_slice_select),
            ("sum_pool", op_sum_pool),
            ("margin_cos", op_margin_cos),
            ("gaussian_logits", op_gaussian_logits),
            ("transformer_encoder", op_encoder),
        ],
        Scope::Losses => vec![
            ("cmd", loss_cmd as CheckFn),
            ("consistency", loss_consistency),
            ("aam", loss_aam),
            ("domain", loss_domain),
            ("jsd", loss_jsd),
            ("temporal_softmax", loss_temporal_softmax),
            ("temporal_gaussian", loss_temporal_gaussian),
            ("total", loss_total),
            ("mse", loss_mse),
            ("cross_entropy", loss_ce),
            ("cross_attention", fusion_cross_attention),
            ("fbp_gate", fusion_fbp),
            ("fuse", fusion_fuse),
            ("predict", fusion_predict),
        ],
        Scope::Full => vec![("full_regression", full_regression as CheckFn), ("full_classification", full_classification)],
    }
}

pub fn tolerance(scope: Scope) -> f64 {
    match scope {
        Scope::Ops => OPS_TOLERANCE,
        Scope::Losses => LOSS_TOLERANCE,
        Scope::Full => FULL_TOLERANCE,
    }
}

/// Runs every check of `scope` over seeds `base..base + seeds`.
pub fn run_scope(scope: Scope, seeds: usize, base: u64) -> Result<Vec<CheckSummary>> {
    checks(scope)
        .into_iter()
        .map(|(name, f)| {
            let mut worst: f64 = 0.0;
            let mut failures = Vec::new();
            for s in base..base + seeds as u64 {
                let report = f(mix_seed(s, name.len() as u64))?;
                worst = worst.max(report.max_rel_error);
                if !report.passed {
                    failures.push(report);
                }
            }
            Ok(CheckSummary {
                name: name.to_string(),
                scope,
                seeds,
                tolerance: tolerance(scope),
                worst_rel_error: worst,
                passed: failures.is_empty(),
                failures,
            })
        })
        .collect()
}

fn uniform(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).expect("shape matches")
}

fn inputs(r: &mut Rng, shapes: &[&[usize]]) -> Vec<Tensor> {
    shapes.iter().map(|s| uniform(r, s, -2.0, 2.0)).collect()
}

/// `Σ y ⊙ W` for a fixed random `W`, so every output coordinate matters.
fn project(tape: &mut Tape, y: Var, r: &mut Rng) -> Result<Var> {
    let w = uniform(r, tape.shape(y), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check_op(
    label: &str,
    seed: u64,
    tol: f64,
    shapes: &[&[usize]],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let params = inputs(&mut r, shapes);
    let wseed = r.random::<u64>();
    grad_check(label, &params, EPS, tol, |tape, v| {
        let y = f(tape, v)?;
        project(tape, y, &mut rng(wseed))
    })
}

fn op_arith(seed: u64) -> Result<GradCheckReport> {
    check_op("add_sub_mul", seed, OPS_TOLERANCE, &[&[3, 4], &[3, 4]], |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(v[0], v[1])?;
        let m = t.mul(s, d)?;
        let n = t.neg(m);
        let q = t.add_scalar(n, 0.5);
        Ok(t.scale(q, 1.7))
    })
}

fn op_broadcast(seed: u64) -> Result<GradCheckReport> {
    check_op("broadcast", seed, OPS_TOLERANCE, &[&[2, 3, 4], &[4], &[3, 4]], |t, v| {
        let a = t.add_broadcast(v[0], v[1])?;
        t.mul_broadcast(a, v[2])
    })
}

fn op_matmul(seed: u64) -> Result<GradCheckReport> {
    check_op("matmul", seed, OPS_TOLERANCE, &[&[2, 3, 4], &[4, 5], &[2, 3, 4]], |t, v| {
        let a = t.matmul(v[0], v[1])?;
        let b = t.matmul_t(v[0], v[2])?;
        let a = t.sum(a);
        let b = t.mul(b, b)?;
        let b = t.sum(b);
        t.add(a, b)
    })
}

fn op_batched_matmul(seed: u64) -> Result<GradCheckReport> {
    check_op("batched_matmul", seed, OPS_TOLERANCE, &[&[2, 3, 4], &[2, 4, 2]], |t, v| t.matmul(v[0], v[1]))
}

fn op_layout(seed: u64) -> Result<GradCheckReport> {
    check_op("transpose_swap", seed, OPS_TOLERANCE, &[&[2, 3, 4, 2]], |t, v| {
        let s = t.swap_axes12(v[0])?;
        let r = t.reshape(s, [6, 4, 2])?;
        let tr = t.transpose(r)?;
        let sq = t.mul(tr, tr)?;
        Ok(sq)
    })
}

fn op_unary(seed: u64) -> Result<GradCheckReport> {
    check_op("unary", seed, OPS_TOLERANCE, &[&[4, 5]], |t, v| {
        let parts = [t.gelu(v[0]), t.sigmoid(v[0]), t.tanh(v[0]), t.exp(v[0]), t.powi(v[0], 3)];
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = t.add(acc, p)?;
        }
        Ok(acc)
    })
}

fn op_log(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[3, 4], 0.1, 2.0);
    let wseed = r.random::<u64>();
    grad_check("log", &[x], EPS, OPS_TOLERANCE, |t, v| {
        let y = t.log(v[0]);
        project(t, y, &mut rng(wseed))
    })
}

fn op_reductions(seed: u64) -> Result<GradCheckReport> {
    check_op("reductions", seed, OPS_TOLERANCE, &[&[3, 4, 5]], |t, v| {
        let a = t.sum_axis(v[0], 1)?;
        let b = t.mean_axis(v[0], 2)?;
        let c = t.var_axis(v[0], 0)?;
        let a = t.mean(a);
        let b = t.mul(b, b)?;
        let b = t.sum(b);
        let c = t.mul(c, c)?;
        let c = t.sum(c);
        let s = t.add(a, b)?;
        t.add(s, c)
    })
}

fn op_softmax(seed: u64) -> Result<GradCheckReport> {
    check_op("softmax", seed, OPS_TOLERANCE, &[&[3, 4, 5]], |t, v| {
        let a = t.softmax(v[0], 2)?;
        let b = t.softmax(v[0], 0)?;
        t.add(a, b)
    })
}

fn op_log_softmax(seed: u64) -> Result<GradCheckReport> {
    check_op("log_softmax", seed, OPS_TOLERANCE, &[&[4, 6]], |t, v| Ok(t.log_softmax(v[0])))
}

fn op_masked_softmax(seed: u64) -> Result<GradCheckReport> {
    check_op("masked_softmax", seed, OPS_TOLERANCE, &[&[2, 3, 4]], |t, v| {
        let m = t.masked_fill(v[0], key_mask(&[4, 2], 1, 3, 4), crate::nn::MASKED_LOGIT)?;
        t.softmax(m, 2)
    })
}

fn op_layer_norm(seed: u64) -> Result<GradCheckReport> {
    check_op("layer_norm", seed, OPS_TOLERANCE, &[&[2, 3, 6], &[6], &[6]], |t, v| {
        t.layer_norm(v[0], v[1], v[2], crate::nn::LN_EPS)
    })
}

fn op_l2(seed: u64) -> Result<GradCheckReport> {
    check_op("l2", seed, OPS_TOLERANCE, &[&[3, 5], &[7]], |t, v| {
        let n = t.l2_normalize_last(v[0], 1e-12);
        let s = t.l2_norm(v[1]);
        let n = t.reshape(n, [15])?;
        let s = t.reshape(s, [1])?;
        t.concat(&[n, s], 0)
    })
}

fn op_concat_slice_select(seed: u64) -> Result<GradCheckReport> {
    check_op("concat_slice_select", seed, OPS_TOLERANCE, &[&[2, 3, 2], &[2, 3, 3]], |t, v| {
        let c = t.concat(&[v[0], v[1]], 2)?;
        let s = t.slice(c, 1, 1, 2)?;
        let f = t.reshape(s, [4, 5])?;
        let picked = t.select_rows(f, Arc::new(vec![3, 0, 0, 2]))?;
        t.mul(picked, picked)
    })
}

fn op_sum_pool(seed: u64) -> Result<GradCheckReport> {
    check_op("sum_pool", seed, OPS_TOLERANCE, &[&[2, 3, 8]], |t, v| {
        let p = t.sum_pool_last(v[0], 4)?;
        t.mul(p, p)
    })
}

fn op_margin_cos(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[4, 3], -0.95, 0.95);
    let wseed = r.random::<u64>();
    grad_check("margin_cos", &[x], EPS, OPS_TOLERANCE, |t, v| {
        let y = t.margin_cos(v[0], 0.35);
        project(t, y, &mut rng(wseed))
    })
}

fn op_gaussian_logits(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mu = uniform(&mut r, &[3, 2], -2.0, 2.0);
    let var = uniform(&mut r, &[3, 2], 0.1, 2.0);
    let wseed = r.random::<u64>();
    let grid = Arc::new(vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
    grad_check("gaussian_logits", &[mu, var], EPS, OPS_TOLERANCE, |t, v| {
        let y = t.gaussian_logits(v[0], v[1], grid.clone(), 1e-6)?;
        project(t, y, &mut rng(wseed))
    })
}

/// Checks `f` with respect to every tensor of `store` followed by `extra`.
fn check_with_store(
    label: &str,
    store: &ParamStore,
    extra: Vec<Tensor>,
    eps: f64,
    tol: f64,
    f: impl Fn(&mut Tape, &BoundParams, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let n = store.len();
    let names: Vec<String> = store.iter().map(|(_, name, _)| name.to_string()).collect();
    let mut params: Vec<Tensor> = store.iter().map(|(_, _, t)| t.clone()).collect();
    params.extend(extra);
    let mut report = grad_check(label, &params, eps, tol, |tape, vars| {
        let p = BoundParams::from_vars(vars[..n].to_vec());
        f(tape, &p, &vars[n..])
    })?;
    for (i, check) in report.params.iter_mut().enumerate() {
        check.name = if i < n {
            names[i].clone()
        } else {
            format!("input{}", i - n)
        };
    }
    Ok(report)
}

fn op_encoder(seed: u64) -> Result<GradCheckReport> {
    let cfg = EncoderConfig {
        d_model: 4,
        n_heads: 2,
        n_layers: 1,
        d_ff: 6,
        ..Default::default()
    };
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let enc = TransformerEncoder::new(&mut store, "enc", 3, &cfg, &mut r)?;
    let x = uniform(&mut r, &[2, 3, 3], -2.0, 2.0);
    let wseed = r.random::<u64>();
    check_with_store("transformer_encoder", &store, vec![x], EPS, OPS_TOLERANCE, |t, p, v| {
        let out = enc.forward(t, p, v[0], &[3, 2], &mut Dropout::off())?.output;
        project(t, out, &mut rng(wseed))
    })
}

fn loss_cmd(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let params = vec![uniform(&mut r, &[5, 3], -2.0, 2.0), uniform(&mut r, &[4, 3], -2.0, 2.0)];
    grad_check("cmd", &params, EPS, LOSS_TOLERANCE, |t, v| cmd(t, v[0], v[1], &CmdConfig::default()))
}

fn loss_consistency(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let params = inputs(&mut r, &[&[4, 3], &[5, 3], &[3, 3]]);
    grad_check("consistency", &params, EPS, LOSS_TOLERANCE, |t, v| {
        consistency_loss(t, v[0], v[1], v[2], &CmdConfig::default())
    })
}

fn loss_aam(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let params = inputs(&mut r, &[&[4, 5], &[5, 3]]);
    let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..3)).collect();
    let cfg = AdversaryConfig {
        scale: CHECK_SCALE,
        ..Default::default()
    };
    grad_check("aam", &params, EPS, LOSS_TOLERANCE, |t, v| {
        let e = t.l2_normalize_last(v[0], 1e-12);
        let c = cosine_logits(t, e, v[1])?;
        aam_loss(t, c, &labels, cfg.scale, cfg.margin)
    })
}

fn loss_domain(seed: u64) -> Result<GradCheckReport> {
    let cfg = AdversaryConfig {
        d_hidden: 4,
        scale: CHECK_SCALE,
        invariant_path: GradientPath::Identity,
        ..Default::default()
    };
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let disc = Discriminator::new(&mut store, 3, &cfg, &mut r)?;
    let lengths = PerModality::new(vec![2, 3], vec![3, 1], vec![3, 3]);
    let reps = inputs(&mut r, &[&[2usize, 3, 3][..]; 6]);
    check_with_store("domain", &store, reps, EPS, LOSS_TOLERANCE, |t, p, v| {
        let reps = DisentangledReps {
            invariant: PerModality::new(v[0], v[1], v[2]),
            specific: PerModality::new(v[3], v[4], v[5]),
        };
        Ok(domain_loss(t, p, &disc, &reps, &lengths, &cfg)?.total)
    })
}

fn loss_jsd(seed: u64) -> Result<GradCheckReport> {
    check_op_scalar("jsd", seed, &[&[3, 4], &[3, 4]], |t, v| {
        let p = t.softmax(v[0], 1)?;
        let q = t.softmax(v[1], 1)?;
        let j = jsd_rows(t, p, q)?;
        Ok(t.sum(j))
    })
}

fn check_op_scalar(
    label: &str,
    seed: u64,
    shapes: &[&[usize]],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let params = inputs(&mut r, shapes);
    grad_check(label, &params, EPS, LOSS_TOLERANCE, f)
}

fn loss_temporal_softmax(seed: u64) -> Result<GradCheckReport> {
    check_op_scalar("temporal_softmax", seed, &[&[3, 4, 5]], |t, v| {
        Ok(temporal_invariance_loss(t, v[0], &[4, 1, 3], &FrameMapping::Softmax)?.loss)
    })
}

fn loss_temporal_gaussian(seed: u64) -> Result<GradCheckReport> {
    let mapping = FrameMapping::GaussianProxy {
        groups: 2,
        grid_points: 7,
        grid_min: -3.0,
        grid_max: 3.0,
    };
    let params = inputs(&mut rng(seed), &[&[2, 4, 6]]);
    grad_check("temporal_gaussian", &params, COMPOSITE_EPS, LOSS_TOLERANCE, move |t, v| {
        Ok(temporal_invariance_loss(t, v[0], &[4, 3], &mapping)?.loss)
    })
}

fn loss_total(seed: u64) -> Result<GradCheckReport> {
    let w = LossWeights::default();
    check_op_scalar("total", seed, &[&[], &[], &[], &[]], move |t, v| {
        let terms = LossTerms {
            task: v[0],
            con: v[1],
            ti: v[2],
            dom: Some(v[3]),
        };
        Ok(total_loss(t, &terms, &w)?.0)
    })
}

fn loss_mse(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let labels: Vec<f64> = (0..5).map(|_| r.random_range(-3.0..3.0)).collect();
    check_op_scalar("mse", seed, &[&[5, 1]], move |t, v| mse_loss(t, v[0], &labels))
}

fn loss_ce(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let classes: Vec<usize> = (0..5).map(|_| r.random_range(0..7)).collect();
    check_op_scalar("cross_entropy", seed, &[&[5, 7]], move |t, v| cross_entropy_loss(t, v[0], &classes))
}

fn fusion_cross_attention(seed: u64) -> Result<GradCheckReport> {
    check_op("cross_attention", seed, LOSS_TOLERANCE, &[&[2, 3, 4], &[2, 5, 4]], |t, v| {
        Ok(cross_attention(t, v[0], v[1], &[5, 2])?.0)
    })
}

fn fusion_fbp(seed: u64) -> Result<GradCheckReport> {
    let align = alignment(&[3, 2], &[3, 4], 3, 4)?;
    check_op("fbp_gate", seed, LOSS_TOLERANCE, &[&[2, 3, 4], &[2, 4, 4], &[4, 6], &[4, 6], &[3, 4]], move |t, v| {
        let a = t.constant(align.clone());
        Ok(fbp_gate(t, v[0], v[1], a, v[2], v[3], v[4], 2, true)?.gate)
    })
}

fn fusion_fuse(seed: u64) -> Result<GradCheckReport> {
    check_op("fuse", seed, LOSS_TOLERANCE, &[&[2usize, 3, 4][..]; 4], |t, v| fuse(t, v[0], v[1], v[2], v[3]))
}

fn fusion_predict(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let head = PredictionHead::new(&mut store, "head", 4, 3, 2, &mut r)?;
    let x = uniform(&mut r, &[2, 3, 4], -2.0, 2.0);
    let wseed = r.random::<u64>();
    check_with_store("predict", &store, vec![x], EPS, LOSS_TOLERANCE, |t, p, v| {
        let y = head.forward(t, p, v[0], &[3, 1])?;
        project(t, y, &mut rng(wseed))
    })
}

/// Configuration of the end-to-end check: two samples, up to four steps,
/// `d_model = 8`.
pub fn tiny_model_config(task: Task) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 8,
            max_len: PerModality::new(4, 4, 4),
            input_dims: PerModality::new(3, 4, 5),
            dropout: 0.0,
        },
        adversary: AdversaryConfig {
            d_hidden: 4,
            invariant_path: GradientPath::Identity,
            ..Default::default()
        },
        fusion: FusionConfig {
            d_fbp: 2,
            pool_window: 2,
            ..Default::default()
        },
        task,
        ..Default::default()
    }
}

pub fn tiny_batch(seed: u64) -> Result<Batch> {
    let synth = SynthConfig {
        n_samples: 2,
        dims: PerModality::new(3, 4, 5),
        lengths: PerModality::from_fn(|_| LengthRange { min: 2, max: 4 }),
        seed,
        ..Default::default()
    };
    let samples: Vec<Sample> = generate(&synth)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    Batch::collate(&refs, &PerModality::new(4, 4, 4))
}

fn full(seed: u64, task: Task) -> Result<GradCheckReport> {
    let cfg = tiny_model_config(task);
    let mut store = ParamStore::new();
    let model = SatiModel::new(&mut store, &cfg, &mut rng(seed))?;
    let batch = tiny_batch(seed)?;
    let label = match task {
        Task::Regression => "full_regression",
        Task::Classification => "full_classification",
    };
    check_with_store(label, &store, Vec::new(), COMPOSITE_EPS, FULL_TOLERANCE, |t, p, _| {
        let fwd = model.forward(t, p, &batch, &mut Dropout::off())?;
        Ok(model.objective(t, p, &fwd, &batch.labels)?.total)
    })
}

fn full_regression(seed: u64) -> Result<GradCheckReport> {
    full(seed, Task::Regression)
}

fn full_classification(seed: u64) -> Result<GradCheckReport> {
    full(seed, Task::Classification)
}

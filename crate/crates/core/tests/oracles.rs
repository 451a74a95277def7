//! Hand-computed references for the losses, attention and fusion operations.

use rand::Rng as _;
use sati::adversary::{aam_loss, aam_loss_value, cosine_logits, domain_loss, AdversaryConfig, Discriminator, GradientPath};
use sati::disentangle::{cmd_value, CmdConfig};
use sati::encoders::{DisentangledReps, EncoderConfig, TransformerEncoder};
use sati::fusion::{cross_attention, fbp_gate, fuse, total_loss, LossTerms, LossWeights, PredictionHead};
use sati::modality::{Modality, PerModality};
use sati::nn::Dropout;
use sati::numcore::{rng, BoundParams, ParamStore, Rng, Tape, Tensor};
use sati::temporal::jsd;

fn random(r: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
}

fn unit_rows(r: &mut Rng, n: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| v / norm));
    }
    Tensor::new([n, d], data).unwrap()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- CMD ----

fn cmd_reference(x: &[Vec<f64>], y: &[Vec<f64>], order: u32, span: f64) -> f64 {
    let d = x[0].len();
    let mean = |s: &[Vec<f64>], j: usize| s.iter().map(|r| r[j]).sum::<f64>() / s.len() as f64;
    let (mx, my): (Vec<f64>, Vec<f64>) = ((0..d).map(|j| mean(x, j)).collect(), (0..d).map(|j| mean(y, j)).collect());
    let mut total = (0..d).map(|j| (mx[j] - my[j]).powi(2)).sum::<f64>().sqrt() / span;
    for k in 2..=order as i32 {
        let mut sq = 0.0;
        for j in 0..d {
            let cx = x.iter().map(|r| (r[j] - mx[j]).powi(k)).sum::<f64>() / x.len() as f64;
            let cy = y.iter().map(|r| (r[j] - my[j]).powi(k)).sum::<f64>() / y.len() as f64;
            sq += (cx - cy).powi(2);
        }
        total += sq.sqrt() / span.powi(k);
    }
    total
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

#[test]
fn cmd_of_identical_samples_is_zero() {
    let mut r = rng(1);
    let x = random(&mut r, &[6, 3]);
    assert_eq!(cmd_value(&x, &x, &CmdConfig::default()).unwrap(), 0.0);
}

#[test]
fn cmd_matches_moment_reference() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let x = random(&mut r, &[4, 3]).scale(0.4);
        let y = random(&mut r, &[7, 3]).scale(0.4);
        let raw = CmdConfig {
            squash: false,
            ..Default::default()
        };
        let got = cmd_value(&x, &y, &raw).unwrap();
        let want = cmd_reference(&rows(&x), &rows(&y), 5, 2.0);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");

        let squashed = cmd_value(&x, &y, &CmdConfig::default()).unwrap();
        let tx = x.map(f64::tanh);
        let ty = y.map(f64::tanh);
        let want = cmd_reference(&rows(&tx), &rows(&ty), 5, 2.0);
        assert!((squashed - want).abs() < 1e-12);
    }
}

#[test]
fn cmd_is_symmetric_and_non_negative() {
    let mut r = rng(2);
    let x = random(&mut r, &[5, 4]);
    let y = random(&mut r, &[3, 4]);
    let cfg = CmdConfig::default();
    let (a, b) = (cmd_value(&x, &y, &cfg).unwrap(), cmd_value(&y, &x, &cfg).unwrap());
    assert!(a > 0.0);
    assert!((a - b).abs() < 1e-14);
}

// ---- JSD ----

#[test]
fn jsd_identities() {
    let p = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]);
    assert_eq!(jsd(&p, &p).unwrap(), 0.0);
    let a = Tensor::vector(vec![0.5, 0.5, 0.0, 0.0]);
    let b = Tensor::vector(vec![0.0, 0.0, 0.25, 0.75]);
    assert!((jsd(&a, &b).unwrap() - std::f64::consts::LN_2).abs() <= 1e-12);
}

#[test]
fn jsd_matches_reference_and_is_symmetric() {
    let mut r = rng(3);
    for _ in 0..20 {
        let mut draw = || {
            let v: Vec<f64> = (0..5).map(|_| r.random_range(0.01..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let (p, q) = (draw(), draw());
        let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
        let kl = |a: &[f64]| a.iter().zip(&m).map(|(x, y)| x * (x / y).ln()).sum::<f64>();
        let want = 0.5 * kl(&p) + 0.5 * kl(&q);
        let (pt, qt) = (Tensor::vector(p.clone()), Tensor::vector(q.clone()));
        let got = jsd(&pt, &qt).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - jsd(&qt, &pt).unwrap()).abs() < 1e-15);
        assert!((0.0..=std::f64::consts::LN_2).contains(&got));
    }
}

// ---- Angular margin loss ----

#[test]
fn aam_without_margin_is_scaled_cosine_cross_entropy() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let e = unit_rows(&mut r, 6, 4);
        let w = random(&mut r, &[4, 3]);
        let labels: Vec<usize> = (0..6).map(|_| r.random_range(0..3)).collect();
        let scale = r.random_range(1.0..30.0);
        let got = aam_loss_value(&e, &labels, &w, scale, 0.0).unwrap();

        let mut want = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            let logits: Vec<f64> = (0..3)
                .map(|m| {
                    let col: Vec<f64> = (0..4).map(|j| w.at(&[j, m])).collect();
                    let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                    scale * col.iter().zip(e.row(b)).map(|(c, x)| c * x).sum::<f64>() / norm
                })
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
            want += lse - logits[y];
        }
        want /= labels.len() as f64;
        assert!((got - want).abs() < 1e-10, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn aam_aligned_two_class_value() {
    let e = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
    let w = Tensor::eye(2);
    let mut tape = Tape::new();
    let (ev, wv) = (tape.constant(e), tape.constant(w));
    let cos = cosine_logits(&mut tape, ev, wv).unwrap();
    let loss = aam_loss(&mut tape, cos, &[0], 1.0, 0.0).unwrap();
    let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    assert!((tape.value(loss).item() - want).abs() < 1e-12);
    assert!((want - 0.31326).abs() < 1e-5);
}

#[test]
fn aam_is_non_negative_and_grows_with_margin() {
    let mut r = rng(9);
    for _ in 0..20 {
        let e = unit_rows(&mut r, 5, 3);
        let w = random(&mut r, &[3, 3]);
        let labels: Vec<usize> = (0..5).map(|_| r.random_range(0..3)).collect();
        let mut last = 0.0;
        for tau in [0.0, 0.1, 0.2, 0.35, 0.5] {
            let l = aam_loss_value(&e, &labels, &w, 30.0, tau).unwrap();
            assert!(l >= 0.0 && l.is_finite());
            assert!(l >= last - 1e-12);
            last = l;
        }
    }
}

#[test]
fn aam_exact_alignment_is_finite_with_finite_gradient() {
    let mut tape = Tape::new();
    let e = tape.var(Tensor::new([2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap());
    let w = tape.var(Tensor::eye(2));
    let cos = cosine_logits(&mut tape, e, w).unwrap();
    let loss = aam_loss(&mut tape, cos, &[0, 0], 30.0, 0.35).unwrap();
    assert!(tape.value(loss).item().is_finite());
    let g = tape.backward(loss).unwrap();
    assert!(g.get(e).unwrap().is_finite());
    assert!(g.get(w).unwrap().is_finite());
}

// ---- Gradient reversal ----

#[test]
fn grl_forward_identity_and_backward_scaling() {
    let mut r = rng(4);
    let x = random(&mut r, &[3, 4]);
    let g = random(&mut r, &[3, 4]);
    for lambda in [0.0, 0.5, 1.0, 2.25] {
        let mut tape = Tape::new();
        let xv = tape.var(x.clone());
        let y = tape.grl(xv, lambda);
        assert_eq!(tape.value(y).data(), x.data());
        let gv = tape.constant(g.clone());
        let prod = tape.mul(y, gv).unwrap();
        let s = tape.sum(prod);
        let grads = tape.backward(s).unwrap();
        let want: Vec<f64> = g.data().iter().map(|v| -lambda * v).collect();
        assert_eq!(grads.get(xv).unwrap().data(), &want[..]);
    }
}

#[test]
fn domain_loss_gradient_flips_under_reversal() {
    let mut r = rng(5);
    let mut store = ParamStore::new();
    let base = AdversaryConfig {
        d_hidden: 4,
        lambda: 0.7,
        ..Default::default()
    };
    let disc = Discriminator::new(&mut store, 3, &base, &mut r).unwrap();
    let lengths = PerModality::new(vec![2, 3], vec![3, 1], vec![3, 3]);
    let reps: Vec<Tensor> = (0..6).map(|_| random(&mut r, &[2, 3, 3])).collect();
    let grads_for = |path: GradientPath| {
        let cfg = AdversaryConfig {
            invariant_path: path,
            ..base.clone()
        };
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, &store, true);
        let v: Vec<_> = reps.iter().map(|t| tape.var(t.clone())).collect();
        let dr = DisentangledReps {
            invariant: PerModality::new(v[0], v[1], v[2]),
            specific: PerModality::new(v[3], v[4], v[5]),
        };
        let loss = domain_loss(&mut tape, &p, &disc, &dr, &lengths, &cfg).unwrap();
        let g = tape.backward(loss.total).unwrap();
        v.iter()
            .zip(&reps)
            .map(|(&x, t)| g.get(x).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect::<Vec<_>>()
    };
    let plain = grads_for(GradientPath::Identity);
    let reversed = grads_for(GradientPath::Reversed);
    for i in 0..3 {
        let want = plain[i].scale(-0.7);
        assert!(max_diff(reversed[i].data(), want.data()) < 1e-15);
    }
    for i in 3..6 {
        assert_eq!(reversed[i].data(), plain[i].data());
    }
    let detached = grads_for(GradientPath::Detached);
    assert!(detached[..3].iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn discriminator_embedding_is_pool_affine_normalize() {
    let mut r = rng(6);
    let mut store = ParamStore::new();
    let cfg = AdversaryConfig {
        d_hidden: 5,
        ..Default::default()
    };
    let disc = Discriminator::new(&mut store, 3, &cfg, &mut r).unwrap();
    // Nonzero bias so the affine step is tested too.
    let bias = disc.proj.bias.unwrap();
    store.set(bias, random(&mut r, &[5])).unwrap();
    let h = random(&mut r, &[2, 4, 3]);
    let lengths = [4, 2];
    let mut tape = Tape::new();
    let p = BoundParams::bind(&mut tape, &store, false);
    let hv = tape.constant(h.clone());
    let e = disc.embed(&mut tape, &p, hv, &lengths).unwrap();
    let got = tape.value(e).clone();
    let w = store.get(disc.proj.weight);
    let b = store.get(bias);
    for (bi, &len) in lengths.iter().enumerate() {
        let pooled: Vec<f64> = (0..3).map(|j| (0..len).map(|t| h.at(&[bi, t, j])).sum::<f64>() / len as f64).collect();
        let z: Vec<f64> = (0..5).map(|o| b.data()[o] + (0..3).map(|j| pooled[j] * w.at(&[j, o])).sum::<f64>()).collect();
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let want: Vec<f64> = z.iter().map(|v| v / norm).collect();
        assert!(max_diff(got.row(bi), &want) < 1e-12);
        let n: f64 = got.row(bi).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

// ---- Self-attention ----

#[test]
fn attention_rows_normalize_and_mask() {
    let cfg = EncoderConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 8,
        ..Default::default()
    };
    let mut r = rng(7);
    let mut store = ParamStore::new();
    let enc = TransformerEncoder::new(&mut store, "enc", 3, &cfg, &mut r).unwrap();
    let lengths = [5, 2, 1];
    let x = random(&mut r, &[3, 5, 3]);
    let mut tape = Tape::new();
    let p = BoundParams::bind(&mut tape, &store, false);
    let xv = tape.constant(x.clone());
    let out = enc.forward(&mut tape, &p, xv, &lengths, &mut Dropout::off()).unwrap();
    for w in &out.attention {
        let w = tape.value(*w);
        let l = 5;
        for bh in 0..3 * 2 {
            let len = lengths[bh / 2];
            for q in 0..l {
                let row = &w.data()[(bh * l + q) * l..(bh * l + q + 1) * l];
                let valid: f64 = row[..len].iter().sum();
                assert!((valid - 1.0).abs() <= 1e-12);
                assert!(row[len..].iter().all(|&v| v < 1e-30));
            }
        }
    }

    // Padding content must not leak into valid steps, bit for bit.
    let mut perturbed = x.clone();
    for (b, &len) in lengths.iter().enumerate() {
        for t in len..5 {
            for j in 0..3 {
                perturbed.data_mut()[(b * 5 + t) * 3 + j] = 1e3 * (j as f64 + 1.0);
            }
        }
    }
    let pv = tape.constant(perturbed);
    let out2 = enc.forward(&mut tape, &p, pv, &lengths, &mut Dropout::off()).unwrap();
    let (a, b) = (tape.value(out.output), tape.value(out2.output));
    for (bi, &len) in lengths.iter().enumerate() {
        for t in 0..len {
            for j in 0..8 {
                assert_eq!(a.at(&[bi, t, j]).to_bits(), b.at(&[bi, t, j]).to_bits());
            }
        }
    }
}

// ---- Cross-attention ----

#[test]
fn cross_attention_matches_unrolled_reference() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let q = random(&mut r, &[1, 3, 4]);
        let kv = random(&mut r, &[1, 2, 4]);
        let mut tape = Tape::new();
        let (qv, kvv) = (tape.constant(q.clone()), tape.constant(kv.clone()));
        let (f, w) = cross_attention(&mut tape, qv, kvv, &[2]).unwrap();
        let (f, w) = (tape.value(f).clone(), tape.value(w).clone());
        for t in 0..3 {
            let s: Vec<f64> = (0..2)
                .map(|k| (0..4).map(|j| q.at(&[0, t, j]) * kv.at(&[0, k, j])).sum::<f64>() / 2.0)
                .collect();
            let e0 = 1.0 / (1.0 + (s[1] - s[0]).exp());
            let e1 = 1.0 - e0;
            assert!((w.at(&[0, t, 0]) - e0).abs() < 1e-10);
            assert!((w.at(&[0, t, 0]) + w.at(&[0, t, 1]) - 1.0).abs() <= 1e-12);
            for j in 0..4 {
                let want = e0 * kv.at(&[0, 0, j]) + e1 * kv.at(&[0, 1, j]);
                assert!((f.at(&[0, t, j]) - want).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn cross_attention_identical_keys_average_values() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::new([1, 2, 2], vec![1.0, 2.0, -3.0, 0.5]).unwrap());
    let kv = tape.constant(Tensor::new([1, 3, 2], vec![0.4, -1.0, 0.4, -1.0, 9.0, 9.0]).unwrap());
    let (f, _) = cross_attention(&mut tape, q, kv, &[2]).unwrap();
    assert_eq!(tape.value(f).data(), &[0.4, -1.0, 0.4, -1.0]);
}

// ---- FBP gate ----

#[test]
fn fbp_gate_matches_five_step_reference() {
    let (lt, d, k, dfbp) = (3, 4, 2, 3);
    for seed in 0..10 {
        let mut r = rng(seed);
        let it = random(&mut r, &[1, lt, d]);
        let ii = random(&mut r, &[1, lt, d]);
        let wq = random(&mut r, &[d, dfbp * k]);
        let wk = random(&mut r, &[d, dfbp * k]);
        let wn = random(&mut r, &[dfbp, d]);
        let align = Tensor::new([1, lt, lt], Tensor::eye(lt).into_data()).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<_> = [&it, &ii, &align, &wq, &wk, &wn].iter().map(|t| tape.constant((*t).clone())).collect();
        let tr = fbp_gate(&mut tape, vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], k, true).unwrap();
        let gate = tape.value(tr.gate).clone();
        let f_norm = tape.value(tr.f_norm).clone();
        for t in 0..lt {
            let proj = |x: &Tensor, w: &Tensor| -> Vec<f64> {
                (0..dfbp * k).map(|o| (0..d).map(|j| x.at(&[0, t, j]) * w.at(&[j, o])).sum()).collect()
            };
            let (a, b) = (proj(&it, &wq), proj(&ii, &wk));
            let mul: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
            let sp: Vec<f64> = (0..dfbp).map(|g| mul[g * k..(g + 1) * k].iter().sum()).collect();
            let n = sp.iter().map(|v| v * v).sum::<f64>().sqrt();
            let fnorm: Vec<f64> = sp.iter().map(|v| v / n).collect();
            let g: Vec<f64> = (0..d)
                .map(|o| {
                    let z: f64 = (0..dfbp).map(|j| fnorm[j] * wn.at(&[j, o])).sum();
                    1.0 / (1.0 + (-z).exp())
                })
                .collect();
            assert!(max_diff(&gate.data()[t * d..(t + 1) * d], &g) < 1e-10);
            let rn: f64 = f_norm.data()[t * dfbp..(t + 1) * dfbp].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((rn - 1.0).abs() <= 1e-12);
            assert!(g.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

#[test]
fn fbp_gate_on_zero_inputs_is_one_half() {
    let mut r = rng(11);
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros([1, 2, 4]));
    let align = tape.constant(Tensor::new([1, 2, 2], Tensor::eye(2).into_data()).unwrap());
    let wq = tape.constant(random(&mut r, &[4, 4]));
    let wk = tape.constant(random(&mut r, &[4, 4]));
    let wn = tape.constant(random(&mut r, &[2, 4]));
    let tr = fbp_gate(&mut tape, z, z, align, wq, wk, wn, 2, true).unwrap();
    assert!(tape.value(tr.f_norm).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(tr.gate).data().iter().all(|&v| v == 0.5));
}

#[test]
fn fbp_gate_window_one_is_normalized_projection() {
    let mut r = rng(12);
    let it = random(&mut r, &[1, 2, 3]);
    let wq = random(&mut r, &[3, 3]);
    let ones = Tensor::ones([1, 2, 3]);
    let wk = Tensor::eye(3);
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(it.clone()), tape.constant(ones));
    let align = tape.constant(Tensor::new([1, 2, 2], Tensor::eye(2).into_data()).unwrap());
    let (q, k) = (tape.constant(wq.clone()), tape.constant(wk));
    let wn = tape.constant(Tensor::eye(3));
    let tr = fbp_gate(&mut tape, a, b, align, q, k, wn, 1, false).unwrap();
    let f_mul = tape.value(tr.f_mul).clone();
    assert_eq!(tape.value(tr.f_sp).data(), f_mul.data());
    let got = tape.value(tr.gate).clone();
    for t in 0..2 {
        let p: Vec<f64> = (0..3).map(|o| (0..3).map(|j| it.at(&[0, t, j]) * wq.at(&[j, o])).sum()).collect();
        let n = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let want: Vec<f64> = p.iter().map(|v| v / n).collect();
        assert!(max_diff(&got.data()[t * 3..(t + 1) * 3], &want) < 1e-12);
    }
}

// ---- Fuse and predict ----

#[test]
fn fuse_cases() {
    let mut r = rng(13);
    let fa = random(&mut r, &[2, 3, 4]);
    let fv = random(&mut r, &[2, 3, 4]);
    let ga = random(&mut r, &[2, 3, 4]);
    let gv = random(&mut r, &[2, 3, 4]);
    let mut tape = Tape::new();
    let [fa_v, fv_v, ga_v, gv_v] = [&fa, &fv, &ga, &gv].map(|t| tape.constant(t.clone()));
    let ones = tape.constant(Tensor::ones([2, 3, 4]));
    let zeros = tape.constant(Tensor::zeros([2, 3, 4]));

    let plain = fuse(&mut tape, ones, ones, fa_v, fv_v).unwrap();
    let cat = tape.concat(&[fa_v, fv_v], 2).unwrap();
    assert_eq!(tape.value(plain).data(), tape.value(cat).data());

    let zero = fuse(&mut tape, zeros, zeros, fa_v, fv_v).unwrap();
    assert_eq!(tape.value(zero).shape(), &[2, 3, 8]);
    assert!(tape.value(zero).data().iter().all(|&v| v == 0.0));

    let got = fuse(&mut tape, ga_v, gv_v, fa_v, fv_v).unwrap();
    let got = tape.value(got);
    for b in 0..2 {
        for t in 0..3 {
            for j in 0..4 {
                assert_eq!(got.at(&[b, t, j]), ga.at(&[b, t, j]) * fa.at(&[b, t, j]));
                assert_eq!(got.at(&[b, t, 4 + j]), gv.at(&[b, t, j]) * fv.at(&[b, t, j]));
            }
        }
    }
}

#[test]
fn prediction_head_matches_hand_mlp_and_ignores_padding() {
    let mut r = rng(14);
    let mut store = ParamStore::new();
    let head = PredictionHead::new(&mut store, "head", 1, 1, 1, &mut r).unwrap();
    store.set(head.l1.weight, Tensor::new([1, 1], vec![1.0]).unwrap()).unwrap();
    store.set(head.l1.bias.unwrap(), Tensor::vector(vec![0.0])).unwrap();
    store.set(head.l2.weight, Tensor::new([1, 1], vec![2.0]).unwrap()).unwrap();
    store.set(head.l2.bias.unwrap(), Tensor::vector(vec![-0.5])).unwrap();
    let x = Tensor::new([2, 3, 1], vec![0.3, 0.9, 100.0, -1.2, 55.0, -55.0]).unwrap();
    let lengths = [2, 1];
    let mut tape = Tape::new();
    let p = BoundParams::bind(&mut tape, &store, false);
    let xv = tape.constant(x);
    let y = head.forward(&mut tape, &p, xv, &lengths).unwrap();
    let y = tape.value(y);
    assert!((y.data()[0] - (2.0 * gelu(0.6) - 0.5)).abs() < 1e-14);
    assert!((y.data()[1] - (2.0 * gelu(-1.2) - 0.5)).abs() < 1e-14);

    let mut zero_store = ParamStore::new();
    let zhead = PredictionHead::new(&mut zero_store, "head", 4, 3, 1, &mut r).unwrap();
    for id in [zhead.l1.weight, zhead.l2.weight] {
        let shape = zero_store.get(id).shape().to_vec();
        zero_store.set(id, Tensor::zeros(shape)).unwrap();
    }
    let mut tape = Tape::new();
    let p = BoundParams::bind(&mut tape, &zero_store, false);
    let xz = tape.constant(Tensor::zeros([2, 3, 4]));
    let out = zhead.forward(&mut tape, &p, xz, &[3, 1]).unwrap();
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
}

// ---- Total loss ----

#[test]
fn total_loss_is_the_weighted_sum() {
    let mut r = rng(15);
    for _ in 0..20 {
        let parts: Vec<f64> = (0..4).map(|_| r.random_range(0.0..5.0)).collect();
        let w = LossWeights {
            alpha_w: r.random_range(0.0..1.0),
            beta: r.random_range(0.0..1.0),
            gamma: r.random_range(0.0..1.0),
        };
        let mut tape = Tape::new();
        let v: Vec<_> = parts.iter().map(|&x| tape.constant(Tensor::scalar(x))).collect();
        let terms = LossTerms {
            task: v[0],
            con: v[1],
            ti: v[2],
            dom: Some(v[3]),
        };
        let (total, bd) = total_loss(&mut tape, &terms, &w).unwrap();
        let want = parts[0] + w.alpha_w * parts[1] + w.beta * parts[2] + w.gamma * parts[3];
        assert!((tape.value(total).item() - want).abs() < 1e-12);
        assert_eq!(bd.total, tape.value(total).item());
        assert_eq!((bd.task, bd.con, bd.ti, bd.dom), (parts[0], parts[1], parts[2], parts[3]));

        let zero = LossWeights {
            alpha_w: 0.0,
            beta: 0.0,
            gamma: 0.0,
        };
        let (t0, _) = total_loss(&mut tape, &terms, &zero).unwrap();
        assert_eq!(tape.value(t0).item(), parts[0]);

        let doubled = LossWeights { beta: 2.0 * w.beta, ..w };
        let (t2, _) = total_loss(&mut tape, &terms, &doubled).unwrap();
        let diff = tape.value(t2).item() - tape.value(total).item();
        assert!((diff - w.beta * parts[2]).abs() < 1e-12);
    }
}

#[test]
fn modality_labels_follow_discriminator_order() {
    assert_eq!(Modality::ALL.map(|m| m.label()), [0, 1, 2]);
}

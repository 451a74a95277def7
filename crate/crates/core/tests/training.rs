//! Optimization sanity properties, ablation semantics, determinism and
//! checkpoints.

use rand::Rng as _;
use sati::adversary::{aam_loss, AdversaryConfig, Discriminator, GradientPath, DISCRIMINATOR_PREFIX};
use sati::data::{generate, LengthRange, Sample, SynthConfig};
use sati::disentangle::{consistency_loss, CmdConfig};
use sati::harness::experiments::run;
use sati::harness::gradsuite::{tiny_batch, tiny_model_config};
use sati::harness::train::{evaluate, init_model, load_checkpoint, save_checkpoint, subset, train, TrainConfig};
use sati::model::{SatiModel, Task};
use sati::modality::PerModality;
use sati::nn::Dropout;
use sati::numcore::{rng, Adam, AdamConfig, BoundParams, ParamStore, Rng, Tape, Tensor};
use sati::temporal::{temporal_invariance_loss, FrameMapping};

fn random(r: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
}

fn adam(store: &ParamStore, lr: f64) -> Adam {
    Adam::new(
        AdamConfig {
            lr,
            ..Default::default()
        },
        store.len(),
    )
}

/// Runs `steps` Adam steps on the free parameters in `store` and returns the
/// first and last loss.
fn minimize(store: &mut ParamStore, steps: usize, lr: f64, mut f: impl FnMut(&mut Tape, &BoundParams) -> sati::numcore::Var) -> (f64, f64) {
    let mut opt = adam(store, lr);
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..steps {
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, store, true);
        let loss = f(&mut tape, &p);
        last = tape.value(loss).item();
        first.get_or_insert(last);
        let mut g = tape.backward(loss).unwrap();
        opt.step(store, &p.collect(&mut g));
    }
    (first.unwrap(), last)
}

#[test]
fn consistency_loss_is_minimizable() {
    let mut r = rng(1);
    let mut store = ParamStore::new();
    let ids: Vec<_> = ["a", "v", "t"]
        .iter()
        .map(|n| store.insert(*n, random(&mut r, &[8, 16]).scale(0.5)).unwrap())
        .collect();
    let cfg = CmdConfig::default();
    let (start, end) = minimize(&mut store, 200, 0.02, |t, p| {
        consistency_loss(t, p.var(ids[0]), p.var(ids[1]), p.var(ids[2]), &cfg).unwrap()
    });
    assert!(end < 0.1 * start, "{start} -> {end}");
}

#[test]
fn temporal_loss_is_minimizable() {
    let mut r = rng(2);
    let mut store = ParamStore::new();
    let id = store.insert("r", random(&mut r, &[1, 6, 8])).unwrap();
    let (start, end) = minimize(&mut store, 200, 0.05, |t, p| {
        temporal_invariance_loss(t, p.var(id), &[6], &FrameMapping::Softmax).unwrap().loss
    });
    assert!(end <= 0.1 * start, "{start} -> {end}");
}

#[test]
fn temporal_loss_ignores_padding() {
    let mut r = rng(3);
    let a = random(&mut r, &[2, 5, 4]);
    let mut b = a.clone();
    let lengths = [3, 5];
    for t in 3..5 {
        for j in 0..4 {
            b.data_mut()[t * 4 + j] = r.random_range(-50.0..50.0);
        }
    }
    let eval = |x: &Tensor| {
        let mut tape = Tape::new();
        let v = tape.var(x.clone());
        let out = temporal_invariance_loss(&mut tape, v, &lengths, &FrameMapping::Softmax).unwrap();
        let g = tape.backward(out.loss).unwrap();
        (tape.value(out.loss).item(), g.get(v).unwrap().clone())
    };
    let (la, ga) = eval(&a);
    let (lb, gb) = eval(&b);
    assert_eq!(la.to_bits(), lb.to_bits());
    for t in 0..3 {
        for j in 0..4 {
            assert_eq!(ga.at(&[0, t, j]).to_bits(), gb.at(&[0, t, j]).to_bits());
        }
    }
    assert!(ga.data()[12..20].iter().chain(&gb.data()[12..20]).all(|&v| v == 0.0));
    assert_eq!(ga.data()[20..], gb.data()[20..]);
}

#[test]
fn single_frame_clips_are_skipped() {
    let mut tape = Tape::new();
    let v = tape.var(Tensor::ones([2, 3, 4]));
    let out = temporal_invariance_loss(&mut tape, v, &[1, 1], &FrameMapping::Softmax).unwrap();
    assert_eq!(out.skipped, 2);
    assert_eq!(tape.value(out.loss).item(), 0.0);
}

#[test]
fn discriminator_separates_frozen_clusters() {
    let mut r = rng(4);
    let d = 16;
    let (per_class, len) = (20, 3);
    let centers: Vec<Tensor> = (0..3).map(|_| random(&mut r, &[d])).collect();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for _ in 0..len {
                data.extend(center.data().iter().map(|v| v + r.random_range(-0.5..0.5)));
            }
            labels.push(c);
        }
    }
    let n = labels.len();
    let reps = Tensor::new([n, len, d], data).unwrap();
    let lengths = vec![len; n];
    let cfg = AdversaryConfig::default();
    let mut store = ParamStore::new();
    let disc = Discriminator::new(&mut store, d, &cfg, &mut r).unwrap();
    let accuracy = |store: &ParamStore| {
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, store, false);
        let h = tape.constant(reps.clone());
        let e = disc.embed(&mut tape, &p, h, &lengths).unwrap();
        let cos = disc.cosines(&mut tape, &p, e).unwrap();
        let cos = tape.value(cos);
        let hits = (0..n)
            .filter(|&b| {
                let row = cos.row(b);
                (0..3).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap() == labels[b]
            })
            .count();
        hits as f64 / n as f64
    };
    let mut opt = adam(&store, 1e-2);
    let mut reached = None;
    for step in 1..=300 {
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, &store, true);
        let h = tape.constant(reps.clone());
        let e = disc.embed(&mut tape, &p, h, &lengths).unwrap();
        let cos = disc.cosines(&mut tape, &p, e).unwrap();
        let loss = aam_loss(&mut tape, cos, &labels, cfg.scale, cfg.margin).unwrap();
        let mut g = tape.backward(loss).unwrap();
        opt.step(&mut store, &p.collect(&mut g));
        if accuracy(&store) >= 0.99 {
            reached = Some(step);
            break;
        }
    }
    assert!(reached.is_some(), "accuracy {} after 300 steps", accuracy(&store));
}

/// Ten Adam steps on tiny batches; returns the loss trajectory and the final
/// parameters.
fn trajectory(cfg: &sati::model::ModelConfig, seed: u64) -> (Vec<f64>, ParamStore) {
    let mut store = ParamStore::new();
    let model = SatiModel::new(&mut store, cfg, &mut rng(seed)).unwrap();
    let mut opt = adam(&store, 1e-3);
    let mut losses = Vec::new();
    for step in 0..10 {
        let batch = tiny_batch(seed + step).unwrap();
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, &store, true);
        let fwd = model.forward(&mut tape, &p, &batch, &mut Dropout::off()).unwrap();
        let obj = model.objective(&mut tape, &p, &fwd, &batch.labels).unwrap();
        losses.push(tape.value(obj.total).item());
        let mut g = tape.backward(obj.total).unwrap();
        opt.step(&mut store, &p.collect(&mut g));
    }
    (losses, store)
}

#[test]
fn zero_reversal_strength_matches_a_detached_path() {
    let mut reversed = tiny_model_config(Task::Regression);
    reversed.adversary.invariant_path = GradientPath::Reversed;
    reversed.adversary.lambda = 0.0;
    let mut detached = reversed.clone();
    detached.adversary.invariant_path = GradientPath::Detached;
    let (la, sa) = trajectory(&reversed, 7);
    let (lb, sb) = trajectory(&detached, 7);
    assert_eq!(la, lb);
    for ((_, name, a), (_, _, b)) in sa.iter().zip(sb.iter()) {
        assert_eq!(a.data(), b.data(), "{name}");
    }
    let mut live = reversed.clone();
    live.adversary.lambda = 1.0;
    let (lc, _) = trajectory(&live, 7);
    assert_ne!(la, lc);
}

#[test]
fn ungated_fusion_is_plain_concatenation() {
    let mut cfg = tiny_model_config(Task::Regression);
    cfg.ablation.no_gm = true;
    let mut store = ParamStore::new();
    let model = SatiModel::new(&mut store, &cfg, &mut rng(8)).unwrap();
    let batch = tiny_batch(8).unwrap();
    let mut tape = Tape::new();
    let p = BoundParams::bind(&mut tape, &store, false);
    let fwd = model.forward(&mut tape, &p, &batch, &mut Dropout::off()).unwrap();
    assert!(fwd.fusion.gate_a.is_none() && fwd.fusion.gate_v.is_none());
    let (a, v, fused) = (
        tape.value(fwd.fusion.f_ta),
        tape.value(fwd.fusion.f_tv),
        tape.value(fwd.fusion.fused),
    );
    let d = a.shape()[2];
    assert_eq!(fused.shape()[2], 2 * d);
    let rows = fused.len() / (2 * d);
    for row in 0..rows {
        let got = &fused.data()[row * 2 * d..(row + 1) * 2 * d];
        assert_eq!(&got[..d], &a.data()[row * d..(row + 1) * d]);
        assert_eq!(&got[d..], &v.data()[row * d..(row + 1) * d]);
    }
}

fn tiny_samples(n: usize, seed: u64) -> Vec<Sample> {
    generate(&SynthConfig {
        n_samples: n,
        dims: PerModality::new(3, 4, 5),
        lengths: PerModality::from_fn(|_| LengthRange { min: 2, max: 4 }),
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn tiny_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        model: tiny_model_config(Task::Regression),
        epochs: 3,
        batch_size: 8,
        lr: 3e-3,
        seed,
        eval_batch_size: 16,
        ..Default::default()
    }
}

#[test]
fn without_adversary_the_discriminator_never_moves() {
    let mut cfg = tiny_train_config(9);
    cfg.model.adversary.invariant_path = GradientPath::Reversed;
    cfg.model.ablation.no_al = true;
    let samples = tiny_samples(40, 9);
    let trained = train(&cfg, &samples).unwrap();
    let (_, init) = init_model(&cfg).unwrap();
    let disc: Vec<_> = init.ids_with_prefix(DISCRIMINATOR_PREFIX).collect();
    assert!(!disc.is_empty());
    for id in disc {
        assert_eq!(init.get(id).data(), trained.store.get(id).data(), "{}", init.name(id));
    }
    let others = init.iter().filter(|(_, n, _)| !n.starts_with(DISCRIMINATOR_PREFIX));
    assert!(others.into_iter().any(|(id, _, t)| t.data() != trained.store.get(id).data()));
}

#[test]
fn with_adversary_the_discriminator_trains() {
    let mut cfg = tiny_train_config(9);
    cfg.model.adversary.invariant_path = GradientPath::Reversed;
    let samples = tiny_samples(40, 9);
    let trained = train(&cfg, &samples).unwrap();
    let (_, init) = init_model(&cfg).unwrap();
    assert!(init
        .ids_with_prefix(DISCRIMINATOR_PREFIX)
        .any(|id| init.get(id).data() != trained.store.get(id).data()));
}

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn training_is_deterministic_down_to_checkpoint_bytes() {
    let cfg = tiny_train_config(10);
    let samples = tiny_samples(60, 10);
    let (a, ra) = run(&cfg, &samples).unwrap();
    let (b, rb) = run(&cfg, &samples).unwrap();
    assert!(ra.test.same_numbers(&rb.test));
    assert_eq!(ra.history, rb.history);
    assert_eq!(ra.analysis, rb.analysis);
    assert_eq!(ra.best_epoch, rb.best_epoch);
    let tmp = tempfile::tempdir().unwrap();
    let (da, db) = (tmp.path().join("a"), tmp.path().join("b"));
    save_checkpoint(&da, &cfg, &a).unwrap();
    save_checkpoint(&db, &cfg, &b).unwrap();
    assert_eq!(dir_bytes(&da), dir_bytes(&db));

    let (_, rc) = run(&tiny_train_config(11), &samples).unwrap();
    assert_ne!(ra.history, rc.history);
}

#[test]
fn checkpoint_round_trip_reproduces_evaluation() {
    let cfg = tiny_train_config(12);
    let samples = tiny_samples(60, 12);
    let trained = train(&cfg, &samples).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    save_checkpoint(tmp.path(), &cfg, &trained).unwrap();
    let (model, store, back) = load_checkpoint(tmp.path()).unwrap();
    assert_eq!(back, cfg);
    for ((_, name, a), (_, other, b)) in trained.store.iter().zip(store.iter()) {
        assert_eq!(name, other);
        assert_eq!(a.data(), b.data());
    }
    let test = subset(&samples, &trained.split.test);
    let before = evaluate(&trained.model, &trained.store, &test, 16).unwrap();
    let after = evaluate(&model, &store, &test, 16).unwrap();
    assert!(before.same_numbers(&after));
}

#[test]
fn corrupt_checkpoint_is_an_error() {
    let cfg = tiny_train_config(13);
    let trained = train(&cfg, &tiny_samples(30, 13)).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    save_checkpoint(tmp.path(), &cfg, &trained).unwrap();
    for (name, bytes) in dir_bytes(tmp.path()) {
        if !name.ends_with(".json") {
            std::fs::write(tmp.path().join(&name), &bytes[..bytes.len() / 2]).unwrap();
        }
    }
    assert!(load_checkpoint(tmp.path()).is_err());
}

#[test]
fn smoke_training_learns_something() {
    let cfg = TrainConfig {
        epochs: 6,
        ..tiny_train_config(14)
    };
    let trained = train(&cfg, &tiny_samples(120, 14)).unwrap();
    let first = trained.history.first().unwrap().train_loss.task;
    let last = trained.history.last().unwrap().train_loss.task;
    assert!(last < first, "{first} -> {last}");
    assert!(trained.history.iter().all(|h| h.train_loss.total.is_finite()));
}

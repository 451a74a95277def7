//! Tape gradients against central finite differences.

use proptest::prelude::*;
use sati::harness::gradsuite::{checks, run_scope, Scope, DEFAULT_SEEDS, EPS, OPS_TOLERANCE};
use sati::numcore::{compare_gradients, grad_check, Tensor};

fn assert_scope(scope: Scope) {
    let summaries = run_scope(scope, DEFAULT_SEEDS, 0).unwrap();
    assert_eq!(summaries.len(), checks(scope).len());
    for s in &summaries {
        assert_eq!(s.seeds, DEFAULT_SEEDS);
        let worst = s.failures.first().and_then(|r| r.worst()).map(|p| format!("{p:?}"));
        assert!(s.passed, "{} worst {:.3e}: {worst:?}", s.name, s.worst_rel_error);
    }
}

#[test]
fn primitive_gradients_match_over_twenty_seeds() {
    assert_scope(Scope::Ops);
}

#[test]
fn loss_and_fusion_gradients_match_over_twenty_seeds() {
    assert_scope(Scope::Losses);
}

fn quadratic(ps: &[Tensor]) -> sati::Result<f64> {
    Ok(ps[0].data().iter().map(|v| v * v).sum())
}

#[test]
fn a_wrong_gradient_is_caught_and_located() {
    let x = Tensor::new([2, 3], vec![0.3, -1.2, 0.8, 2.0, -0.4, 1.1]).unwrap();
    let mut wrong = x.scale(2.0);
    wrong.data_mut()[4] *= 1.01;
    let report = compare_gradients("quadratic", &["x".into()], &[x.clone()], &[wrong], EPS, OPS_TOLERANCE, quadratic).unwrap();
    assert!(!report.passed);
    let worst = report.worst().unwrap();
    assert_eq!(worst.worst_index, 4);
    assert!((worst.max_rel_error - 0.01 / 1.01).abs() < 1e-6);
    assert!(!within_roundoff(&report));

    let right = x.scale(2.0);
    let report = compare_gradients("quadratic", &["x".into()], &[x], &[right], EPS, OPS_TOLERANCE, quadratic).unwrap();
    assert!(report.passed, "{:?}", report.worst());
}

#[test]
fn a_sign_error_is_caught() {
    let x = Tensor::new([3], vec![0.5, -0.25, 1.5]).unwrap();
    let report = compare_gradients("quadratic", &["x".into()], &[x.clone()], &[x.scale(-2.0)], EPS, OPS_TOLERANCE, quadratic).unwrap();
    assert!(!report.passed);
    assert!(report.max_rel_error > 1.0);
}

fn tensor(shape: [usize; 2], values: Vec<f64>) -> Tensor {
    Tensor::new(shape, values).unwrap()
}

/// Every input is within tolerance, or its worst coordinate differs by less
/// than f64 roundoff at this step.
fn within_roundoff(report: &sati::numcore::GradCheckReport) -> bool {
    report
        .params
        .iter()
        .all(|p| p.max_rel_error < report.tolerance || (p.analytic - p.numeric).abs() < ROUNDOFF)
}

const ROUNDOFF: f64 = 1e-8;

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 32,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn op_checks_hold_for_arbitrary_seeds(seed in any::<u64>()) {
        for (name, check) in checks(Scope::Ops) {
            let report = check(seed).unwrap();
            prop_assert!(within_roundoff(&report), "{} seed {}: {:?}", name, seed, report.worst());
        }
    }

    #[test]
    fn loss_checks_hold_for_arbitrary_seeds(seed in any::<u64>()) {
        for (name, check) in checks(Scope::Losses) {
            let report = check(seed).unwrap();
            prop_assert!(within_roundoff(&report), "{} seed {}: {:?}", name, seed, report.worst());
        }
    }

    #[test]
    fn softmax_of_affine_map(
        x in prop::collection::vec(-2.0f64..2.0, 6),
        w in prop::collection::vec(-1.0f64..1.0, 12),
    ) {
        let params = [tensor([2, 3], x), tensor([3, 4], w)];
        let report = grad_check("softmax_affine", &params, EPS, OPS_TOLERANCE, |t, v| {
            let z = t.matmul(v[0], v[1])?;
            let p = t.softmax(z, 1)?;
            let q = t.powi(p, 2);
            Ok(t.sum(q))
        }).unwrap();
        prop_assert!(report.passed, "{:?}", report.worst());
    }
}

//! Safeguarded Anderson acceleration against plain damped iteration on affine maps.

mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use common::affine_benchmark;
use elogrid::anderson::{aa_solve, damped_solve, AaConfig, StepKind};
use elogrid::Result;

fn affine(a: DMatrix<f64>, b: DVector<f64>) -> impl FnMut(&DVector<f64>) -> Result<DVector<f64>> {
    move |x| Ok(&a * x + &b)
}

#[test]
fn scalar_map_beats_damped_iteration() {
    let cfg = AaConfig { tolerance: 1e-6, ..AaConfig::elo() };
    let map = |x: &DVector<f64>| Ok(x * 0.5 + DVector::from_element(1, 1.0));
    let (x, aa) = aa_solve(map, DVector::zeros(1), &cfg).unwrap();
    let (_, picard) = damped_solve(map, DVector::zeros(1), cfg.relaxation, cfg.tolerance, 1000).unwrap();
    assert!((x[0] - 2.0).abs() <= 1e-6);
    assert!(aa.iterations() < picard.iterations(), "{} vs {}", aa.iterations(), picard.iterations());
}

#[test]
fn affine_family_quarter_of_picard_iterations() {
    for (i, (a, b)) in affine_benchmark().into_iter().enumerate() {
        let n = b.len();
        let cfg = AaConfig { tolerance: 1e-6, ..AaConfig::elo() };
        let (x, aa) = aa_solve(affine(a.clone(), b.clone()), DVector::zeros(n), &cfg).unwrap();
        let (_, picard) = damped_solve(affine(a.clone(), b.clone()), DVector::zeros(n), cfg.relaxation, 1e-6, 10_000).unwrap();
        let exact = (DMatrix::identity(n, n) - &a).lu().solve(&b).unwrap();
        assert!((x - exact).norm() <= 1e-4, "case {i}");
        assert!(
            4 * aa.iterations() <= picard.iterations(),
            "case {i}: {} vs {}",
            aa.iterations(),
            picard.iterations()
        );
    }
}

#[test]
fn two_dimensional_contraction_at_095() {
    let a = DMatrix::from_row_slice(2, 2, &[0.95, 0.3, 0.0, 0.6]);
    let b = DVector::from_vec(vec![1.0, -2.0]);
    let cfg = AaConfig { tolerance: 1e-6, ..AaConfig::elo() };
    let (_, aa) = aa_solve(affine(a.clone(), b.clone()), DVector::zeros(2), &cfg).unwrap();
    let (_, picard) = damped_solve(affine(a, b), DVector::zeros(2), 1.0, 1e-6, 10_000).unwrap();
    assert!(4 * aa.iterations() <= picard.iterations());
}

/// Runs AA while recording every point the map is evaluated at.
fn recorded(a: &DMatrix<f64>, b: &DVector<f64>, cfg: &AaConfig) -> (Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<StepKind>) {
    let mut xs = Vec::new();
    let mut fs = Vec::new();
    let map = |x: &DVector<f64>| {
        let fx = a * x + b;
        xs.push(x.clone());
        fs.push(fx.clone());
        Ok(fx)
    };
    let steps = match aa_solve(map, DVector::zeros(b.len()), cfg) {
        Ok((_, trace)) => trace.entries.iter().map(|e| e.step).collect(),
        Err(_) => Vec::new(),
    };
    (xs, fs, steps)
}

#[test]
fn rejected_steps_emit_exact_fallback() {
    for (a, b) in affine_benchmark() {
        // A tiny safeguard scale rejects every accelerated proposal.
        for beta in [1.0, 0.5, 0.1] {
            let cfg = AaConfig { safeguard_scale: 1e-12, relaxation: beta, tolerance: 1e-6, max_iter: 100_000, ..AaConfig::elo() };
            let (xs, fs, steps) = recorded(&a, &b, &cfg);
            assert!(steps.contains(&StepKind::Rejected));
            for i in 0..steps.len() {
                if matches!(steps[i], StepKind::Initial | StepKind::Rejected) && i + 1 < xs.len() {
                    let g = &xs[i] - &fs[i];
                    let fallback = &xs[i] - &g * beta;
                    assert_eq!(xs[i + 1], fallback, "iteration {i}");
                }
            }
        }
    }
}

#[test]
fn zero_memory_is_damped_iteration() {
    let (a, b) = affine_benchmark().remove(0);
    let cfg = AaConfig { memory: 0, relaxation: 0.7, tolerance: 1e-8, max_iter: 10_000, ..AaConfig::elo() };
    let (xs, fs, steps) = recorded(&a, &b, &cfg);
    assert!(!steps.is_empty());
    for i in 0..xs.len() - 1 {
        let fallback = &xs[i] - (&xs[i] - &fs[i]) * 0.7;
        assert_eq!(xs[i + 1], fallback);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn accepted_checks_satisfy_the_safeguard(
        entries in proptest::collection::vec(-0.9f64..0.9, 9),
        b in proptest::collection::vec(-5.0f64..5.0, 3),
        memory in 1usize..8,
        beta in 0.1f64..1.0,
    ) {
        let a = DMatrix::from_row_slice(3, 3, &entries) * (0.95 / 2.7);
        let b = DVector::from_vec(b);
        let cfg = AaConfig { memory, relaxation: beta, tolerance: 1e-8, max_iter: 5000, ..AaConfig::elo() };
        let (x, trace) = aa_solve(affine(a.clone(), b.clone()), DVector::zeros(3), &cfg).unwrap();
        prop_assert!((&x - (&a * &x + &b)).norm() <= 1e-8);
        prop_assert!(trace.converged());
        for e in &trace.entries {
            prop_assert!(e.memory <= memory);
            if e.step == StepKind::Checked {
                prop_assert!(e.residual * e.residual <= e.safeguard_bound.unwrap());
            }
            if e.step == StepKind::Rejected {
                prop_assert!(e.residual * e.residual > e.safeguard_bound.unwrap());
            }
        }
    }
}

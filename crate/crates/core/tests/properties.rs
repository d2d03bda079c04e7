//! Property tests for the engine's algebraic invariants.

use nalgebra::DVector;
use proptest::prelude::*;

use reshuffle_core::expectation::{
    expectation_closed_form, expectation_enumerated, ClosedFormOrder, FunctionSequence,
    MomentTable,
};
use reshuffle_core::bias::s_weighted_entry;
use reshuffle_core::optimize::{deviation_first_order, deviation_measured};
use reshuffle_core::problem::{eval_loss, Hyperparams, LossOracle};
use reshuffle_core::problems::QuadraticProblem;
use reshuffle_core::schedule::{make_schedule, BatchSchedule, SamplingPolicy};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The full partition sum is an identity: it must reproduce enumeration
    /// for any bounded scalar sequence.
    #[test]
    fn partition_sum_equals_enumeration(
        values in proptest::collection::vec(-3.0f64..3.0, 3..7),
        k in 2usize..4,
    ) {
        let n = values.len();
        let k = k.min(n);
        let fs = FunctionSequence::scalar_identity(values, k);
        let e = expectation_enumerated(&fs, n).unwrap();
        let table = MomentTable::build(&fs, n);
        let c = expectation_closed_form(&table, ClosedFormOrder::FullPartition).unwrap();
        let scale = e.value.norm().max(1.0);
        prop_assert!((
            &e.value - &c.value).norm() <= 1e-10 * scale,
            "enumerated {} vs closed {}", e.value[(0,0)], c.value[(0,0)]
        );
    }

    /// Batch losses are averages of per-example losses.
    #[test]
    fn batch_loss_is_average(
        theta in proptest::collection::vec(-2.0f64..2.0, 2),
        batch in proptest::collection::vec(0usize..4, 1..5),
    ) {
        let p = QuadraticProblem::random(2, 4, 0.3, 0.1, 1.0, 99);
        let theta = DVector::from_vec(theta);
        let full = eval_loss(&p, &theta, &batch).unwrap();
        let mean = batch
            .iter()
            .map(|&z| eval_loss(&p, &theta, &[z]).unwrap())
            .sum::<f64>() / batch.len() as f64;
        prop_assert!((full - mean).abs() <= 1e-12 * full.abs().max(1.0));
    }

    /// Disjoint schedules partition the prefix of the dataset; same seed,
    /// same schedule.
    #[test]
    fn schedules_are_disjoint_and_deterministic(seed in any::<u64>()) {
        let hyper = Hyperparams::new(0.1, 3, 2).unwrap();
        let a = make_schedule(8, &hyper, SamplingPolicy::WithoutReplacement, seed).unwrap();
        let b = make_schedule(8, &hyper, SamplingPolicy::WithoutReplacement, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let mut seen: Vec<usize> = a.batches.iter().flatten().copied().collect();
        let len = seen.len();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), len, "batches overlap");
        prop_assert!(seen.iter().all(|&z| z < 8));
    }

    /// For per-example quadratics the first-order deviation formula is exact
    /// for every ordering (the linear-dynamics identity).
    #[test]
    fn quadratic_deviation_identity(seed in 0u64..500, eta in 0.01f64..0.1) {
        let p = QuadraticProblem::random(2, 4, 0.4, 0.0, 1.0, seed);
        let hyper = Hyperparams::new(eta, 4, 1).unwrap();
        let theta0 = DVector::from_vec(vec![0.4, -0.2]);
        let sched = make_schedule(4, &hyper, SamplingPolicy::WithoutReplacement, seed).unwrap();
        let sched = BatchSchedule::fixed(sched.batches, SamplingPolicy::WithoutReplacement);
        let m = deviation_measured(&p, &theta0, &sched, &hyper).unwrap();
        let f = deviation_first_order(&p, &theta0, &sched, &hyper).unwrap();
        prop_assert!((&m - &f).norm() <= 1e-10 * m.norm().max(1e-12));
    }

    /// The combined pair weight is symmetric in its two eigenvalues.
    #[test]
    fn weighted_s_entry_is_symmetric(
        la in -0.9f64..0.9,
        ll in -0.9f64..0.9,
        k in 4usize..40,
    ) {
        let eta = 1.0 / k as f64;
        let hyper = Hyperparams::new(eta, k, 1).unwrap();
        let (la, ll) = (la / eta / k as f64, ll / eta / k as f64);
        let ab = s_weighted_entry(la, ll, &hyper).unwrap();
        let ba = s_weighted_entry(ll, la, &hyper).unwrap();
        prop_assert!(
            (ab - ba).abs() <= 1e-9 * ab.abs().max(1e-12),
            "{ab} vs {ba}"
        );
    }

    /// Degenerate batching: with-replacement at b = n is full-batch GD.
    #[test]
    fn with_replacement_b_equals_n_is_gd(seed in any::<u64>(), k in 1usize..5) {
        let p = QuadraticProblem::random(2, 3, 0.3, 0.0, 1.0, 11);
        let hyper = Hyperparams::new(0.05, k, 3).unwrap();
        let theta0 = DVector::from_vec(vec![0.3, 0.2]);
        let wr = make_schedule(3, &hyper, SamplingPolicy::WithReplacement, seed).unwrap();
        let full = make_schedule(3, &hyper, SamplingPolicy::FullBatch, seed).unwrap();
        prop_assert_eq!(&wr.batches, &full.batches);
        let a = reshuffle_core::optimize::run_epoch(
            &p, &theta0, &wr, &hyper, reshuffle_core::optimize::NoiseSpec::None).unwrap();
        let b = reshuffle_core::optimize::run_epoch(
            &p, &theta0, &full, &hyper, reshuffle_core::optimize::NoiseSpec::None).unwrap();
        prop_assert_eq!(a.final_theta(), b.final_theta());
    }
}

/// Exchangeability of the enumerated expectation under simultaneous
/// permutation of commuting factors, on a fixed triple of functions.
#[test]
fn enumeration_exchangeability() {
    let data: Vec<f64> = vec![0.5, -1.2, 2.0, 0.1, 1.4];
    let build = |order: [usize; 3]| {
        let d = data.clone();
        let fs: Vec<Box<dyn Fn(usize) -> f64 + Sync + Send>> = order
            .iter()
            .map(|&i| {
                let d = d.clone();
                let f: Box<dyn Fn(usize) -> f64 + Sync + Send> = match i {
                    0 => Box::new(move |z| d[z] + 2.0),
                    1 => Box::new(move |z| 0.5 * d[z] * d[z] + 1.0),
                    _ => Box::new(move |z| (0.3 * d[z]).exp()),
                };
                f
            })
            .collect();
        FunctionSequence::scalars(fs)
    };
    let reference = expectation_enumerated(&build([0, 1, 2]), 5).unwrap().value[(0, 0)];
    for order in [[1, 2, 0], [2, 0, 1], [2, 1, 0]] {
        let v = expectation_enumerated(&build(order), 5).unwrap().value[(0, 0)];
        assert!(
            (v - reference).abs() <= 1e-12 * reference.abs(),
            "order {order:?}: {v} vs {reference}"
        );
    }
}

/// Exact expected deviation is zero under with-replacement sampling of
/// quadratics: independent centered steps match GD in expectation.
#[test]
fn with_replacement_expected_deviation_vanishes() {
    let p = QuadraticProblem::random(2, 4, 0.4, 0.0, 1.0, 13);
    let hyper = Hyperparams::new(0.05, 3, 1).unwrap();
    let theta0 = DVector::from_vec(vec![0.4, -0.2]);
    let est = reshuffle_core::expectation::exact_expected_deviation(
        &p,
        &theta0,
        &hyper,
        SamplingPolicy::WithReplacement,
    )
    .unwrap();
    assert_eq!(est.samples, 64); // 4^3 equally-likely draws
    assert!(est.value.norm() < 1e-13, "norm {}", est.value.norm());
    let _ = p.n_examples();
}

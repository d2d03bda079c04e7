//! The built-in invariant suite behind the `validate` subcommand.
//!
//! Each check returns a short detail string on success and an explanation on
//! failure; the CLI prints one line per check and exits nonzero if any fail.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::bias::{
    covariance_gradient, covariance_gradient_fd, fisher_hessian_gap, regularizer_step,
    regularizer_value, s_entry, s_entry_closed, s_entry_table, s_matrix, s_weighted_entry,
    s0_approximation, error_bound, Regime, S0Regime,
};
use crate::expectation::{
    exact_expected_deviation, expectation_closed_form, expectation_enumerated, mc_expected_deviation,
    ClosedFormOrder, FunctionSequence, MomentTable,
};
use crate::optimize::{deviation_first_order, deviation_measured, run_epochs, NoiseSpec};
use crate::predictors::{beta_continuous, measure_escape_epochs, saddle_closed_form_path, strict_saddle_epochs};
use crate::problem::{
    eval_loss, fd_gradient, fd_hessian, hessian, hessian_spectrum, Hyperparams, LossOracle,
    ParamVector,
};
use crate::problems::{QuadraticProblem, SaddleBenchmark, SoftmaxLinear, ToyDiagonalProblem};
use crate::schedule::{enumerate_schedules, make_schedule, BatchSchedule, SamplingPolicy};

/// Outcome of one named invariant check.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, result: std::result::Result<String, String>) -> CheckResult {
    match result {
        Ok(detail) => CheckResult {
            name: name.to_string(),
            passed: true,
            detail,
        },
        Err(detail) => CheckResult {
            name: name.to_string(),
            passed: false,
            detail,
        },
    }
}

/// Run every invariant check. Deterministic.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        check("derivatives_match_finite_differences", derivatives_vs_fd()),
        check("batch_loss_is_mean_of_examples", batch_loss_mean()),
        check("spectrum_reconstruction", spectrum_reconstruction()),
        check("degenerate_batching_identity", degenerate_batching()),
        check("quadratic_exactness", quadratic_exactness()),
        check("determinism", determinism()),
        check("closed_form_matches_enumeration", closed_form_vs_enumeration()),
        check("corollary_error_decays", corollary_decay()),
        check("with_replacement_unbiased", with_replacement_unbiased()),
        check("s_entry_two_forms_agree", s_entry_forms()),
        check("s_commutes_with_hessian", s_commutation()),
        check("regime_table_within_25_percent", regime_table()),
        check("s0_closed_forms", s0_forms()),
        check("covariance_gradient_modes_agree", covgrad_modes()),
        check("prediction_scaling_law", prediction_scaling_law()),
        check("toy_drift_toward_min_norm", toy_drift()),
        check("saddle_escape_factor_two", saddle_escape()),
        check("regularizer_value_cancellation", regularizer_value_checks()),
        check("error_bound_properties", error_bound_checks()),
        check("fisher_gap_rate", fisher_gap()),
        check("closed_form_path_matches_simulation", path_vs_simulation()),
        check("monte_carlo_within_stderr", mc_within_stderr()),
    ]
}

fn derivatives_vs_fd() -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let toy = ToyDiagonalProblem::new();
    let quad = QuadraticProblem::random(3, 5, 0.2, 0.3, 1.0, 4);
    let saddle = SaddleBenchmark::standard(20, 5);
    let softmax = SoftmaxLinear::resampled_from_model(
        &DVector::from_vec(vec![0.4, -0.2, 0.1, 0.3, -0.5, 0.2]),
        3,
        2,
        12,
        9,
    );
    let problems: Vec<(&str, &dyn LossOracle)> =
        vec![("toy", &toy), ("quadratic", &quad), ("saddle", &saddle), ("softmax", &softmax)];
    let mut worst: f64 = 0.0;
    for (name, p) in problems {
        for _ in 0..20 {
            let theta = DVector::from_iterator(p.dim(), (0..p.dim()).map(|_| {
                rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.5
            }));
            // Keep saddle probes away from the wall hinge where the third
            // derivative jumps.
            for z in 0..p.n_examples().min(4) {
                let g = p.gradient(&theta, z);
                let g_fd = fd_gradient(p, &theta, z);
                let rel = (&g - &g_fd).norm() / g.norm().max(1e-8);
                worst = worst.max(rel);
                if rel > 1e-5 {
                    return Err(format!("{name}: gradient rel error {rel:.2e} at probe"));
                }
                let h = p.hessian(&theta, z);
                let h_fd = fd_hessian(p, &theta, z);
                let rel_h = (&h - &h_fd).norm() / h.norm().max(1e-8);
                if rel_h > 1e-4 {
                    return Err(format!("{name}: hessian rel error {rel_h:.2e}"));
                }
            }
        }
    }
    Ok(format!("worst gradient rel error {worst:.2e}"))
}

fn batch_loss_mean() -> std::result::Result<String, String> {
    let p = ToyDiagonalProblem::new();
    let theta = DVector::from_vec(vec![1.0, 6.0]);
    let full = eval_loss(&p, &theta, &[0, 1, 2]).map_err(|e| e.to_string())?;
    let per: f64 = (0..3)
        .map(|z| eval_loss(&p, &theta, &[z]).expect("singleton"))
        .sum::<f64>()
        / 3.0;
    if (full - per).abs() > 1e-12 {
        return Err(format!("batch mean mismatch: {full} vs {per}"));
    }
    if (full - 77.0 / 3.0).abs() > 1e-12 {
        return Err(format!("toy loss at (1,6) should be 77/3, got {full}"));
    }
    Ok("batch loss equals mean of per-example losses".into())
}

fn spectrum_reconstruction() -> std::result::Result<String, String> {
    let p = QuadraticProblem::random(6, 4, 0.4, 0.0, 1.0, 11);
    let theta = DVector::from_element(6, 0.2);
    let spec = hessian_spectrum(&p, &theta).map_err(|e| e.to_string())?;
    let h = hessian(&p, &theta, &[0, 1, 2, 3]).map_err(|e| e.to_string())?;
    let rel = (spec.reconstruct() - &h).norm() / h.norm();
    if rel > 1e-8 {
        return Err(format!("reconstruction rel error {rel:.2e}"));
    }
    for w in spec.eigenvalues.as_slice().windows(2) {
        if w[1] > w[0] + 1e-12 {
            return Err("eigenvalues not descending".into());
        }
    }
    let vtv = spec.eigenvectors.transpose() * &spec.eigenvectors;
    let ortho = (&vtv - DMatrix::identity(6, 6)).norm();
    if ortho > 1e-10 {
        return Err(format!("V^T V - I = {ortho:.2e}"));
    }
    Ok(format!("reconstruction rel error {rel:.2e}"))
}

fn degenerate_batching() -> std::result::Result<String, String> {
    let p = QuadraticProblem::random(3, 4, 0.3, 0.0, 1.0, 5);
    let theta0 = DVector::from_vec(vec![0.3, -0.2, 0.7]);
    let hyper = Hyperparams::new(0.05, 1, 4).unwrap();
    let wor = make_schedule(4, &hyper, SamplingPolicy::WithoutReplacement, 9).unwrap();
    let full = make_schedule(4, &hyper, SamplingPolicy::FullBatch, 9).unwrap();
    let a = crate::optimize::run_epoch(&p, &theta0, &wor, &hyper, NoiseSpec::None)
        .map_err(|e| e.to_string())?;
    let b = crate::optimize::run_epoch(&p, &theta0, &full, &hyper, NoiseSpec::None)
        .map_err(|e| e.to_string())?;
    if a.final_theta() != b.final_theta() {
        return Err("b = n trajectory differs from full batch".into());
    }
    Ok("b = n reproduces full batch bitwise".into())
}

fn quadratic_exactness() -> std::result::Result<String, String> {
    let p = QuadraticProblem::random(3, 6, 0.5, 0.0, 1.0, 7);
    let hyper = Hyperparams::new(0.06, 6, 1).unwrap();
    let theta0 = DVector::from_vec(vec![0.5, -0.3, 0.2]);
    let schedules =
        enumerate_schedules(6, &hyper, SamplingPolicy::WithoutReplacement, 1_000_000)
            .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for batches in schedules {
        let sched = BatchSchedule::fixed(batches, SamplingPolicy::WithoutReplacement);
        let m = deviation_measured(&p, &theta0, &sched, &hyper).map_err(|e| e.to_string())?;
        let f = deviation_first_order(&p, &theta0, &sched, &hyper).map_err(|e| e.to_string())?;
        let rel = (&m - &f).norm() / m.norm().max(1e-300);
        worst = worst.max(rel);
    }
    if worst > 1e-10 {
        return Err(format!("worst relative gap {worst:.2e} exceeds 1e-10"));
    }
    Ok(format!("720 orderings, worst relative gap {worst:.2e}"))
}

fn determinism() -> std::result::Result<String, String> {
    let p = ToyDiagonalProblem::new();
    let hyper = Hyperparams::new(0.01, 3, 1).unwrap();
    let theta0 = ToyDiagonalProblem::default_init();
    let a = run_epochs(&p, &theta0, &hyper, SamplingPolicy::WithoutReplacement, 30, 5, NoiseSpec::None)
        .map_err(|e| e.to_string())?;
    let b = run_epochs(&p, &theta0, &hyper, SamplingPolicy::WithoutReplacement, 30, 5, NoiseSpec::None)
        .map_err(|e| e.to_string())?;
    if a.final_theta() != b.final_theta() {
        return Err("same seed produced different trajectories".into());
    }
    let s1 = make_schedule(6, &Hyperparams::new(0.1, 3, 2).unwrap(), SamplingPolicy::WithReplacement, 3).unwrap();
    let s2 = make_schedule(6, &Hyperparams::new(0.1, 3, 2).unwrap(), SamplingPolicy::WithReplacement, 3).unwrap();
    if s1 != s2 {
        return Err("same seed produced different schedules".into());
    }
    Ok("seeded runs are bit-identical".into())
}

fn closed_form_vs_enumeration() -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for trial in 0..10 {
        let n = 3 + (trial % 4);
        let k = (2 + trial % 3).min(n);
        let values: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let fs = FunctionSequence::scalar_identity(values, k);
        let e = expectation_enumerated(&fs, n).map_err(|e| e.to_string())?;
        let table = MomentTable::build(&fs, n);
        let c = expectation_closed_form(&table, ClosedFormOrder::FullPartition)
            .map_err(|e| e.to_string())?;
        let rel = (&e.value - &c.value).norm() / e.value.norm().max(1e-300);
        worst = worst.max(rel);
    }
    if worst > 1e-10 {
        return Err(format!("worst rel gap {worst:.2e}"));
    }
    Ok(format!("worst rel gap {worst:.2e}"))
}

fn corollary_decay() -> std::result::Result<String, String> {
    let mut errs = Vec::new();
    for n in [8usize, 16] {
        let values: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 * 2.0).collect();
        let (v1, v2, v3) = (values.clone(), values.clone(), values);
        let fs = FunctionSequence::scalars(vec![
            Box::new(move |z| v1[z].sin() + 1.5),
            Box::new(move |z| v2[z] * v2[z] * 0.3 + 0.5),
            Box::new(move |z| (0.7 * v3[z]).cos() + 1.2),
        ]);
        let e = expectation_enumerated(&fs, n).map_err(|e| e.to_string())?.value[(0, 0)];
        let table = MomentTable::build(&fs, n);
        let c = expectation_closed_form(&table, ClosedFormOrder::PairCovariance)
            .map_err(|e| e.to_string())?
            .value[(0, 0)];
        errs.push(((c - e) / e).abs());
    }
    let ratio = errs[0] / errs[1];
    if ratio < 2.0 {
        return Err(format!("error ratio {ratio:.2} below 2 when n doubles"));
    }
    Ok(format!("error shrank {ratio:.1}x from n=8 to n=16"))
}

fn with_replacement_unbiased() -> std::result::Result<String, String> {
    let p = QuadraticProblem::random(2, 4, 0.4, 0.0, 1.0, 13);
    let hyper = Hyperparams::new(0.05, 3, 1).unwrap();
    let theta0 = DVector::from_vec(vec![0.4, -0.2]);
    let est = exact_expected_deviation(&p, &theta0, &hyper, SamplingPolicy::WithReplacement)
        .map_err(|e| e.to_string())?;
    let norm = est.value.norm();
    if norm > 1e-13 {
        return Err(format!("expected deviation {norm:.2e} should vanish"));
    }
    Ok(format!("|E[deviation]| = {norm:.2e} over {} draws", est.samples))
}

/// The subtraction route `[1 - eta lambda]^k - sum_{j<=i+1} C(k,j) x^j`
/// cancels down to `x^{i+2} C(k,i+2)`-sized output; in f64 it carries 1e-8
/// relative digits only when that output is within ~1e-10 of the leading
/// term's magnitude.
pub fn s_forms_well_conditioned(i: usize, x: f64, k: usize) -> bool {
    let lead = (1.0 + x.abs()).powi(k as i32);
    let mut binom = 1.0f64;
    for t in 1..=i + 2 {
        binom *= (k - t + 1) as f64 / t as f64;
    }
    let smallest = binom * x.abs().powi(i as i32 + 2);
    smallest > 1e-10 * lead * 1e6
}

/// Grid of (lambda, eta, k, i) tuples with |eta lambda| <= 1 on which both
/// displayed forms are numerically evaluable; at least 100 tuples.
pub fn s_forms_grid() -> Vec<(f64, f64, usize, usize)> {
    let mut grid = Vec::new();
    for &(eta, k) in &[(0.02f64, 8usize), (0.05, 12), (0.01, 16), (0.02, 20)] {
        for sign in [-1.0, 1.0] {
            for frac in [0.05, 0.2, 0.35, 0.5, 0.7, 0.85, 1.0] {
                let lambda = sign * frac / eta;
                let x = -eta * lambda;
                for i in [0usize, 1, 2, 3, k / 2, k - 2] {
                    if i + 2 <= k && s_forms_well_conditioned(i, x, k) {
                        grid.push((lambda, eta, k, i));
                    }
                }
            }
        }
    }
    grid.dedup();
    grid
}

fn s_entry_forms() -> std::result::Result<String, String> {
    let grid = s_forms_grid();
    if grid.len() < 100 {
        return Err(format!("grid has only {} tuples", grid.len()));
    }
    let mut worst: f64 = 0.0;
    for &(lambda, eta, k, i) in &grid {
        let hyper = Hyperparams::new(eta, k, 1).unwrap();
        let series = s_entry(i, lambda, &hyper).map_err(|e| e.to_string())?;
        let closed = s_entry_closed(i, lambda, &hyper).map_err(|e| e.to_string())?;
        let rel = (series - closed).abs() / series.abs().max(1e-300);
        worst = worst.max(rel);
    }
    if worst > 1e-8 {
        return Err(format!("forms disagree: rel {worst:.2e}"));
    }
    Ok(format!(
        "two closed forms agree to {worst:.2e} on {} tuples",
        grid.len()
    ))
}

fn s_commutation() -> std::result::Result<String, String> {
    let p = QuadraticProblem::random(4, 5, 0.3, 0.0, 1.0, 3);
    let theta = DVector::from_element(4, 0.1);
    let hyper = Hyperparams::new(0.05, 8, 1).unwrap();
    let spec = hessian_spectrum(&p, &theta).map_err(|e| e.to_string())?;
    let h = hessian(&p, &theta, &[0, 1, 2, 3, 4]).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for i in 0..=hyper.k - 2 {
        let s = s_matrix(i, &spec, &hyper).map_err(|e| e.to_string())?;
        let comm = (&s * &h - &h * &s).norm();
        let bound = 1e-8 * s.norm() * h.norm();
        worst = worst.max(comm / (s.norm() * h.norm()));
        if comm > bound {
            return Err(format!("S_{i} does not commute: {comm:.2e} > {bound:.2e}"));
        }
    }
    Ok(format!("worst normalized commutator {worst:.2e}"))
}

fn regime_table() -> std::result::Result<String, String> {
    let mut worst: f64 = 0.0;
    for &(eta, k) in &[(0.02f64, 50usize), (0.01, 100)] {
        let hyper = Hyperparams::new(eta, k, 1).unwrap();
        let c = hyper.c();
        let cases = [
            (0.01, 0.01, Regime::BothSmall),
            (0.05, -0.05, Regime::BothSmall),
            (8.0, 0.01, Regime::IBigJSmall),
            (0.05, 8.0, Regime::ISmallJBig),
            (6.0, 7.0, Regime::BothBig),
            (10.0, 10.0, Regime::BothBig),
        ];
        for &(ci, cj, expect) in &cases {
            let (li, lj) = (ci / c, cj / c);
            if eta * li >= 1.0 || eta * lj >= 1.0 {
                continue;
            }
            let entry = s_entry_table(li, lj, &hyper).map_err(|e| e.to_string())?;
            if entry.regime != expect {
                return Err(format!("({ci},{cj}) classified {:?}", entry.regime));
            }
            let exact = s_weighted_entry(li, lj, &hyper).map_err(|e| e.to_string())?;
            let rel = (entry.value - exact).abs() / exact.abs();
            worst = worst.max(rel);
            if rel > 0.25 {
                return Err(format!(
                    "({ci},{cj}) {:?}: table {} vs exact {} (rel {rel:.2})",
                    entry.regime, entry.value, exact
                ));
            }
        }
    }
    Ok(format!("worst in-zone relative error {worst:.2}"))
}

fn s0_forms() -> std::result::Result<String, String> {
    let hyper = Hyperparams::new(0.01, 100, 1).unwrap();
    let c = hyper.c();
    // lambda = 0, H = 0 -> c/4.
    let v = s0_approximation(0.0, 0.0, &hyper, S0Regime::SmallCLambda);
    if (v - c / 4.0).abs() > 1e-12 {
        return Err(format!("S0(0,0) = {v}, expected c/4"));
    }
    // Large positive: c lambda = 20 -> 1/(2 lambda).
    let lam = 20.0 / c;
    let v = s0_approximation(lam, 0.0, &hyper, S0Regime::LargePositive);
    if (v - 1.0 / (2.0 * lam)).abs() > 1e-12 {
        return Err("large-positive form wrong".into());
    }
    // H -> 0 limit of the erf form matches the series at c lambda = 0.1.
    let lam = 0.1 / c;
    let series = s0_approximation(lam, 1e-7, &hyper, S0Regime::SmallCLambda);
    let erf_form = s0_approximation(lam, 1.0001e-6, &hyper, S0Regime::SmallCLambda);
    let rel = (series - erf_form).abs() / series.abs();
    if rel > 1e-6 {
        return Err(format!("erf form vs series: rel {rel:.2e}"));
    }
    Ok(format!("erf/series cross-check rel {rel:.2e}"))
}

fn covgrad_modes() -> std::result::Result<String, String> {
    let p = ToyDiagonalProblem::new();
    let mut worst: f64 = 0.0;
    for theta in [
        DVector::from_vec(vec![1.3, 0.8]),
        DVector::from_vec(vec![0.5, 2.0]),
        DVector::from_vec(vec![2.0, 0.5]),
    ] {
        for dir in [DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.6, 0.8])] {
            let a = covariance_gradient(&p, &theta, &dir).map_err(|e| e.to_string())?;
            let f = covariance_gradient_fd(&p, &theta, &dir).map_err(|e| e.to_string())?;
            let rel = (&a - &f).norm() / a.norm().max(1e-10);
            worst = worst.max(rel);
            if rel > 1e-4 {
                return Err(format!("modes disagree: rel {rel:.2e}"));
            }
        }
    }
    Ok(format!("worst rel Frobenius gap {worst:.2e}"))
}

/// The d = 4 near-quadratic used by the prediction-law checks.
pub fn prediction_problem(label_scale: f64) -> (QuadraticProblem, ParamVector) {
    let p = QuadraticProblem::random(4, 10, 0.10, 0.25, label_scale, 3);
    let minimizer = p.mean_quadratic_minimizer();
    let offset = DVector::from_element(4, 0.2 * label_scale / 2.0);
    (p, minimizer + offset)
}

fn prediction_scaling_law() -> std::result::Result<String, String> {
    let hyper = Hyperparams::new(0.05, 5, 1).unwrap();
    let mut points = Vec::new();
    for scale in [1.0f64, 0.25, 0.0625] {
        let (p, theta0) = prediction_problem(scale);
        let dev = exact_expected_deviation(&p, &theta0, &hyper, SamplingPolicy::WithoutReplacement)
            .map_err(|e| e.to_string())?;
        let dev = DVector::from_column_slice(dev.value.as_slice());
        let step = regularizer_step(&p, &theta0, &hyper).map_err(|e| e.to_string())?;
        let err = (&dev - &step).norm();
        let grad_scale = (0..p.n_examples())
            .map(|z| p.gradient(&theta0, z).norm())
            .sum::<f64>()
            / p.n_examples() as f64;
        points.push(((hyper.c() * grad_scale).ln(), err.ln()));
    }
    let slope = (points[0].1 - points[2].1) / (points[0].0 - points[2].0);
    if slope < 1.8 {
        return Err(format!("scaling-law slope {slope:.2} below 1.8"));
    }
    Ok(format!("log-log slope {slope:.2}"))
}

fn toy_drift() -> std::result::Result<String, String> {
    let p = ToyDiagonalProblem::new();
    let hyper = Hyperparams::new(0.01, 3, 1).unwrap();
    let theta0 = ToyDiagonalProblem::default_init();
    let epochs = 200;
    let gd = run_epochs(&p, &theta0, &hyper, SamplingPolicy::FullBatch, epochs, 0, NoiseSpec::None)
        .map_err(|e| e.to_string())?;
    let target = DVector::from_vec(vec![1.0, 1.0]);
    let shuffles = 50;
    let finals = crate::par::run_indexed(shuffles, |s| {
        run_epochs(
            &p,
            &theta0,
            &hyper,
            SamplingPolicy::WithoutReplacement,
            epochs,
            s as u64,
            NoiseSpec::None,
        )
        .map(|r| r.final_theta().clone())
    });
    let mut mean = DVector::zeros(2);
    for f in finals {
        mean += f.map_err(|e| e.to_string())?;
    }
    mean /= shuffles as f64;
    let d_wor = (&mean - &target).norm();
    let d_gd = (gd.final_theta() - &target).norm();
    if d_wor >= d_gd {
        return Err(format!("WoR endpoint {d_wor:.3} not closer than GD {d_gd:.3}"));
    }
    // Tangential regularizer direction at the GD endpoint reduces
    // theta_1^2 + theta_2^2.
    let step = regularizer_step(&p, gd.final_theta(), &hyper).map_err(|e| e.to_string())?;
    let gd_end = gd.final_theta();
    let toward = DVector::from_vec(vec![gd_end[0], -gd_end[1]]).normalize();
    let tangential = step.dot(&toward);
    // Moving along (+t1, -t2) reduces the norm when t2 > t1 > 0.
    if tangential <= 0.0 {
        return Err(format!("tangential component {tangential:.2e} not norm-reducing"));
    }
    Ok(format!(
        "WoR mean dist {d_wor:.3} < GD dist {d_gd:.3}; tangential step {tangential:.2e}"
    ))
}

fn saddle_escape() -> std::result::Result<String, String> {
    // Lite version of the acceptance criterion: one step size.
    let eta = 0.01;
    let (bench, hyper, init) = crate::harness::standard_saddle_setup(eta, 5);
    let u = bench.u_at_saddle();
    let pred = strict_saddle_epochs(u, -1.0, &hyper)
        .map_err(|e| e.to_string())?
        .epochs_predicted;
    let seeds = 20;
    let max_epochs = 400;
    let wor: Vec<usize> = crate::par::run_indexed(seeds, |s| {
        measure_escape_epochs(
            &bench,
            &init,
            &hyper,
            SamplingPolicy::WithoutReplacement,
            1.0,
            max_epochs,
            s as u64,
        )
        .expect("escape run")
    });
    let wr: Vec<usize> = crate::par::run_indexed(seeds, |s| {
        measure_escape_epochs(
            &bench,
            &init,
            &hyper,
            SamplingPolicy::WithReplacement,
            1.0,
            max_epochs,
            s as u64,
        )
        .expect("escape run")
    });
    let med_wor = median(&wor);
    let med_wr = median(&wr);
    let factor = med_wor / pred;
    if !(0.5..=2.0).contains(&factor) {
        return Err(format!("measured {med_wor} vs predicted {pred:.1} (factor {factor:.2})"));
    }
    if med_wor >= med_wr {
        return Err(format!("WoR median {med_wor} not below WR median {med_wr}"));
    }
    Ok(format!(
        "predicted {pred:.1}, WoR median {med_wor}, WR median {med_wr}"
    ))
}

pub fn median(xs: &[usize]) -> f64 {
    let mut v: Vec<usize> = xs.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

fn regularizer_value_checks() -> std::result::Result<String, String> {
    let p = QuadraticProblem::random(3, 4, 0.4, 0.0, 1.0, 8);
    let hyper = Hyperparams::new(0.05, 4, 1).unwrap();
    let theta = DVector::from_vec(vec![0.3, 0.1, -0.2]);
    // All batches = D: the two terms cancel.
    let full = BatchSchedule::fixed(
        vec![(0..4).collect::<Vec<usize>>(); 4],
        SamplingPolicy::FullBatch,
    );
    let v = regularizer_value(&p, &theta, &hyper, Some(&full)).map_err(|e| e.to_string())?;
    if v.abs() > 1e-12 {
        return Err(format!("full-batch regularizer {v:.2e} should cancel"));
    }
    // Zero gradients everywhere: value 0.
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
    let zero_grad = QuadraticProblem::new(
        vec![a.clone(), a.clone()],
        vec![DVector::zeros(2), DVector::zeros(2)],
    );
    let hyper2 = Hyperparams::new(0.05, 2, 1).unwrap();
    let sched = BatchSchedule::fixed(vec![vec![0], vec![1]], SamplingPolicy::WithoutReplacement);
    let v = regularizer_value(&zero_grad, &DVector::zeros(2), &hyper2, Some(&sched))
        .map_err(|e| e.to_string())?;
    if v.abs() > 1e-15 {
        return Err(format!("zero-gradient regularizer {v:.2e}"));
    }
    Ok("cancellation and zero-gradient cases hold".into())
}

fn error_bound_checks() -> std::result::Result<String, String> {
    // Quadratic losses: bound identically zero.
    let p = QuadraticProblem::random(3, 4, 0.3, 0.0, 1.0, 2);
    let hyper = Hyperparams::new(0.05, 4, 1).unwrap();
    let theta = DVector::from_element(3, 0.2);
    let v = error_bound(&p, &theta, &hyper).map_err(|e| e.to_string())?;
    if v != 0.0 {
        return Err(format!("quadratic error bound {v} nonzero"));
    }
    // Linear in 1/b at fixed c.
    let p3 = QuadraticProblem::random(3, 8, 0.3, 0.4, 1.0, 2);
    let h1 = Hyperparams::new(0.05, 4, 1).unwrap();
    let h2 = Hyperparams::new(0.05, 4, 2).unwrap();
    let b1 = error_bound(&p3, &theta, &h1).map_err(|e| e.to_string())?;
    let b2 = error_bound(&p3, &theta, &h2).map_err(|e| e.to_string())?;
    if (b1 / b2 - 2.0).abs() > 1e-10 {
        return Err(format!("1/b scaling violated: {b1} vs {b2}"));
    }
    // Scales like s^2 under label scaling near interpolation.
    let mk = |s: f64| {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.5]);
        QuadraticProblem::new(
            vec![a.clone(), a.clone()],
            vec![
                DVector::from_vec(vec![s, -s]),
                DVector::from_vec(vec![-s, s]),
            ],
        )
        .with_cubic(vec![
            DVector::from_vec(vec![0.3, 0.2]),
            DVector::from_vec(vec![0.3, 0.2]),
        ])
    };
    let hb = Hyperparams::new(0.05, 2, 1).unwrap();
    let at_zero = DVector::zeros(2);
    let e1 = error_bound(&mk(1.0), &at_zero, &hb).map_err(|e| e.to_string())?;
    let e2 = error_bound(&mk(0.5), &at_zero, &hb).map_err(|e| e.to_string())?;
    let ratio = e1 / e2;
    if (ratio - 4.0).abs() > 0.2 {
        return Err(format!("label-scaling ratio {ratio:.2}, expected about 4"));
    }
    Ok(format!("zero for quadratics; 1/b exact; s^2 ratio {ratio:.2}"))
}

fn fisher_gap() -> std::result::Result<String, String> {
    let theta = DVector::from_vec(vec![0.5, -0.3, 0.2, 0.4, -0.1, 0.6]);
    let gap = |n: usize| -> std::result::Result<f64, String> {
        let p = SoftmaxLinear::resampled_from_model(&theta, 3, 2, n, 31);
        fisher_hessian_gap(&p, &theta).map_err(|e| e.to_string())
    };
    let g_small = gap(500)?;
    let g_large = gap(2000)?;
    let ratio = g_small / g_large;
    if ratio < 1.5 {
        return Err(format!("gap ratio {ratio:.2} too small for n^(-1/2) decay"));
    }
    // Mismatched labels keep the gap strictly positive.
    let p = SoftmaxLinear::resampled_from_model(&theta, 3, 2, 200, 8);
    let mut flipped = p.clone();
    for y in flipped.labels.iter_mut() {
        *y = (*y + 1) % 3;
    }
    let g = fisher_hessian_gap(&flipped, &theta).map_err(|e| e.to_string())?;
    if g < 0.1 {
        return Err(format!("mismatched-label gap {g:.3} suspiciously small"));
    }
    Ok(format!("gap {g_small:.4} -> {g_large:.4} (ratio {ratio:.2})"))
}

fn path_vs_simulation() -> std::result::Result<String, String> {
    // Quadratic-plus-cubic saddle, b = 2, drift along the kernel direction.
    let n = 40;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut a: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let mean = a.iter().sum::<f64>() / n as f64;
    for x in &mut a {
        *x -= mean;
    }
    // Per-example: flat in theta_1 (lambda = 0), restoring in theta_2, with
    // coupling a_z theta_1 theta_2 and a small cubic.
    let mut a_mats = Vec::new();
    let mut g_vecs = Vec::new();
    let mut cubs = Vec::new();
    for z in 0..n {
        a_mats.push(DMatrix::from_row_slice(2, 2, &[0.0, a[z], a[z], 1.0]));
        g_vecs.push(DVector::from_vec(vec![0.0, -a[z]]));
        cubs.push(DVector::from_vec(vec![0.02, 0.0]));
    }
    let p = QuadraticProblem::new(a_mats, g_vecs).with_cubic(cubs);
    let hyper = Hyperparams::new(0.05, 20, 2).unwrap();
    let theta0 = DVector::zeros(2);

    // alpha from the predicted step along e1; beta from lambda = 0.
    let step = regularizer_step(&p, &theta0, &hyper).map_err(|e| e.to_string())?;
    let alpha = -step[0];
    let beta = beta_continuous(0.0, hyper.c());
    let grad_comp = 0.0;
    let path = saddle_closed_form_path(alpha, beta, 0.0, grad_comp, 2);

    // Simulated mean over many shuffles.
    let shuffles = 4000;
    let sums = crate::par::run_indexed(shuffles, |s| {
        let mut theta = theta0.clone();
        let mut out = Vec::with_capacity(2);
        for epoch in 0..2u64 {
            let sched = make_schedule(
                n,
                &hyper,
                SamplingPolicy::WithoutReplacement,
                crate::schedule::epoch_seed(s as u64, epoch),
            )
            .expect("feasible");
            theta = crate::optimize::run_epoch(&p, &theta, &sched, &hyper, NoiseSpec::None)
                .expect("stable")
                .final_theta()
                .clone();
            out.push(theta[0]);
        }
        out
    });
    let mut mean = [0.0f64; 2];
    for s in &sums {
        mean[0] += s[0];
        mean[1] += s[1];
    }
    mean[0] /= shuffles as f64;
    mean[1] /= shuffles as f64;
    for m in 1..=2usize {
        let predicted = path.rows[m].position;
        let simulated = mean[m - 1];
        let rel = (predicted - simulated).abs() / simulated.abs().max(1e-12);
        if (predicted - 0.0).abs() > 0.1 {
            return Err("path left the small-displacement regime".into());
        }
        if rel > 0.10 {
            return Err(format!(
                "epoch {m}: path {predicted:.3e} vs simulation {simulated:.3e} (rel {rel:.2})"
            ));
        }
    }
    Ok(format!(
        "first two epochs within 10% (alpha = {alpha:.2e})"
    ))
}

fn mc_within_stderr() -> std::result::Result<String, String> {
    let p = QuadraticProblem::random(2, 6, 0.4, 0.0, 1.0, 19);
    let hyper = Hyperparams::new(0.05, 6, 1).unwrap();
    let theta0 = DVector::from_vec(vec![0.3, -0.4]);
    let exact = exact_expected_deviation(&p, &theta0, &hyper, SamplingPolicy::WithoutReplacement)
        .map_err(|e| e.to_string())?;
    let mc = mc_expected_deviation(
        &p,
        &theta0,
        &hyper,
        SamplingPolicy::WithoutReplacement,
        50_000,
        123,
    )
    .map_err(|e| e.to_string())?;
    let mc2 = mc_expected_deviation(
        &p,
        &theta0,
        &hyper,
        SamplingPolicy::WithoutReplacement,
        1_000,
        123,
    )
    .map_err(|e| e.to_string())?;
    let mc2b = mc_expected_deviation(
        &p,
        &theta0,
        &hyper,
        SamplingPolicy::WithoutReplacement,
        1_000,
        123,
    )
    .map_err(|e| e.to_string())?;
    if mc2.value != mc2b.value {
        return Err("same seed gave different Monte-Carlo estimates".into());
    }
    let stderr = mc.stderr.as_ref().expect("mc has stderr");
    for i in 0..2 {
        let gap = (mc.value[(i, 0)] - exact.value[(i, 0)]).abs();
        if gap > 4.0 * stderr[(i, 0)] {
            return Err(format!(
                "component {i}: |mc - exact| = {gap:.2e} exceeds 4 stderr {:.2e}",
                stderr[(i, 0)]
            ));
        }
    }
    Ok("50k-sample estimate within 4 stderr of enumeration".into())
}

/// Convenience wrappers for checks reused by the acceptance suite.
pub mod checks {
    pub use super::{median, prediction_problem};
}

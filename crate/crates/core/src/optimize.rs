//! The optimizer variants and the first-order closed-form deviation between
//! mini-batch and full-batch trajectories.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{grad, hessian, eval_loss, Hyperparams, LossOracle, ParamVector};
use crate::schedule::{epoch_seed, make_schedule, BatchSchedule, SamplingPolicy};

/// Norm beyond which an epoch is aborted as divergent.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// Gradient noise added on top of a schedule's batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSpec {
    None,
    GaussianIsotropic { sigma: f64 },
}

impl NoiseSpec {
    fn sigma(&self) -> f64 {
        match self {
            NoiseSpec::None => 0.0,
            NoiseSpec::GaussianIsotropic { sigma } => *sigma,
        }
    }
}

/// Parameters, losses, and bookkeeping for one epoch (or run) of an
/// optimizer.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    /// `theta(0) .. theta(k)`.
    pub thetas: Vec<ParamVector>,
    /// Full-batch loss at each recorded theta.
    pub losses: Vec<f64>,
    pub schedule: BatchSchedule,
    pub hyper: Hyperparams,
}

impl TrajectoryRecord {
    pub fn final_theta(&self) -> &ParamVector {
        self.thetas.last().expect("non-empty trajectory")
    }

    /// CSV with header `step,theta_0..theta_{d-1},loss`, floats at 17
    /// significant digits.
    pub fn to_csv(&self) -> String {
        let d = self.thetas[0].len();
        let mut out = String::from("step");
        for i in 0..d {
            out.push_str(&format!(",theta_{i}"));
        }
        out.push_str(",loss\n");
        for (step, (theta, loss)) in self.thetas.iter().zip(&self.losses).enumerate() {
            out.push_str(&step.to_string());
            for v in theta.iter() {
                out.push_str(&format!(",{v:.16e}"));
            }
            out.push_str(&format!(",{loss:.16e}\n"));
        }
        out
    }
}

/// Run one epoch of mini-batch descent along `schedule`.
///
/// The update is `theta <- theta - eta * grad(theta, B)` with batch-averaged
/// gradients; `NoisedFullBatch` adds `sigma * N(0, I)` to each gradient,
/// seeded from the schedule seed.
pub fn run_epoch<O: LossOracle + ?Sized>(
    oracle: &O,
    theta0: &ParamVector,
    schedule: &BatchSchedule,
    hyper: &Hyperparams,
    noise: NoiseSpec,
) -> Result<TrajectoryRecord> {
    let full: Vec<usize> = (0..oracle.n_examples()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(schedule.seed, 0xA0A0));
    let sigma = noise.sigma();
    let mut thetas = Vec::with_capacity(schedule.k() + 1);
    let mut losses = Vec::with_capacity(schedule.k() + 1);
    let mut theta = theta0.clone();
    thetas.push(theta.clone());
    losses.push(eval_loss(oracle, &theta, &full)?);
    for (step, batch) in schedule.batches.iter().enumerate() {
        let mut g = grad(oracle, &theta, batch)?;
        if sigma > 0.0 {
            for gi in g.iter_mut() {
                *gi += sigma * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
        theta -= g * hyper.eta;
        if !theta.iter().all(|x| x.is_finite()) || theta.norm() > DIVERGENCE_NORM {
            return Err(Error::DivergenceDetected { step });
        }
        thetas.push(theta.clone());
        losses.push(eval_loss(oracle, &theta, &full)?);
    }
    Ok(TrajectoryRecord {
        thetas,
        losses,
        schedule: schedule.clone(),
        hyper: *hyper,
    })
}

/// Endpoint of `k` full-batch GD steps from `theta0`.
pub fn gd_endpoint<O: LossOracle + ?Sized>(
    oracle: &O,
    theta0: &ParamVector,
    hyper: &Hyperparams,
) -> Result<ParamVector> {
    let n = oracle.n_examples();
    let full_sched = BatchSchedule::fixed(
        vec![(0..n).collect::<Vec<usize>>(); hyper.k],
        SamplingPolicy::FullBatch,
    );
    Ok(run_epoch(oracle, theta0, &full_sched, hyper, NoiseSpec::None)?
        .final_theta()
        .clone())
}

/// Endpoint of one GD step with learning rate `k * eta` (the big-step
/// comparison exposed alongside the default k-small-steps one).
pub fn gd_big_step_endpoint<O: LossOracle + ?Sized>(
    oracle: &O,
    theta0: &ParamVector,
    hyper: &Hyperparams,
) -> Result<ParamVector> {
    let full: Vec<usize> = (0..oracle.n_examples()).collect();
    let g = grad(oracle, theta0, &full)?;
    Ok(theta0 - g * (hyper.eta * hyper.k as f64))
}

/// Measured deviation `theta_k^{SGD} - theta_k^{GD}` for one schedule.
pub fn deviation_measured<O: LossOracle + ?Sized>(
    oracle: &O,
    theta0: &ParamVector,
    schedule: &BatchSchedule,
    hyper: &Hyperparams,
) -> Result<ParamVector> {
    let sgd = run_epoch(oracle, theta0, schedule, hyper, NoiseSpec::None)?;
    let gd = gd_endpoint(oracle, theta0, hyper)?;
    Ok(sgd.final_theta() - gd)
}

/// First-order closed-form deviation, all derivatives evaluated at `theta0`:
///
/// `-eta sum_i grad(B_i) + eta^2 sum_{i<j} hess(B_j) [prod_{h=i+1}^{j-1}
///  (I - eta hess(B_h))] grad(B_i)`  minus the same terms with every batch
/// replaced by the full dataset. The products multiply with descending `h`
/// on the left. Exact for per-example quadratic losses.
pub fn deviation_first_order<O: LossOracle + ?Sized>(
    oracle: &O,
    theta0: &ParamVector,
    schedule: &BatchSchedule,
    hyper: &Hyperparams,
) -> Result<ParamVector> {
    let k = schedule.k();
    let d = oracle.dim();
    let full: Vec<usize> = (0..oracle.n_examples()).collect();

    let grads: Vec<ParamVector> = schedule
        .batches
        .iter()
        .map(|b| grad(oracle, theta0, b))
        .collect::<Result<_>>()?;
    let hesss: Vec<DMatrix<f64>> = schedule
        .batches
        .iter()
        .map(|b| hessian(oracle, theta0, b))
        .collect::<Result<_>>()?;
    let g_full = grad(oracle, theta0, &full)?;
    let h_full = hessian(oracle, theta0, &full)?;

    let eta = hyper.eta;
    let sgd_part = double_sum(&grads, &hesss, eta, d);
    let full_grads = vec![g_full.clone(); k];
    let full_hesss = vec![h_full; k];
    let gd_part = double_sum(&full_grads, &full_hesss, eta, d);

    let mut first_order = DVector::zeros(d);
    for g in &grads {
        first_order -= g * eta;
    }
    first_order += g_full * (eta * k as f64);

    Ok(first_order + sgd_part - gd_part)
}

fn double_sum(
    grads: &[ParamVector],
    hesss: &[DMatrix<f64>],
    eta: f64,
    d: usize,
) -> ParamVector {
    let k = grads.len();
    let eye = DMatrix::identity(d, d);
    let mut total = DVector::zeros(d);
    for i in 0..k {
        // accumulated = prod_{h=i+1}^{j-1} (I - eta H_h) applied to grad_i,
        // extended one factor at a time as j grows.
        let mut propagated = grads[i].clone();
        for j in i + 1..k {
            total += (&hesss[j] * &propagated) * (eta * eta);
            propagated = (&eye - &hesss[j] * eta) * propagated;
        }
    }
    total
}

/// Run several epochs under a policy, re-sampling batches per epoch where the
/// policy says so. Returns the concatenated trajectory.
pub fn run_epochs<O: LossOracle + ?Sized>(
    oracle: &O,
    theta0: &ParamVector,
    hyper: &Hyperparams,
    policy: SamplingPolicy,
    epochs: usize,
    seed: u64,
    noise: NoiseSpec,
) -> Result<TrajectoryRecord> {
    let n = oracle.n_examples();
    let mut theta = theta0.clone();
    let mut thetas = vec![theta.clone()];
    let full: Vec<usize> = (0..n).collect();
    let mut losses = vec![eval_loss(oracle, &theta, &full)?];
    let mut last_schedule = None;
    for epoch in 0..epochs {
        let sched_seed = match policy {
            SamplingPolicy::ShuffleOnce => seed,
            _ => epoch_seed(seed, epoch as u64),
        };
        let schedule = make_schedule(n, hyper, policy, sched_seed)?;
        let rec = run_epoch(oracle, &theta, &schedule, hyper, noise)?;
        theta = rec.final_theta().clone();
        thetas.extend(rec.thetas.into_iter().skip(1));
        losses.extend(rec.losses.into_iter().skip(1));
        last_schedule = Some(schedule);
    }
    Ok(TrajectoryRecord {
        thetas,
        losses,
        schedule: last_schedule
            .unwrap_or_else(|| BatchSchedule::fixed(vec![], policy)),
        hyper: *hyper,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{QuadraticProblem, ToyDiagonalProblem};
    use approx::assert_relative_eq;

    struct ScalarQuadratic;

    impl LossOracle for ScalarQuadratic {
        fn dim(&self) -> usize {
            1
        }
        fn n_examples(&self) -> usize {
            1
        }
        fn loss(&self, theta: &ParamVector, _z: usize) -> f64 {
            0.5 * theta[0] * theta[0]
        }
        fn gradient(&self, theta: &ParamVector, _z: usize) -> ParamVector {
            DVector::from_vec(vec![theta[0]])
        }
        fn hessian(&self, _theta: &ParamVector, _z: usize) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, 1.0)
        }
    }

    #[test]
    fn scalar_quadratic_single_step() {
        let hyper = Hyperparams::new(0.1, 1, 1).unwrap();
        let sched = BatchSchedule::fixed(vec![vec![0]], SamplingPolicy::FullBatch);
        let rec = run_epoch(
            &ScalarQuadratic,
            &DVector::from_vec(vec![1.0]),
            &sched,
            &hyper,
            NoiseSpec::None,
        )
        .unwrap();
        assert_relative_eq!(rec.final_theta()[0], 0.9, epsilon = 1e-15);
    }

    #[test]
    fn b_equals_n_matches_full_batch_bitwise() {
        let p = QuadraticProblem::random(3, 4, 0.3, 0.0, 1.0, 5);
        let theta0 = DVector::from_vec(vec![0.3, -0.2, 0.7]);
        // Disjoint policy forces k = 1 when b = n.
        let hyper1 = Hyperparams::new(0.05, 1, 4).unwrap();
        let wor = make_schedule(4, &hyper1, SamplingPolicy::WithoutReplacement, 9).unwrap();
        let full1 = make_schedule(4, &hyper1, SamplingPolicy::FullBatch, 9).unwrap();
        assert_eq!(wor.batches, full1.batches);
        let a = run_epoch(&p, &theta0, &wor, &hyper1, NoiseSpec::None).unwrap();
        let b = run_epoch(&p, &theta0, &full1, &hyper1, NoiseSpec::None).unwrap();
        assert_eq!(a.final_theta(), b.final_theta());
        // WithReplacement admits any k when b = n.
        let hyper4 = Hyperparams::new(0.05, 4, 4).unwrap();
        let wr = make_schedule(4, &hyper4, SamplingPolicy::WithReplacement, 9).unwrap();
        let full4 = make_schedule(4, &hyper4, SamplingPolicy::FullBatch, 9).unwrap();
        assert_eq!(wr.batches, full4.batches);
        let a = run_epoch(&p, &theta0, &wr, &hyper4, NoiseSpec::None).unwrap();
        let b = run_epoch(&p, &theta0, &full4, &hyper4, NoiseSpec::None).unwrap();
        assert_eq!(a.final_theta(), b.final_theta());
    }

    #[test]
    fn toy_loss_non_increasing_first_epoch() {
        let p = ToyDiagonalProblem::new();
        let hyper = Hyperparams::new(0.001, 3, 1).unwrap();
        let sched = make_schedule(3, &hyper, SamplingPolicy::WithoutReplacement, 1).unwrap();
        let rec = run_epoch(
            &p,
            &ToyDiagonalProblem::default_init(),
            &sched,
            &hyper,
            NoiseSpec::None,
        )
        .unwrap();
        for w in rec.losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn deviation_zero_for_full_batch_and_degenerate_batching() {
        let p = QuadraticProblem::random(2, 3, 0.4, 0.0, 1.0, 2);
        let theta0 = DVector::from_vec(vec![0.2, -0.1]);
        let hyper = Hyperparams::new(0.05, 3, 3).unwrap();
        let full = make_schedule(3, &hyper, SamplingPolicy::FullBatch, 0).unwrap();
        let dev = deviation_measured(&p, &theta0, &full, &hyper).unwrap();
        assert!(dev.norm() < 1e-15);
        // b = n forces k = 1 for the disjoint policy; the deviation is zero.
        let hyper1 = Hyperparams::new(0.05, 1, 3).unwrap();
        let wor = make_schedule(3, &hyper1, SamplingPolicy::WithoutReplacement, 0).unwrap();
        let dev = deviation_measured(&p, &theta0, &wor, &hyper1).unwrap();
        assert!(dev.norm() < 1e-15);
    }

    #[test]
    fn k1_first_order_is_gradient_difference() {
        let p = QuadraticProblem::random(2, 4, 0.4, 0.0, 1.0, 3);
        let hyper = Hyperparams::new(0.05, 1, 1).unwrap();
        let theta0 = DVector::from_vec(vec![0.4, 0.1]);
        let sched = BatchSchedule::fixed(vec![vec![2]], SamplingPolicy::WithoutReplacement);
        let fo = deviation_first_order(&p, &theta0, &sched, &hyper).unwrap();
        let full: Vec<usize> = (0..4).collect();
        let expected = (grad(&p, &theta0, &full).unwrap() - grad(&p, &theta0, &[2]).unwrap())
            * hyper.eta;
        assert_relative_eq!((fo - expected).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn quadratic_exactness_n4() {
        let p = QuadraticProblem::random(3, 4, 0.5, 0.0, 1.0, 7);
        let hyper = Hyperparams::new(0.08, 4, 1).unwrap();
        let theta0 = DVector::from_vec(vec![0.5, -0.3, 0.2]);
        for perm in [[0usize, 1, 2, 3], [3, 1, 0, 2], [2, 3, 1, 0]] {
            let sched = BatchSchedule::fixed(
                perm.iter().map(|&z| vec![z]).collect(),
                SamplingPolicy::WithoutReplacement,
            );
            let measured = deviation_measured(&p, &theta0, &sched, &hyper).unwrap();
            let predicted = deviation_first_order(&p, &theta0, &sched, &hyper).unwrap();
            let rel = (&measured - &predicted).norm() / measured.norm().max(1e-300);
            assert!(rel < 1e-10, "relative error {rel}");
        }
    }

    #[test]
    fn divergence_is_detected() {
        // Gradient ascent on a concave loss diverges.
        struct Bad;
        impl LossOracle for Bad {
            fn dim(&self) -> usize {
                1
            }
            fn n_examples(&self) -> usize {
                1
            }
            fn loss(&self, theta: &ParamVector, _z: usize) -> f64 {
                -0.5 * theta[0] * theta[0]
            }
            fn gradient(&self, theta: &ParamVector, _z: usize) -> ParamVector {
                DVector::from_vec(vec![-theta[0]])
            }
        }
        let hyper = Hyperparams::new(10.0, 50, 1).unwrap();
        let sched = BatchSchedule::fixed(vec![vec![0]; 50], SamplingPolicy::FullBatch);
        let err = run_epoch(
            &Bad,
            &DVector::from_vec(vec![1e9]),
            &sched,
            &hyper,
            NoiseSpec::None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DivergenceDetected { .. }));
    }

    #[test]
    fn noise_sigma_zero_is_plain_gd() {
        let p = ToyDiagonalProblem::new();
        let hyper = Hyperparams::new(0.01, 3, 3).unwrap();
        let theta0 = ToyDiagonalProblem::default_init();
        let noised = make_schedule(3, &hyper, SamplingPolicy::NoisedFullBatch, 4).unwrap();
        let plain = make_schedule(3, &hyper, SamplingPolicy::FullBatch, 4).unwrap();
        let a = run_epoch(
            &p,
            &theta0,
            &noised,
            &hyper,
            NoiseSpec::GaussianIsotropic { sigma: 0.0 },
        )
        .unwrap();
        let b = run_epoch(&p, &theta0, &plain, &hyper, NoiseSpec::None).unwrap();
        assert_eq!(a.final_theta(), b.final_theta());
    }

    #[test]
    fn determinism_same_seed_same_trajectory() {
        let p = ToyDiagonalProblem::new();
        let hyper = Hyperparams::new(0.01, 3, 1).unwrap();
        let theta0 = ToyDiagonalProblem::default_init();
        let a = run_epochs(
            &p,
            &theta0,
            &hyper,
            SamplingPolicy::WithoutReplacement,
            20,
            42,
            NoiseSpec::None,
        )
        .unwrap();
        let b = run_epochs(
            &p,
            &theta0,
            &hyper,
            SamplingPolicy::WithoutReplacement,
            20,
            42,
            NoiseSpec::None,
        )
        .unwrap();
        assert_eq!(a.final_theta(), b.final_theta());
        assert_eq!(a.losses, b.losses);
    }
}

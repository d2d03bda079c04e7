//! Closed-form epoch-count predictions (flat travel, saddle escape, edge of
//! stability) and their measured counterparts.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::problem::{eval_loss, Hyperparams, LossOracle, ParamVector};
use crate::schedule::{epoch_seed, make_schedule, SamplingPolicy};
use crate::optimize::{run_epoch, NoiseSpec};

/// What kind of region a forecast covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ForecastKind {
    Strict,
    HighOrder,
    FlatTravel,
}

/// Predicted epoch count for a drift-powered traversal or escape.
#[derive(Debug, Clone, Serialize)]
pub struct SaddleForecast {
    pub u: f64,
    pub lambda: f64,
    pub epochs_predicted: f64,
    pub kind: ForecastKind,
}

/// Epochs for SGD without replacement to travel unit distance along a kernel
/// direction with overlap `u`: `2 b / (eta c^2 |u|)`.
pub fn flat_travel_epochs(u: f64, hyper: &Hyperparams) -> Result<SaddleForecast> {
    if u == 0.0 {
        return Err(Error::NoDriftDirection);
    }
    let c = hyper.c();
    Ok(SaddleForecast {
        u,
        lambda: 0.0,
        epochs_predicted: 2.0 * hyper.b as f64 / (hyper.eta * c * c * u.abs()),
        kind: ForecastKind::FlatTravel,
    })
}

/// Epochs to escape a strict saddle with negative eigenvalue `lambda`:
/// `2 (ln eta + ln |u| + 2 ln c - ln b) / (c lambda)`.
pub fn strict_saddle_epochs(u: f64, lambda: f64, hyper: &Hyperparams) -> Result<SaddleForecast> {
    if lambda >= 0.0 {
        return Err(Error::NotAStrictSaddle(lambda));
    }
    if u == 0.0 {
        return Err(Error::NoDriftDirection);
    }
    let c = hyper.c();
    let epochs = 2.0 * (hyper.eta.ln() + u.abs().ln() + 2.0 * c.ln() - (hyper.b as f64).ln())
        / (c * lambda);
    Ok(SaddleForecast {
        u,
        lambda,
        epochs_predicted: epochs,
        kind: ForecastKind::Strict,
    })
}

/// High-order saddles share the flat-travel count `2 b / (eta c^2 |u|)`,
/// independently of the saddle's order.
pub fn highorder_saddle_epochs(u: f64, hyper: &Hyperparams) -> Result<SaddleForecast> {
    let mut f = flat_travel_epochs(u, hyper)?;
    f.kind = ForecastKind::HighOrder;
    Ok(f)
}

/// Edge-of-stability breaking-point forecast.
#[derive(Debug, Clone, Serialize)]
pub struct EoSForecast {
    pub lambda1: f64,
    pub lambda2: f64,
    pub u: f64,
    pub grad_norm: f64,
    pub alpha_eos: f64,
    /// Whether `lambda1 >= 1/eta + alpha_eos`.
    pub threshold_met: bool,
}

/// `alpha_EoS = (1/c) |ln(c^2 lambda1 lambda2 |grad| / u)|`, requiring
/// `lambda2 > 1/eta`, `u > 0`, and a positive gradient norm.
pub fn eos_alpha(
    lambda1: f64,
    lambda2: f64,
    u: f64,
    grad_norm: f64,
    hyper: &Hyperparams,
) -> Result<EoSForecast> {
    let mut violated = Vec::new();
    if lambda2 < 1.0 / hyper.eta {
        violated.push(format!(
            "lambda2 = {lambda2} must be at least 1/eta = {}",
            1.0 / hyper.eta
        ));
    }
    if u <= 0.0 {
        violated.push(format!("u = {u} must be positive"));
    }
    if grad_norm <= 0.0 {
        violated.push(format!("grad_norm = {grad_norm} must be positive"));
    }
    if !violated.is_empty() {
        return Err(Error::HypothesisNotMet(violated.join("; ")));
    }
    let c = hyper.c();
    let alpha = (c * c * lambda1 * lambda2 * grad_norm / u).ln().abs() / c;
    Ok(EoSForecast {
        lambda1,
        lambda2,
        u,
        grad_norm,
        alpha_eos: alpha,
        threshold_met: lambda1 >= 1.0 / hyper.eta + alpha,
    })
}

/// GD epoch multiplier `beta = lambda^{-1} (exp(-c lambda) - 1)`, with the
/// `lambda -> 0` limit `-c`.
pub fn beta_continuous(lambda: f64, c: f64) -> f64 {
    if lambda.abs() < 1e-12 {
        -c
    } else {
        ((-c * lambda).exp() - 1.0) / lambda
    }
}

/// Discrete form `beta = lambda^{-1} ((1 - eta lambda)^k - 1)`, available
/// for cross-checking at moderate `eta lambda`.
pub fn beta_discrete(lambda: f64, hyper: &Hyperparams) -> f64 {
    if lambda.abs() < 1e-12 {
        -hyper.c()
    } else {
        ((1.0 - hyper.eta * lambda).powi(hyper.k as i32) - 1.0) / lambda
    }
}

/// One epoch row of the closed-form saddle path.
#[derive(Debug, Clone, Serialize)]
pub struct PathRow {
    pub epoch: usize,
    /// Displacement along the analyzed direction.
    pub position: f64,
    /// The regularizer's share of the displacement.
    pub reg_effect: f64,
    /// The GD share of the displacement.
    pub gd_effect: f64,
    /// First-order gradient change `lambda * position`.
    pub grad_offset: f64,
    /// Cumulative loss change along the direction.
    pub loss_change: f64,
}

/// Closed-form per-epoch table for motion along one eigendirection.
#[derive(Debug, Clone, Serialize)]
pub struct ClosedFormSaddlePath {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub rows: Vec<PathRow>,
}

/// Evaluate the closed-form path
/// `theta_m - theta = -(lambda beta)^{-1} ((1 + lambda beta)^m - 1) alpha
///  + lambda^{-1} ((1 + lambda beta)^m - 1) beta-normalized GD part`,
/// with the `lambda beta -> 0` limit `m (-alpha + beta grad)`.
pub fn saddle_closed_form_path(
    alpha: f64,
    beta: f64,
    lambda: f64,
    grad_component: f64,
    m_max: usize,
) -> ClosedFormSaddlePath {
    let lb = lambda * beta;
    let mut rows = Vec::with_capacity(m_max + 1);
    let mut prev_pos = 0.0;
    let mut loss = 0.0;
    for m in 0..=m_max {
        let (reg, gd) = if lb.abs() < 1e-12 {
            (-(m as f64) * alpha, m as f64 * beta * grad_component)
        } else {
            let growth = (1.0 + lb).powi(m as i32) - 1.0;
            (-(growth / lb) * alpha, growth / lambda * grad_component)
        };
        let pos = reg + gd;
        if m > 0 {
            let step = pos - prev_pos;
            loss += grad_component * step + 1.5 * lambda * step * step;
        }
        rows.push(PathRow {
            epoch: m,
            position: pos,
            reg_effect: reg,
            gd_effect: gd,
            grad_offset: lambda * pos,
            loss_change: loss,
        });
        prev_pos = pos;
    }
    ClosedFormSaddlePath {
        alpha,
        beta,
        lambda,
        rows,
    }
}

/// Smallest epoch count after which the running full-batch loss has dropped
/// by at least `loss_drop` from its value at `theta_saddle`; `max_epochs + 1`
/// if that never happens. Fresh shuffle every epoch (Shuffle Once keeps its
/// schedule). A divergent epoch counts as escaped at that epoch.
pub fn measure_escape_epochs<O: LossOracle + ?Sized>(
    oracle: &O,
    theta_saddle: &ParamVector,
    hyper: &Hyperparams,
    policy: SamplingPolicy,
    loss_drop: f64,
    max_epochs: usize,
    seed: u64,
) -> Result<usize> {
    if loss_drop <= 0.0 {
        return Err(Error::InvalidConfig("loss_drop must be positive".into()));
    }
    let n = oracle.n_examples();
    let full: Vec<usize> = (0..n).collect();
    let l0 = eval_loss(oracle, theta_saddle, &full)?;
    let mut theta = theta_saddle.clone();
    for epoch in 1..=max_epochs {
        let sched_seed = match policy {
            SamplingPolicy::ShuffleOnce => seed,
            _ => epoch_seed(seed, epoch as u64),
        };
        let schedule = make_schedule(n, hyper, policy, sched_seed)?;
        match run_epoch(oracle, &theta, &schedule, hyper, NoiseSpec::None) {
            Ok(rec) => theta = rec.final_theta().clone(),
            Err(Error::DivergenceDetected { .. }) => return Ok(epoch),
            Err(e) => return Err(e),
        }
        if l0 - eval_loss(oracle, &theta, &full)? >= loss_drop {
            return Ok(epoch);
        }
    }
    Ok(max_epochs + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn flat_travel_examples() {
        let hyper = Hyperparams::new(0.01, 100, 1).unwrap();
        let f = flat_travel_epochs(0.5, &hyper).unwrap();
        assert_relative_eq!(f.epochs_predicted, 400.0, epsilon = 1e-10);
        // Doubling b doubles the count.
        let hyper2 = Hyperparams::new(0.01, 100, 2).unwrap();
        let f2 = flat_travel_epochs(0.5, &hyper2).unwrap();
        assert_relative_eq!(f2.epochs_predicted, 800.0, epsilon = 1e-10);
        assert!(matches!(
            flat_travel_epochs(0.0, &hyper),
            Err(Error::NoDriftDirection)
        ));
    }

    #[test]
    fn strict_saddle_examples() {
        // eta = 0.01, c = 1, b = 1, u = 1, lambda = -1 -> 2 ln(0.01)/(-1).
        let hyper = Hyperparams::new(0.01, 100, 1).unwrap();
        let f = strict_saddle_epochs(1.0, -1.0, &hyper).unwrap();
        assert_relative_eq!(f.epochs_predicted, -2.0 * 0.01f64.ln(), epsilon = 1e-10);
        assert!(f.epochs_predicted > 9.2 && f.epochs_predicted < 9.22);
        // Smaller eta increases the count.
        let hyper_small = Hyperparams::new(0.005, 200, 1).unwrap();
        let f2 = strict_saddle_epochs(1.0, -1.0, &hyper_small).unwrap();
        assert!(f2.epochs_predicted > f.epochs_predicted);
        assert!(matches!(
            strict_saddle_epochs(1.0, 0.5, &hyper),
            Err(Error::NotAStrictSaddle(_))
        ));
        assert!(matches!(
            strict_saddle_epochs(0.0, -1.0, &hyper),
            Err(Error::NoDriftDirection)
        ));
    }

    #[test]
    fn highorder_matches_flat_travel() {
        let hyper = Hyperparams::new(0.1, 10, 2).unwrap();
        let a = highorder_saddle_epochs(1.0, &hyper).unwrap();
        let b = flat_travel_epochs(1.0, &hyper).unwrap();
        assert_eq!(a.epochs_predicted, b.epochs_predicted);
        assert_relative_eq!(a.epochs_predicted, 40.0, epsilon = 1e-12);
    }

    #[test]
    fn eos_examples() {
        // c = 1, lambda1 = lambda2 = 100, grad = 1e-4, u = 1 -> alpha = 0.
        let hyper = Hyperparams::new(0.01, 100, 1).unwrap();
        let f = eos_alpha(100.0, 100.0, 1.0, 1e-4, &hyper).unwrap();
        assert_relative_eq!(f.alpha_eos, 0.0, epsilon = 1e-12);
        let f = eos_alpha(100.0, 100.0, 1.0, 1e-2, &hyper).unwrap();
        assert_relative_eq!(f.alpha_eos, 100.0f64.ln(), epsilon = 1e-12);
        let err = eos_alpha(100.0, 50.0, 1.0, 1e-2, &hyper).unwrap_err();
        match err {
            Error::HypothesisNotMet(msg) => assert!(msg.contains("lambda2")),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn eos_scales_inversely_with_c_at_fixed_log_argument() {
        // Keep the log argument fixed while doubling c: alpha halves,
        // i.e. alpha ~ b/eta at a fixed dataset.
        let hyper1 = Hyperparams::new(0.01, 200, 1).unwrap(); // c = 2
        let hyper2 = Hyperparams::new(0.02, 200, 1).unwrap(); // c = 4
        let g = 1e-3;
        let u1 = 1.0;
        let arg = hyper1.c().powi(2) * 300.0 * 250.0 * g / u1;
        let u2 = hyper2.c().powi(2) * 300.0 * 250.0 * g / arg;
        let a1 = eos_alpha(300.0, 250.0, u1, g, &hyper1).unwrap().alpha_eos;
        let a2 = eos_alpha(300.0, 250.0, u2, g, &hyper2).unwrap().alpha_eos;
        assert_relative_eq!(a1 / a2, 2.0, epsilon = 1e-10);
    }

    #[test]
    fn closed_form_path_basics() {
        // alpha = 0, grad = 0 -> identically zero path.
        let p = saddle_closed_form_path(0.0, -1.0, 0.5, 0.0, 5);
        assert!(p.rows.iter().all(|r| r.position == 0.0 && r.loss_change == 0.0));
        assert_eq!(p.rows[0].position, 0.0);
        // One epoch: -alpha + beta * grad.
        let p = saddle_closed_form_path(0.3, -0.9, 0.5, 0.2, 3);
        assert_relative_eq!(p.rows[1].position, -0.3 + (-0.9) * 0.2, epsilon = 1e-12);
        // lambda -> 0 limit: theta_m - theta = m (-alpha + beta grad) with
        // beta -> -c.
        let c = 1.3;
        let beta0 = beta_continuous(0.0, c);
        assert_relative_eq!(beta0, -c, epsilon = 1e-12);
        let p = saddle_closed_form_path(0.1, beta0, 0.0, 0.05, 4);
        for (m, row) in p.rows.iter().enumerate() {
            assert_relative_eq!(
                row.position,
                m as f64 * (-0.1 + beta0 * 0.05),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn beta_forms_agree_at_moderate_eta_lambda() {
        let hyper = Hyperparams::new(0.001, 1000, 1).unwrap();
        for lambda in [0.3, 1.0, -0.5] {
            let cont = beta_continuous(lambda, hyper.c());
            let disc = beta_discrete(lambda, &hyper);
            assert_relative_eq!(cont, disc, max_relative = 1e-3);
        }
    }

    #[test]
    fn forecast_monotonicities() {
        let base = Hyperparams::new(0.01, 100, 1).unwrap();
        let f = |u: f64, h: &Hyperparams| flat_travel_epochs(u, h).unwrap().epochs_predicted;
        // Increases in b.
        let hb = Hyperparams::new(0.01, 100, 3).unwrap();
        assert!(f(1.0, &hb) > f(1.0, &base));
        // Decreases in |u| and eta.
        assert!(f(2.0, &base) < f(1.0, &base));
        let he = Hyperparams::new(0.02, 100, 1).unwrap();
        assert!(f(1.0, &he) < f(1.0, &base));
    }
}

//! The bias operators H, S_i, scal-S_i, A_i, the regime table for S entries,
//! the predicted per-epoch regularizer step, the scalar regularizer, the
//! error-size bound, and the Fisher-Hessian gap check.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::expectation::{exact_expected_deviation, mc_expected_deviation, ExpectationEstimate};
use crate::problem::{
    grad, hessian, hessian_spectrum, third_derivative_contraction, HessianSpectrum, Hyperparams,
    LossOracle, ParamVector,
};
use crate::schedule::{BatchSchedule, SamplingPolicy};

/// Cap on k for exact series evaluation.
pub const MAX_SERIES_K: usize = 10_000;

/// Relative pseudo-inverse tolerance for all dagger operations.
pub const PINV_REL_TOL: f64 = 1e-10;

/// `H = (c^2 / 2n) (E[(hess)^2] - (full hess)^2)`, the batch-to-batch
/// Hessian variance term.
pub fn variance_hessian_h<O: LossOracle + ?Sized>(
    oracle: &O,
    theta: &ParamVector,
    hyper: &Hyperparams,
) -> Result<DMatrix<f64>> {
    let n = oracle.n_examples();
    let d = oracle.dim();
    let full: Vec<usize> = (0..n).collect();
    let hbar = hessian(oracle, theta, &full)?;
    let mut e2 = DMatrix::zeros(d, d);
    for z in 0..n {
        let hz = oracle.hessian(theta, z);
        e2 += &hz * &hz;
    }
    e2 /= n as f64;
    let c = hyper.c();
    Ok(crate::problem::symmetrize(
        &((e2 - &hbar * &hbar) * (c * c / (2.0 * n as f64))),
    ))
}

/// Diagonal entry of `S_i` at eigenvalue `lambda`:
/// `(eta^2 / 2c) sum_{j=i+2}^{k} C(k,j) (-eta lambda)^{j-i-2}`,
/// summed in ascending magnitude with compensated accumulation.
pub fn s_entry(i: usize, lambda: f64, hyper: &Hyperparams) -> Result<f64> {
    let k = hyper.k;
    if i + 2 > k {
        return Err(Error::InvalidConfig(format!(
            "s_entry needs i <= k-2, got i={i}, k={k}"
        )));
    }
    if k > MAX_SERIES_K {
        return Err(Error::NumericalFailure(format!(
            "exact series capped at k = {MAX_SERIES_K}; use the regime table"
        )));
    }
    let eta = hyper.eta;
    let x = -eta * lambda;
    // term_j = C(k, j) x^{j-i-2}, built by ratio recurrence.
    let mut terms = Vec::with_capacity(k - i - 1);
    let mut binom = 1.0f64;
    for t in 1..=i + 2 {
        binom *= (k - t + 1) as f64 / t as f64;
    }
    let mut term = binom; // j = i+2, power x^0
    for j in i + 2..=k {
        if !term.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "binomial series overflow at k={k}, |eta*lambda|={}; \
                 the regime is outside the exact series' range",
                x.abs()
            )));
        }
        terms.push(term);
        term *= (k - j) as f64 / (j + 1) as f64 * x;
    }
    terms.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).expect("finite terms"));
    Ok(eta * eta / (2.0 * hyper.c()) * kahan_sum(&terms))
}

/// The alternative closed form of the same entry,
/// `(eta^2/2c) (-eta lambda)^{-(i+2)} ([1 - eta lambda]^k -
///  sum_{j=0}^{i+1} C(k,j) (-eta lambda)^j)`, for cross-checking.
pub fn s_entry_closed(i: usize, lambda: f64, hyper: &Hyperparams) -> Result<f64> {
    let (eta, k) = (hyper.eta, hyper.k);
    debug_assert!(i + 2 <= k);
    let x = -eta * lambda;
    if x == 0.0 {
        return Err(Error::NumericalFailure(
            "closed form is singular at lambda = 0; use the series".into(),
        ));
    }
    let mut partial = 0.0f64;
    let mut binom = 1.0f64;
    let mut power = 1.0f64;
    for j in 0..=i + 1 {
        partial += binom * power;
        binom *= (k - j) as f64 / (j + 1) as f64;
        power *= x;
    }
    let lead = (1.0 - eta * lambda).powi(k as i32);
    Ok(eta * eta / (2.0 * hyper.c()) * (lead - partial) / x.powi(i as i32 + 2))
}

fn kahan_sum(terms: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &t in terms {
        let y = t - comp;
        let s = sum + y;
        comp = (s - sum) - y;
        sum = s;
    }
    sum
}

/// `S_i` assembled in the Hessian eigenbasis.
pub fn s_matrix(i: usize, spectrum: &HessianSpectrum, hyper: &Hyperparams) -> Result<DMatrix<f64>> {
    let entries: Vec<f64> = spectrum
        .eigenvalues
        .iter()
        .map(|&l| s_entry(i, l, hyper))
        .collect::<Result<_>>()?;
    let diag = DMatrix::from_diagonal(&DVector::from_vec(entries));
    Ok(&spectrum.eigenvectors * diag * spectrum.eigenvectors.transpose())
}

/// Combined weight `sum_{h=0}^{k-2} (-eta lambda_a)^h (S_h)(lambda_l)`:
/// the coefficient that multiplies `d/dtheta_a Cov_{l,l}` in the whole
/// regularizer. Evaluated as
/// `(eta^2/2c) sum_{m=0}^{k-2} C(k, m+2) h_m(x_a, x_l)` with
/// `h_m` the complete homogeneous symmetric polynomial in
/// `x = -eta lambda`.
pub fn s_weighted_entry(lambda_a: f64, lambda_l: f64, hyper: &Hyperparams) -> Result<f64> {
    let (eta, k) = (hyper.eta, hyper.k);
    if k < 2 {
        return Ok(0.0);
    }
    if k > MAX_SERIES_K {
        return Err(Error::NumericalFailure(format!(
            "exact series capped at k = {MAX_SERIES_K}"
        )));
    }
    let xa = -eta * lambda_a;
    let xl = -eta * lambda_l;
    let mut terms = Vec::with_capacity(k - 1);
    let mut binom = (k * (k - 1)) as f64 / 2.0; // C(k, 2)
    let mut homog = 1.0f64; // h_0 = 1
    let mut xl_pow = 1.0f64;
    for m in 0..=k - 2 {
        let term = binom * homog;
        if !term.is_finite() {
            return Err(Error::NumericalFailure(
                "weighted S series overflow; regime outside the series range".into(),
            ));
        }
        terms.push(term);
        binom *= (k - m - 2) as f64 / (m + 3) as f64;
        xl_pow *= xl;
        homog = xa * homog + xl_pow; // h_{m+1} = xa h_m + xl^{m+1}
    }
    terms.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).expect("finite terms"));
    Ok(eta * eta / (2.0 * hyper.c()) * kahan_sum(&terms))
}

/// Regime classification of an `(c lambda_i, c lambda_j)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Regime {
    BothSmall,
    ISmallJBig,
    IBigJSmall,
    BothBig,
    JNegative,
    /// Outside the tabulated asymptotic zones; the exact series value is
    /// reported instead.
    Interpolated,
}

/// One tabulated entry of the S regime table.
#[derive(Debug, Clone, Serialize)]
pub struct RegimeEntry {
    pub lambda_i: f64,
    pub lambda_j: f64,
    pub regime: Regime,
    pub value: f64,
    /// True when the value is an order-of-magnitude lower bound only
    /// (the JNegative row).
    pub order_only: bool,
}

/// Thresholds: |c lambda| <= 0.1 is "small", c lambda >= 5 is "big",
/// c lambda <= -5 is "negative"; anything else falls back to the exact
/// series with regime `Interpolated`.
pub fn s_entry_table(lambda_i: f64, lambda_j: f64, hyper: &Hyperparams) -> Result<RegimeEntry> {
    let c = hyper.c();
    let (ci, cj) = (c * lambda_i, c * lambda_j);
    let small = |x: f64| x.abs() <= 0.1;
    let big = |x: f64| x >= 5.0;
    let (regime, value, order_only) = if small(ci) && small(cj) {
        (Regime::BothSmall, c / 4.0, false)
    } else if big(ci) && small(cj) {
        (Regime::IBigJSmall, (c / 2.0) / ci, false)
    } else if small(ci) && big(cj) {
        (Regime::ISmallJBig, (c / 2.0) / cj, false)
    } else if big(ci) && big(cj) {
        let osc = (-hyper.eta * lambda_i).powi(hyper.k as i32);
        (Regime::BothBig, (c / 2.0) * (1.0 + osc) / (ci * cj), false)
    } else if cj <= -5.0 && small(ci) {
        (
            Regime::JNegative,
            (c / 2.0) * (-cj).exp() / (cj * cj),
            true,
        )
    } else {
        (
            Regime::Interpolated,
            s_weighted_entry(lambda_i, lambda_j, hyper)?,
            false,
        )
    };
    Ok(RegimeEntry {
        lambda_i,
        lambda_j,
        regime,
        value,
        order_only,
    })
}

/// Regime selector for the `S_0` closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum S0Regime {
    SmallCLambda,
    LargePositive,
    LargeNegative,
}

/// Closed-form approximations of the `S_0` entry at eigenvalue `lambda` with
/// Hessian-variance entry `h_entry`.
///
/// Small-`c lambda`: `(c/4) [Z(H) - c lambda (1 - W(H)) / H]` with
/// `Z(H) = (sqrt(pi H) erf(sqrt H) + e^{-H} - 1)/H` and
/// `W(H) = (sqrt(pi)/2) erf(sqrt H)/sqrt(H)`, the closed forms of the two
/// alternating series whose leading terms are
/// `1 - H/6 + H^2/30` and `1/3 - H/10 + H^2/42`. For `H < 1e-6` the series
/// `(c/4)(1 - c lambda/3 - H/6 + c lambda H/10 + H^2/30 - c lambda H^2/42)`
/// avoids the 0/0.
pub fn s0_approximation(
    lambda: f64,
    h_entry: f64,
    hyper: &Hyperparams,
    regime: S0Regime,
) -> f64 {
    let c = hyper.c();
    let cl = c * lambda;
    match regime {
        S0Regime::SmallCLambda => {
            let h = h_entry;
            if h < 1e-6 {
                c / 4.0
                    * (1.0 - cl / 3.0 - h / 6.0 + cl * h / 10.0 + h * h / 30.0
                        - cl * h * h / 42.0)
            } else {
                let sqrt_h = h.sqrt();
                let w = (std::f64::consts::PI.sqrt() / 2.0) * erf(sqrt_h) / sqrt_h;
                let z = ((std::f64::consts::PI * h).sqrt() * erf(sqrt_h) + (-h).exp() - 1.0) / h;
                c / 4.0 * (z - cl * (1.0 - w) / h)
            }
        }
        S0Regime::LargePositive => 1.0 / (2.0 * lambda),
        S0Regime::LargeNegative => {
            0.5 / (lambda * lambda) * (-cl).exp() * ((-h_entry).exp() - 4.0 * h_entry / cl)
        }
    }
}

/// `A_i = (-eta hess)^i` in the eigenbasis (the mean-field convention).
pub fn a_matrix(i: usize, spectrum: &HessianSpectrum, hyper: &Hyperparams) -> DMatrix<f64> {
    spectrum.map_matrix(|l| (-hyper.eta * l).powi(i as i32))
}

/// Directional derivative of the gradient covariance,
/// `d/dt Cov_{z}(grad L(theta + t v, z))` at `t = 0`, analytic mode.
///
/// Requires a unit direction.
pub fn covariance_gradient<O: LossOracle + ?Sized>(
    oracle: &O,
    theta: &ParamVector,
    direction: &ParamVector,
) -> Result<DMatrix<f64>> {
    assert!(
        (direction.norm() - 1.0).abs() < 1e-8,
        "direction must be a unit vector"
    );
    let n = oracle.n_examples();
    let d = oracle.dim();
    let mut acc = DMatrix::zeros(d, d);
    let mut gbar = DVector::zeros(d);
    let mut hvbar = DVector::zeros(d);
    for z in 0..n {
        let g = oracle.gradient(theta, z);
        let hv = oracle.hessian(theta, z) * direction;
        acc += &hv * g.transpose() + &g * hv.transpose();
        gbar += g;
        hvbar += hv;
    }
    acc /= n as f64;
    gbar /= n as f64;
    hvbar /= n as f64;
    acc -= &hvbar * gbar.transpose() + &gbar * hvbar.transpose();
    Ok(acc)
}

/// Finite-difference counterpart of [`covariance_gradient`].
pub fn covariance_gradient_fd<O: LossOracle + ?Sized>(
    oracle: &O,
    theta: &ParamVector,
    direction: &ParamVector,
) -> Result<DMatrix<f64>> {
    let h = crate::problem::fd_step(theta);
    let cov = |point: &ParamVector| -> DMatrix<f64> {
        let n = oracle.n_examples();
        let d = oracle.dim();
        let mut e_ggt = DMatrix::zeros(d, d);
        let mut gbar = DVector::zeros(d);
        for z in 0..n {
            let g = oracle.gradient(point, z);
            e_ggt += &g * g.transpose();
            gbar += g;
        }
        e_ggt /= n as f64;
        gbar /= n as f64;
        e_ggt - &gbar * gbar.transpose()
    };
    let plus = cov(&(theta + direction * h));
    let minus = cov(&(theta - direction * h));
    Ok((plus - minus) / (2.0 * h))
}

/// Prefactor of the predicted step: `c / (n - 1) = eta k / (n - 1)`.
///
/// This is the finite-n coefficient that matches exact enumeration; for a
/// full partition (`k b = n`) it equals `eta/(b-1) * (n-k)/(n-1)`, so it
/// reproduces the `eta/(b-1)` scaling at large batch counts while staying
/// finite at `b = 1`.
pub fn step_prefactor(n: usize, hyper: &Hyperparams) -> f64 {
    hyper.c() / (n as f64 - 1.0)
}

/// Predicted per-epoch regularizer step in the canonical basis.
///
/// Along the eigenvector of `lambda_a` the step is
/// `-(c/(n-1)) [ sum_l W(lambda_a, lambda_l) (d/dv_a Cov)_{l,l}
///   + sum_j (-eta lambda_a)^j (2 hess scal_j grad)_a ]`
/// with `W` the [`s_weighted_entry`] coefficient. The gradient term uses the
/// scal matrices and vanishes at stationary points.
pub fn regularizer_step<O: LossOracle + ?Sized>(
    oracle: &O,
    theta: &ParamVector,
    hyper: &Hyperparams,
) -> Result<ParamVector> {
    let n = oracle.n_examples();
    if n < 2 {
        return Ok(DVector::zeros(oracle.dim()));
    }
    let d = oracle.dim();
    let spectrum = hessian_spectrum(oracle, theta)?;
    let full: Vec<usize> = (0..n).collect();
    let hbar = hessian(oracle, theta, &full)?;
    let gbar = grad(oracle, theta, &full)?;
    let pref = step_prefactor(n, hyper);

    let mut step_eigen = DVector::zeros(d);
    for a in 0..d {
        let va = spectrum.eigenvectors.column(a).clone_owned();
        let dcov = covariance_gradient(oracle, theta, &va)?;
        let dcov_eigen =
            spectrum.eigenvectors.transpose() * dcov * &spectrum.eigenvectors;
        let mut acc = 0.0;
        for l in 0..d {
            acc += s_weighted_entry(spectrum.eigenvalues[a], spectrum.eigenvalues[l], hyper)?
                * dcov_eigen[(l, l)];
        }
        step_eigen[a] = -pref * acc;
    }

    // Gradient term through the scal matrices, non-zero only away from
    // stationary points.
    if gbar.norm() > 0.0 {
        let h_mat = variance_hessian_h(oracle, theta, hyper)?;
        let mut extra = DVector::zeros(d);
        for j in 0..=hyper.k.saturating_sub(2) {
            let scal = scal_matrix(j, &spectrum, &h_mat, hyper)?;
            let grad_term = &hbar * scal * &gbar * 2.0;
            let a_j = a_matrix(j, &spectrum, hyper);
            extra += a_j * grad_term;
        }
        step_eigen -= spectrum.to_eigenbasis(&(extra * pref));
    }

    Ok(spectrum.from_eigenbasis(&step_eigen))
}

/// `scal_i = [I - eta hess]^{2 dagger} H S_i`, with the pseudo-inverse
/// zeroing eigenvalues where `|1 - eta lambda|` falls below the relative
/// tolerance.
pub fn scal_matrix(
    i: usize,
    spectrum: &HessianSpectrum,
    h_matrix: &DMatrix<f64>,
    hyper: &Hyperparams,
) -> Result<DMatrix<f64>> {
    let max_mag = spectrum
        .eigenvalues
        .iter()
        .map(|&l| (1.0 - hyper.eta * l).abs())
        .fold(0.0f64, f64::max);
    let tol = PINV_REL_TOL * max_mag;
    let pinv2 = spectrum.map_matrix(|l| {
        let m = 1.0 - hyper.eta * l;
        if m.abs() < tol {
            0.0
        } else {
            1.0 / (m * m)
        }
    });
    Ok(pinv2 * h_matrix * s_matrix(i, spectrum, hyper)?)
}

/// Scalar regularizer for a fixed schedule:
/// `1/2 sum_{i<j} eta grad(B_j)^T [prod (I - eta hess(B_h))] eta grad(B_i)`
/// minus the same quantity evaluated on full batches, the latter in its
/// closed form `1/2 grad^T [hess]^{2 dagger} ([I - eta hess]^k
/// + eta k hess - I) grad`. The two parts cancel when every batch is the
/// full dataset.
pub fn regularizer_value<O: LossOracle + ?Sized>(
    oracle: &O,
    theta: &ParamVector,
    hyper: &Hyperparams,
    schedule: Option<&BatchSchedule>,
) -> Result<f64> {
    match schedule {
        Some(s) => regularizer_value_fixed(oracle, theta, hyper, s),
        None => {
            let n = oracle.n_examples();
            let schedules = crate::schedule::enumerate_schedules(
                n,
                hyper,
                SamplingPolicy::WithoutReplacement,
                crate::expectation::ENUMERATION_BUDGET,
            )?;
            let vals = crate::par::run_indexed(schedules.len(), |i| {
                let s = BatchSchedule::fixed(
                    schedules[i].clone(),
                    SamplingPolicy::WithoutReplacement,
                );
                regularizer_value_fixed(oracle, theta, hyper, &s)
            });
            let mut acc = 0.0;
            let mut count = 0usize;
            for v in vals {
                acc += v?;
                count += 1;
            }
            Ok(acc / count as f64)
        }
    }
}

fn regularizer_value_fixed<O: LossOracle + ?Sized>(
    oracle: &O,
    theta: &ParamVector,
    hyper: &Hyperparams,
    schedule: &BatchSchedule,
) -> Result<f64> {
    let k = schedule.k();
    let d = oracle.dim();
    let eta = hyper.eta;
    let grads: Vec<ParamVector> = schedule
        .batches
        .iter()
        .map(|b| grad(oracle, theta, b))
        .collect::<Result<_>>()?;
    let hesss: Vec<DMatrix<f64>> = schedule
        .batches
        .iter()
        .map(|b| hessian(oracle, theta, b))
        .collect::<Result<_>>()?;
    let eye = DMatrix::identity(d, d);
    let mut double = 0.0;
    for i in 0..k {
        let mut prop = grads[i].clone();
        for j in i + 1..k {
            double += grads[j].dot(&prop);
            prop = (&eye - &hesss[j] * eta) * prop;
        }
    }
    let sgd_part = 0.5 * eta * eta * double;

    // Full-batch closed form via the spectrum.
    let spectrum = hessian_spectrum(oracle, theta)?;
    let full: Vec<usize> = (0..oracle.n_examples()).collect();
    let gbar = grad(oracle, theta, &full)?;
    let g_eigen = spectrum.to_eigenbasis(&gbar);
    let max_mag = spectrum
        .eigenvalues
        .iter()
        .map(|l| l.abs())
        .fold(0.0f64, f64::max);
    let tol = PINV_REL_TOL * max_mag;
    let mut gd_part = 0.0;
    for l in 0..d {
        let lam = spectrum.eigenvalues[l];
        if lam.abs() < tol {
            continue;
        }
        let coeff = ((1.0 - eta * lam).powi(k as i32) + eta * k as f64 * lam - 1.0)
            / (lam * lam);
        gd_part += 0.5 * coeff * g_eigen[l] * g_eigen[l];
    }
    Ok(sgd_part - gd_part)
}

/// Order-of-magnitude error bound for the regularizer prediction:
/// the larger of the flat-direction bound `c^3/(12 b) |T:Cov|` and the
/// curved-direction bound `eta c^2/(4 b) |hess (T:Cov)|`, with `T:Cov` the
/// third derivative contracted with the gradient covariance and the O(.)
/// constants set to 1.
pub fn error_bound<O: LossOracle + ?Sized>(
    oracle: &O,
    theta: &ParamVector,
    hyper: &Hyperparams,
) -> Result<f64> {
    let n = oracle.n_examples();
    let d = oracle.dim();
    let full: Vec<usize> = (0..n).collect();
    let mut e_ggt = DMatrix::zeros(d, d);
    let mut gbar = DVector::zeros(d);
    for z in 0..n {
        let g = oracle.gradient(theta, z);
        e_ggt += &g * g.transpose();
        gbar += g;
    }
    e_ggt /= n as f64;
    gbar /= n as f64;
    let cov = e_ggt - &gbar * gbar.transpose();

    let mut contracted = DVector::zeros(d);
    for c in 0..d {
        let col = cov.column(c).clone_owned();
        let mut e_c = DVector::zeros(d);
        e_c[c] = 1.0;
        contracted += third_derivative_contraction(oracle, theta, &full, &col, &e_c)?;
    }
    let hbar = hessian(oracle, theta, &full)?;
    let c = hyper.c();
    let b = hyper.b as f64;
    let flat = c.powi(3) / (12.0 * b) * contracted.norm();
    let curved = hyper.eta * c * c / (4.0 * b) * (hbar * &contracted).norm();
    Ok(flat.max(curved))
}

/// Relative Frobenius gap between the empirical Fisher matrix
/// `E[grad grad^T]` and the full-batch Hessian.
pub fn fisher_hessian_gap<O: LossOracle + ?Sized>(
    oracle: &O,
    theta: &ParamVector,
) -> Result<f64> {
    let n = oracle.n_examples();
    let d = oracle.dim();
    let full: Vec<usize> = (0..n).collect();
    let mut fisher = DMatrix::zeros(d, d);
    for z in 0..n {
        let g = oracle.gradient(theta, z);
        fisher += &g * g.transpose();
    }
    fisher /= n as f64;
    let hbar = hessian(oracle, theta, &full)?;
    let h_norm = hbar.norm();
    if h_norm == 0.0 {
        return Err(Error::DegenerateProblem(
            "Hessian is identically zero (saturated model)".into(),
        ));
    }
    Ok((fisher - hbar).norm() / h_norm)
}

/// Overlap of a direction with the mean Hessian-gradient product.
#[derive(Debug, Clone)]
pub struct SaddleOverlap {
    pub v: ParamVector,
    pub u: f64,
}

/// `u = (1/n) sum_z <v, hess(z) grad(z)>` for a unit vector v.
pub fn overlap_u<O: LossOracle + ?Sized>(
    oracle: &O,
    theta: &ParamVector,
    v: &ParamVector,
) -> Result<SaddleOverlap> {
    assert!((v.norm() - 1.0).abs() < 1e-10, "v must be a unit vector");
    let n = oracle.n_examples();
    let mut u = 0.0;
    for z in 0..n {
        let g = oracle.gradient(theta, z);
        let hg = oracle.hessian(theta, z) * g;
        u += v.dot(&hg);
    }
    Ok(SaddleOverlap {
        v: v.clone(),
        u: u / n as f64,
    })
}

/// The operator bundle of the bias prediction at one point.
pub struct BiasOperators {
    pub h: DMatrix<f64>,
    pub s: Vec<DMatrix<f64>>,
    pub scal: Vec<DMatrix<f64>>,
    pub a: Vec<DMatrix<f64>>,
    pub basis: HessianSpectrum,
}

/// Assemble H, S_0..S_{k-2}, scal-S and A matrices at `theta`.
pub fn bias_operators<O: LossOracle + ?Sized>(
    oracle: &O,
    theta: &ParamVector,
    hyper: &Hyperparams,
) -> Result<BiasOperators> {
    let spectrum = hessian_spectrum(oracle, theta)?;
    let h = variance_hessian_h(oracle, theta, hyper)?;
    let count = hyper.k.saturating_sub(1).max(1);
    let mut s = Vec::with_capacity(count);
    let mut scal = Vec::with_capacity(count);
    let mut a = Vec::with_capacity(count);
    for i in 0..count.min(hyper.k.saturating_sub(1)) {
        s.push(s_matrix(i, &spectrum, hyper)?);
        scal.push(scal_matrix(i, &spectrum, &h, hyper)?);
        a.push(a_matrix(i, &spectrum, hyper));
    }
    Ok(BiasOperators {
        h,
        s,
        scal,
        a,
        basis: spectrum,
    })
}

impl BiasOperators {
    pub fn to_json(&self) -> serde_json::Value {
        let mat = |m: &DMatrix<f64>| -> Vec<f64> {
            m.row_iter()
                .flat_map(|r| r.iter().cloned().collect::<Vec<_>>())
                .collect()
        };
        serde_json::json!({
            "dim": self.basis.dim(),
            "layout": "row_major",
            "basis_eigenvalues": self.basis.eigenvalues.as_slice(),
            "basis_eigenvectors": mat(&self.basis.eigenvectors),
            "h": mat(&self.h),
            "s": self.s.iter().map(mat).collect::<Vec<_>>(),
            "scal": self.scal.iter().map(mat).collect::<Vec<_>>(),
            "a": self.a.iter().map(mat).collect::<Vec<_>>(),
        })
    }
}

/// How the empirical expected deviation is estimated in a bias report.
#[derive(Debug, Clone, Copy)]
pub enum EmpiricalMode {
    Exact,
    MonteCarlo { samples: u64, seed: u64 },
}

/// Predicted vs empirical per-epoch deviation at one point.
#[derive(Debug, Clone, Serialize)]
pub struct BiasReport {
    pub predicted_step: Vec<f64>,
    pub empirical_step: Vec<f64>,
    pub residual_norm: f64,
    pub gradient_scale: f64,
    pub error_bound: f64,
}

/// Build a [`BiasReport`] at `theta` under the given policy.
pub fn bias_report<O: LossOracle + ?Sized>(
    oracle: &O,
    theta: &ParamVector,
    hyper: &Hyperparams,
    policy: SamplingPolicy,
    mode: EmpiricalMode,
) -> Result<BiasReport> {
    let predicted = regularizer_step(oracle, theta, hyper)?;
    let empirical: ExpectationEstimate = match mode {
        EmpiricalMode::Exact => exact_expected_deviation(oracle, theta, hyper, policy)?,
        EmpiricalMode::MonteCarlo { samples, seed } => {
            mc_expected_deviation(oracle, theta, hyper, policy, samples, seed)?
        }
    };
    let empirical_vec = DVector::from_column_slice(empirical.value.as_slice());
    let residual = (&predicted - &empirical_vec).norm();
    let n = oracle.n_examples();
    let gradient_scale = (0..n)
        .map(|z| oracle.gradient(theta, z).norm())
        .sum::<f64>()
        / n as f64;
    Ok(BiasReport {
        predicted_step: predicted.as_slice().to_vec(),
        empirical_step: empirical_vec.as_slice().to_vec(),
        residual_norm: residual,
        gradient_scale,
        error_bound: error_bound(oracle, theta, hyper)?,
    })
}

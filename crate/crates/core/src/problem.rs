//! Optimization problems as datasets with per-example loss oracles.
//!
//! A [`LossOracle`] exposes the per-example loss and its derivatives up to
//! third order. Analytic derivatives are preferred; finite-difference
//! fallbacks are provided for the Hessian and the third-derivative
//! contraction.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// One training example, identified by its position in the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Datum {
    pub index: usize,
}

/// The index set `{0, .., n-1}` of a dataset bound to some oracle.
#[derive(Debug, Clone)]
pub struct Dataset {
    n: usize,
}

impl Dataset {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfig("dataset must be non-empty".into()));
        }
        Ok(Dataset { n })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn items(&self) -> impl Iterator<Item = Datum> + '_ {
        (0..self.n).map(|index| Datum { index })
    }

    /// The full batch `[0, n)`.
    pub fn full_batch(&self) -> Vec<usize> {
        (0..self.n).collect()
    }
}

/// Parameter vectors are dense real vectors.
pub type ParamVector = DVector<f64>;

/// Step size, steps per epoch, and batch size for one epoch of SGD.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Hyperparams {
    pub eta: f64,
    pub k: usize,
    pub b: usize,
}

impl Hyperparams {
    pub fn new(eta: f64, k: usize, b: usize) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::InvalidConfig(format!("eta must be positive, got {eta}")));
        }
        if k == 0 || b == 0 {
            return Err(Error::InvalidConfig("k and b must be at least 1".into()));
        }
        Ok(Hyperparams { eta, k, b })
    }

    /// Effective learning rate `c = eta * k`.
    pub fn c(&self) -> f64 {
        self.eta * self.k as f64
    }
}

/// Per-example loss with derivatives in the parameters.
///
/// `gradient` must match central finite differences of `loss`; the default
/// `hessian` and `third_contraction` fall back to finite differences of the
/// level below.
pub trait LossOracle: Sync {
    /// Parameter dimension `d`.
    fn dim(&self) -> usize;

    /// Number of examples `n`.
    fn n_examples(&self) -> usize;

    /// Loss of example `z` at `theta`.
    fn loss(&self, theta: &ParamVector, z: usize) -> f64;

    /// Gradient of example `z` at `theta`.
    fn gradient(&self, theta: &ParamVector, z: usize) -> ParamVector;

    /// Hessian of example `z` at `theta`. Defaults to central differences of
    /// the gradient with step `cbrt(eps) * (1 + |theta|)`.
    fn hessian(&self, theta: &ParamVector, z: usize) -> DMatrix<f64> {
        fd_hessian(self, theta, z)
    }

    /// `∇³L[., v, w]` for example `z`. Defaults to a central difference of
    /// `hessian * w` along `v`.
    fn third_contraction(
        &self,
        theta: &ParamVector,
        z: usize,
        v: &ParamVector,
        w: &ParamVector,
    ) -> ParamVector {
        fd_third_contraction(self, theta, z, v, w)
    }

    fn has_analytic_third(&self) -> bool {
        false
    }

    fn dataset(&self) -> Dataset {
        Dataset::new(self.n_examples()).expect("oracle has at least one example")
    }
}

/// Finite-difference step for second and third derivatives.
pub fn fd_step(theta: &ParamVector) -> f64 {
    f64::EPSILON.cbrt() * (1.0 + theta.norm())
}

/// Central-difference Hessian from the oracle's gradient.
pub fn fd_hessian<O: LossOracle + ?Sized>(oracle: &O, theta: &ParamVector, z: usize) -> DMatrix<f64> {
    let d = oracle.dim();
    let h = fd_step(theta);
    let mut out = DMatrix::zeros(d, d);
    let mut probe = theta.clone();
    for i in 0..d {
        probe[i] = theta[i] + h;
        let gp = oracle.gradient(&probe, z);
        probe[i] = theta[i] - h;
        let gm = oracle.gradient(&probe, z);
        probe[i] = theta[i];
        let col = (gp - gm) / (2.0 * h);
        out.set_column(i, &col);
    }
    out
}

/// Central difference of `hessian(theta) * w` along `v`.
pub fn fd_third_contraction<O: LossOracle + ?Sized>(
    oracle: &O,
    theta: &ParamVector,
    z: usize,
    v: &ParamVector,
    w: &ParamVector,
) -> ParamVector {
    let h = fd_step(theta);
    let scale = v.norm().max(1e-300);
    let step = v * (h / scale);
    let hp = oracle.hessian(&(theta + &step), z);
    let hm = oracle.hessian(&(theta - &step), z);
    (hp - hm) * w * (scale / (2.0 * h))
}

/// Central-difference gradient of the loss itself (used by gradient checks).
pub fn fd_gradient<O: LossOracle + ?Sized>(oracle: &O, theta: &ParamVector, z: usize) -> ParamVector {
    let d = oracle.dim();
    let h = f64::EPSILON.sqrt() * (1.0 + theta.norm());
    let mut out = DVector::zeros(d);
    let mut probe = theta.clone();
    for i in 0..d {
        probe[i] = theta[i] + h;
        let lp = oracle.loss(&probe, z);
        probe[i] = theta[i] - h;
        let lm = oracle.loss(&probe, z);
        probe[i] = theta[i];
        out[i] = (lp - lm) / (2.0 * h);
    }
    out
}

fn check_batch(batch: &[usize]) -> Result<()> {
    if batch.is_empty() {
        Err(Error::InvalidBatch)
    } else {
        Ok(())
    }
}

/// Batch-averaged loss `L(theta, B) = |B|^{-1} sum_{z in B} L(theta, z)`.
pub fn eval_loss<O: LossOracle + ?Sized>(oracle: &O, theta: &ParamVector, batch: &[usize]) -> Result<f64> {
    check_batch(batch)?;
    let mut acc = 0.0;
    for &z in batch {
        acc += oracle.loss(theta, z);
    }
    Ok(acc / batch.len() as f64)
}

/// Batch-averaged gradient. Reduction is left-to-right in batch order so the
/// result is bit-reproducible.
pub fn grad<O: LossOracle + ?Sized>(oracle: &O, theta: &ParamVector, batch: &[usize]) -> Result<ParamVector> {
    check_batch(batch)?;
    let mut acc = DVector::zeros(oracle.dim());
    for &z in batch {
        acc += oracle.gradient(theta, z);
    }
    Ok(acc / batch.len() as f64)
}

/// Batch-averaged Hessian, symmetrized as `(A + A^T) / 2`.
pub fn hessian<O: LossOracle + ?Sized>(oracle: &O, theta: &ParamVector, batch: &[usize]) -> Result<DMatrix<f64>> {
    check_batch(batch)?;
    let d = oracle.dim();
    let mut acc = DMatrix::zeros(d, d);
    for &z in batch {
        acc += oracle.hessian(theta, z);
    }
    acc /= batch.len() as f64;
    if acc.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericalFailure("non-finite Hessian entries".into()));
    }
    Ok(symmetrize(&acc))
}

/// `(A + A^T) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Relative asymmetry `|A - A^T| / |A|` in Frobenius norm.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.norm();
    if n == 0.0 {
        0.0
    } else {
        (a - a.transpose()).norm() / n
    }
}

/// Batch-averaged `∇³L[., v, w]`.
pub fn third_derivative_contraction<O: LossOracle + ?Sized>(
    oracle: &O,
    theta: &ParamVector,
    batch: &[usize],
    v: &ParamVector,
    w: &ParamVector,
) -> Result<ParamVector> {
    check_batch(batch)?;
    let mut acc = DVector::zeros(oracle.dim());
    for &z in batch {
        acc += oracle.third_contraction(theta, z, v, w);
    }
    let out = acc / batch.len() as f64;
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericalFailure("non-finite third derivative".into()));
    }
    Ok(out)
}

/// Symmetric eigendecomposition of a full-batch Hessian.
///
/// Eigenvalues are sorted descending and each eigenvector's first entry with
/// magnitude above `1e-12 * |column|` is made positive, so repeated runs are
/// bit-identical.
#[derive(Debug, Clone)]
pub struct HessianSpectrum {
    /// Descending eigenvalues.
    pub eigenvalues: DVector<f64>,
    /// Column `j` pairs with `eigenvalues[j]`.
    pub eigenvectors: DMatrix<f64>,
}

impl HessianSpectrum {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `V diag(f(lambda)) V^T`.
    pub fn map_matrix<F: Fn(f64) -> f64>(&self, f: F) -> DMatrix<f64> {
        let d = self.dim();
        let diag = DMatrix::from_diagonal(&DVector::from_iterator(
            d,
            self.eigenvalues.iter().map(|&l| f(l)),
        ));
        &self.eigenvectors * diag * self.eigenvectors.transpose()
    }

    /// Reconstruct `V diag(lambda) V^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.map_matrix(|l| l)
    }

    /// Coordinates of `x` in the eigenbasis.
    pub fn to_eigenbasis(&self, x: &ParamVector) -> ParamVector {
        self.eigenvectors.transpose() * x
    }

    /// Map eigenbasis coordinates back to the canonical basis.
    pub fn from_eigenbasis(&self, x: &ParamVector) -> ParamVector {
        &self.eigenvectors * x
    }
}

/// Eigendecomposition of a symmetric matrix with the crate's ordering and
/// sign conventions.
pub fn symmetric_spectrum(mat: &DMatrix<f64>) -> Result<HessianSpectrum> {
    let sym = symmetrize(mat);
    let eig = sym
        .clone()
        .try_symmetric_eigen(1e-13, 10_000)
        .ok_or_else(|| Error::NumericalFailure("symmetric eigensolver did not converge".into()))?;
    let d = sym.nrows();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });
    let mut values = DVector::zeros(d);
    let mut vectors = DMatrix::zeros(d, d);
    for (col, &src) in order.iter().enumerate() {
        values[col] = eig.eigenvalues[src];
        let mut v = eig.eigenvectors.column(src).clone_owned();
        let scale = v.norm();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12 * scale) {
            if *first < 0.0 {
                v = -v;
            }
        }
        vectors.set_column(col, &v);
    }
    Ok(HessianSpectrum {
        eigenvalues: values,
        eigenvectors: vectors,
    })
}

/// Spectrum of the full-batch Hessian at `theta`.
pub fn hessian_spectrum<O: LossOracle + ?Sized>(oracle: &O, theta: &ParamVector) -> Result<HessianSpectrum> {
    let full: Vec<usize> = (0..oracle.n_examples()).collect();
    let h = hessian(oracle, theta, &full)?;
    symmetric_spectrum(&h)
}

//! Built-in problems and their JSON descriptions.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{LossOracle, ParamVector};

/// Two-parameter product model `f(theta, x) = theta_1 * theta_2 * x` with MSE
/// per-example loss `(theta_1 theta_2 x - y)^2` on the three points
/// `(1,1), (1,2), (1,0)`. Batch losses are averaged. The global-minimum
/// manifold is `theta_1 * theta_2 = 1` and the min-norm solutions are
/// `+-(1, 1)`.
#[derive(Debug, Clone)]
pub struct ToyDiagonalProblem {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl ToyDiagonalProblem {
    pub fn new() -> Self {
        ToyDiagonalProblem {
            xs: vec![1.0, 1.0, 1.0],
            ys: vec![1.0, 2.0, 0.0],
        }
    }

    pub fn default_init() -> ParamVector {
        DVector::from_vec(vec![1.0, 6.0])
    }

    /// `theta_1 * theta_2` value shared by every global minimum.
    pub fn manifold_product(&self) -> f64 {
        self.ys.iter().sum::<f64>() / self.ys.len() as f64
    }
}

impl Default for ToyDiagonalProblem {
    fn default() -> Self {
        Self::new()
    }
}

impl LossOracle for ToyDiagonalProblem {
    fn dim(&self) -> usize {
        2
    }

    fn n_examples(&self) -> usize {
        self.xs.len()
    }

    fn loss(&self, theta: &ParamVector, z: usize) -> f64 {
        let r = theta[0] * theta[1] * self.xs[z] - self.ys[z];
        r * r
    }

    fn gradient(&self, theta: &ParamVector, z: usize) -> ParamVector {
        let x = self.xs[z];
        let r = 2.0 * (theta[0] * theta[1] * x - self.ys[z]) * x;
        DVector::from_vec(vec![r * theta[1], r * theta[0]])
    }

    fn hessian(&self, theta: &ParamVector, z: usize) -> DMatrix<f64> {
        let x = self.xs[z];
        let p = theta[0] * theta[1] * x;
        let off = 2.0 * x * (2.0 * p - self.ys[z]);
        DMatrix::from_row_slice(
            2,
            2,
            &[
                2.0 * x * x * theta[1] * theta[1],
                off,
                off,
                2.0 * x * x * theta[0] * theta[0],
            ],
        )
    }

    fn third_contraction(
        &self,
        theta: &ParamVector,
        z: usize,
        v: &ParamVector,
        w: &ParamVector,
    ) -> ParamVector {
        // Nonzero entries: T[1,1,2] = 4 x^2 theta_2 (and permutations),
        // T[1,2,2] = 4 x^2 theta_1 (and permutations).
        let x2 = self.xs[z] * self.xs[z];
        let a = 4.0 * x2 * theta[1];
        let b = 4.0 * x2 * theta[0];
        DVector::from_vec(vec![
            a * (v[0] * w[1] + v[1] * w[0]) + b * v[1] * w[1],
            b * (v[0] * w[1] + v[1] * w[0]) + a * v[0] * w[0],
        ])
    }

    fn has_analytic_third(&self) -> bool {
        true
    }
}

/// Per-example losses `1/2 theta^T A_z theta - g_z^T theta + sum_i t_{z,i} theta_i^3 / 3`.
///
/// With `cubic = None` these are exactly quadratic, which makes the
/// first-order deviation formula exact and gives most tests their oracle.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    pub a_mats: Vec<DMatrix<f64>>,
    pub g_vecs: Vec<DVector<f64>>,
    pub cubic: Option<Vec<DVector<f64>>>,
}

impl QuadraticProblem {
    pub fn new(a_mats: Vec<DMatrix<f64>>, g_vecs: Vec<DVector<f64>>) -> Self {
        assert_eq!(a_mats.len(), g_vecs.len());
        assert!(!a_mats.is_empty());
        QuadraticProblem {
            a_mats,
            g_vecs,
            cubic: None,
        }
    }

    pub fn with_cubic(mut self, cubic: Vec<DVector<f64>>) -> Self {
        assert_eq!(cubic.len(), self.a_mats.len());
        self.cubic = Some(cubic);
        self
    }

    /// Random near-quadratic family: a shared well-conditioned base Hessian,
    /// per-example symmetric fluctuations of scale `hess_fluct`, unit-scale
    /// linear terms, and diagonal cubic terms of scale `cubic`.
    ///
    /// `label_scale` multiplies the linear terms, mimicking a rescaling of
    /// the targets.
    pub fn random(
        d: usize,
        n: usize,
        hess_fluct: f64,
        cubic: f64,
        label_scale: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut base = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                base[(i, j)] = rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
        let base = &base * base.transpose() / d as f64 + DMatrix::identity(d, d) * 0.5;
        let mut a_mats = Vec::with_capacity(n);
        let mut g_vecs = Vec::with_capacity(n);
        let mut cubs = Vec::with_capacity(n);
        for _ in 0..n {
            let mut p = DMatrix::zeros(d, d);
            for i in 0..d {
                for j in 0..d {
                    p[(i, j)] = rng.sample::<f64, _>(rand_distr::StandardNormal) * hess_fluct;
                }
            }
            a_mats.push(&base + (&p + p.transpose()) * 0.5);
            g_vecs.push(
                DVector::from_iterator(d, (0..d).map(|_| {
                    rng.sample::<f64, _>(rand_distr::StandardNormal)
                })) * label_scale,
            );
            cubs.push(DVector::from_iterator(d, (0..d).map(|_| {
                rng.sample::<f64, _>(rand_distr::StandardNormal) * cubic
            })));
        }
        let mut out = QuadraticProblem::new(a_mats, g_vecs);
        if cubic != 0.0 {
            out = out.with_cubic(cubs);
        }
        out
    }

    /// Minimizer of the mean quadratic part.
    pub fn mean_quadratic_minimizer(&self) -> DVector<f64> {
        let n = self.a_mats.len() as f64;
        let abar = self.a_mats.iter().fold(
            DMatrix::zeros(self.dim(), self.dim()),
            |acc, a| acc + a,
        ) / n;
        let gbar = self
            .g_vecs
            .iter()
            .fold(DVector::zeros(self.dim()), |acc, g| acc + g)
            / n;
        abar.lu().solve(&gbar).expect("mean Hessian invertible")
    }
}

impl LossOracle for QuadraticProblem {
    fn dim(&self) -> usize {
        self.a_mats[0].nrows()
    }

    fn n_examples(&self) -> usize {
        self.a_mats.len()
    }

    fn loss(&self, theta: &ParamVector, z: usize) -> f64 {
        let mut l = 0.5 * (theta.transpose() * &self.a_mats[z] * theta)[(0, 0)]
            - self.g_vecs[z].dot(theta);
        if let Some(c) = &self.cubic {
            for i in 0..self.dim() {
                l += c[z][i] * theta[i].powi(3) / 3.0;
            }
        }
        l
    }

    fn gradient(&self, theta: &ParamVector, z: usize) -> ParamVector {
        let mut g = &self.a_mats[z] * theta - &self.g_vecs[z];
        if let Some(c) = &self.cubic {
            for i in 0..self.dim() {
                g[i] += c[z][i] * theta[i] * theta[i];
            }
        }
        g
    }

    fn hessian(&self, theta: &ParamVector, z: usize) -> DMatrix<f64> {
        let mut h = self.a_mats[z].clone();
        if let Some(c) = &self.cubic {
            for i in 0..self.dim() {
                h[(i, i)] += 2.0 * c[z][i] * theta[i];
            }
        }
        h
    }

    fn third_contraction(
        &self,
        _theta: &ParamVector,
        z: usize,
        v: &ParamVector,
        w: &ParamVector,
    ) -> ParamVector {
        match &self.cubic {
            None => DVector::zeros(self.dim()),
            Some(c) => {
                DVector::from_iterator(self.dim(), (0..self.dim()).map(|i| 2.0 * c[z][i] * v[i] * w[i]))
            }
        }
    }

    fn has_analytic_third(&self) -> bool {
        true
    }
}

/// Two-dimensional strict-saddle benchmark.
///
/// Per-example loss
/// `-theta_1^2/2 + mu theta_2^2/2 + a_z theta_2 + a_z theta_1 theta_2
///  + (q/3) max(theta_1 - wall, 0)^3`.
///
/// The origin is a stationary point of the mean loss with Hessian
/// `diag(-1, mu)`, so `lambda_min = -1`. The coefficients `a_z` are centered
/// and normalized so `E[a^2] = amp^2`, which makes the drift overlap
/// `u = E<e_1, H(z) g(z)> = amp^2` at the saddle. The open escape direction
/// is `theta_1 -> -inf`; the one-sided cubic wall at `theta_1 = wall` turns
/// the positive side into a shallow pocket that diffusion-driven dynamics
/// enter and rarely leave, while the drift of SGD without replacement walks
/// out the open side. `recommended_init` starts slightly inside the walled
/// side to keep that comparison sharp.
#[derive(Debug, Clone)]
pub struct SaddleBenchmark {
    pub a: Vec<f64>,
    pub mu: f64,
    pub wall_q: f64,
    pub wall_x: f64,
}

impl SaddleBenchmark {
    pub fn new(n: usize, amp: f64, mu: f64, wall_q: f64, wall_x: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let mean = a.iter().sum::<f64>() / n as f64;
        for x in &mut a {
            *x -= mean;
        }
        let ms = (a.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
        for x in &mut a {
            *x *= amp / ms;
        }
        SaddleBenchmark {
            a,
            mu,
            wall_q,
            wall_x,
        }
    }

    pub fn standard(n: usize, seed: u64) -> Self {
        Self::new(n, 1.0, 1.0, 40.0, 0.08, seed)
    }

    /// Drift overlap `u = (1/n) sum <e_1, H(z) g(z)>` at the saddle, which
    /// equals `E[a^2]`.
    pub fn u_at_saddle(&self) -> f64 {
        self.a.iter().map(|x| x * x).sum::<f64>() / self.a.len() as f64
    }

    /// Initialization slightly inside the walled side.
    pub fn recommended_init(&self, eta: f64) -> ParamVector {
        DVector::from_vec(vec![0.2 * eta, 0.0])
    }

    pub fn saddle_point(&self) -> ParamVector {
        DVector::zeros(2)
    }
}

impl LossOracle for SaddleBenchmark {
    fn dim(&self) -> usize {
        2
    }

    fn n_examples(&self) -> usize {
        self.a.len()
    }

    fn loss(&self, theta: &ParamVector, z: usize) -> f64 {
        let (t1, t2) = (theta[0], theta[1]);
        let wall = (t1 - self.wall_x).max(0.0);
        -0.5 * t1 * t1
            + 0.5 * self.mu * t2 * t2
            + self.a[z] * t2
            + self.a[z] * t1 * t2
            + self.wall_q / 3.0 * wall.powi(3)
    }

    fn gradient(&self, theta: &ParamVector, z: usize) -> ParamVector {
        let (t1, t2) = (theta[0], theta[1]);
        let wall = (t1 - self.wall_x).max(0.0);
        DVector::from_vec(vec![
            -t1 + self.wall_q * wall * wall + self.a[z] * t2,
            self.mu * t2 + self.a[z] + self.a[z] * t1,
        ])
    }

    fn hessian(&self, theta: &ParamVector, z: usize) -> DMatrix<f64> {
        let wall = (theta[0] - self.wall_x).max(0.0);
        DMatrix::from_row_slice(
            2,
            2,
            &[
                -1.0 + 2.0 * self.wall_q * wall,
                self.a[z],
                self.a[z],
                self.mu,
            ],
        )
    }

    fn third_contraction(
        &self,
        theta: &ParamVector,
        _z: usize,
        v: &ParamVector,
        w: &ParamVector,
    ) -> ParamVector {
        let t = if theta[0] > self.wall_x { 2.0 * self.wall_q } else { 0.0 };
        DVector::from_vec(vec![t * v[0] * w[0], 0.0])
    }

    fn has_analytic_third(&self) -> bool {
        true
    }
}

/// Linear softmax classifier with cross-entropy loss.
///
/// Parameters are the `classes x input_dim` weight matrix, flattened
/// row-major. The per-example Hessian does not depend on the label.
#[derive(Debug, Clone)]
pub struct SoftmaxLinear {
    pub inputs: Vec<DVector<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl SoftmaxLinear {
    pub fn new(inputs: Vec<DVector<f64>>, labels: Vec<usize>, classes: usize) -> Self {
        assert_eq!(inputs.len(), labels.len());
        assert!(labels.iter().all(|&y| y < classes));
        SoftmaxLinear {
            inputs,
            labels,
            classes,
        }
    }

    /// Gaussian inputs with labels drawn from the model's own predictive
    /// distribution at `theta`, the setting where the empirical Fisher
    /// matches the Hessian in expectation.
    pub fn resampled_from_model(
        theta: &ParamVector,
        classes: usize,
        input_dim: usize,
        n: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let x = DVector::from_iterator(input_dim, (0..input_dim).map(|_| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            }));
            let p = softmax_probs(theta, &x, classes);
            let r: f64 = rng.gen();
            let mut cum = 0.0;
            let mut y = classes - 1;
            for (c, &pc) in p.iter().enumerate() {
                cum += pc;
                if r < cum {
                    y = c;
                    break;
                }
            }
            inputs.push(x);
            labels.push(y);
        }
        SoftmaxLinear::new(inputs, labels, classes)
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }
}

fn softmax_probs(theta: &ParamVector, x: &DVector<f64>, classes: usize) -> Vec<f64> {
    let p_dim = x.len();
    let mut logits = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut s = 0.0;
        for j in 0..p_dim {
            s += theta[c * p_dim + j] * x[j];
        }
        logits.push(s);
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

impl LossOracle for SoftmaxLinear {
    fn dim(&self) -> usize {
        self.classes * self.input_dim()
    }

    fn n_examples(&self) -> usize {
        self.inputs.len()
    }

    fn loss(&self, theta: &ParamVector, z: usize) -> f64 {
        let p = softmax_probs(theta, &self.inputs[z], self.classes);
        -p[self.labels[z]].max(1e-300).ln()
    }

    fn gradient(&self, theta: &ParamVector, z: usize) -> ParamVector {
        let x = &self.inputs[z];
        let p_dim = x.len();
        let p = softmax_probs(theta, x, self.classes);
        let mut g = DVector::zeros(self.dim());
        for c in 0..self.classes {
            let coeff = p[c] - if c == self.labels[z] { 1.0 } else { 0.0 };
            for j in 0..p_dim {
                g[c * p_dim + j] = coeff * x[j];
            }
        }
        g
    }

    fn hessian(&self, theta: &ParamVector, z: usize) -> DMatrix<f64> {
        let x = &self.inputs[z];
        let p_dim = x.len();
        let p = softmax_probs(theta, x, self.classes);
        let mut h = DMatrix::zeros(self.dim(), self.dim());
        for c in 0..self.classes {
            for c2 in 0..self.classes {
                let coeff = if c == c2 { p[c] * (1.0 - p[c]) } else { -p[c] * p[c2] };
                for i in 0..p_dim {
                    for j in 0..p_dim {
                        h[(c * p_dim + i, c2 * p_dim + j)] = coeff * x[i] * x[j];
                    }
                }
            }
        }
        h
    }
}

/// Shallow 1 -> width -> 1 ReLU network fitting a W-shaped one-dimensional
/// target with MSE.
///
/// Parameters: `[w1 (width), b1 (width), w2 (width), b2]`. ReLU uses
/// subgradient 0 at the kink; Hessians fall back to finite differences.
#[derive(Debug, Clone)]
pub struct WReluProblem {
    pub width: usize,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

/// W-shaped target: `|2x+1| - 1` for `x < 0`, `|2x-1| - 1` for `x >= 0`.
pub fn w_target(x: f64) -> f64 {
    if x < 0.0 {
        (2.0 * x + 1.0).abs() - 1.0
    } else {
        (2.0 * x - 1.0).abs() - 1.0
    }
}

impl WReluProblem {
    pub fn new(width: usize, n: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::InvalidConfig("w_relu width must be positive".into()));
        }
        if n < 2 {
            return Err(Error::InvalidConfig("w_relu needs at least 2 points".into()));
        }
        let xs: Vec<f64> = (0..n)
            .map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64)
            .collect();
        let ys = xs.iter().map(|&x| w_target(x)).collect();
        Ok(WReluProblem { width, xs, ys })
    }

    pub fn default_init(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.5
        }))
    }

    pub fn forward(&self, theta: &ParamVector, x: f64) -> f64 {
        let w = self.width;
        let mut out = theta[3 * w];
        for j in 0..w {
            let pre = theta[j] * x + theta[w + j];
            if pre > 0.0 {
                out += theta[2 * w + j] * pre;
            }
        }
        out
    }
}

impl LossOracle for WReluProblem {
    fn dim(&self) -> usize {
        3 * self.width + 1
    }

    fn n_examples(&self) -> usize {
        self.xs.len()
    }

    fn loss(&self, theta: &ParamVector, z: usize) -> f64 {
        let r = self.forward(theta, self.xs[z]) - self.ys[z];
        r * r
    }

    fn gradient(&self, theta: &ParamVector, z: usize) -> ParamVector {
        let w = self.width;
        let x = self.xs[z];
        let r = 2.0 * (self.forward(theta, x) - self.ys[z]);
        let mut g = DVector::zeros(self.dim());
        for j in 0..w {
            let pre = theta[j] * x + theta[w + j];
            if pre > 0.0 {
                g[j] = r * theta[2 * w + j] * x;
                g[w + j] = r * theta[2 * w + j];
                g[2 * w + j] = r * pre;
            }
        }
        g[3 * w] = r;
        g
    }
}

/// JSON description of a problem instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    /// The three-point product-model problem.
    ToyDiagonal,
    /// Shallow ReLU network on the W-shaped dataset.
    WRelu { width: usize, n: usize },
    /// Random near-quadratic family.
    QuadraticRandom {
        d: usize,
        n: usize,
        hess_fluct: f64,
        #[serde(default)]
        cubic: f64,
        #[serde(default = "one")]
        label_scale: f64,
        seed: u64,
    },
    /// The constructed strict-saddle benchmark.
    Saddle {
        n: usize,
        #[serde(default = "one")]
        amp: f64,
        #[serde(default = "one")]
        mu: f64,
        #[serde(default = "default_wall_q")]
        wall_q: f64,
        #[serde(default = "default_wall_x")]
        wall_x: f64,
        seed: u64,
    },
    /// Softmax linear classifier with model-resampled labels.
    SoftmaxLinear {
        classes: usize,
        input_dim: usize,
        n: usize,
        seed: u64,
    },
}

fn one() -> f64 {
    1.0
}

fn default_wall_q() -> f64 {
    40.0
}

fn default_wall_x() -> f64 {
    0.08
}

impl ProblemSpec {
    /// Instantiate the described problem.
    pub fn build(&self) -> Result<Box<dyn LossOracle + Send>> {
        match self {
            ProblemSpec::ToyDiagonal => Ok(Box::new(ToyDiagonalProblem::new())),
            ProblemSpec::WRelu { width, n } => Ok(Box::new(WReluProblem::new(*width, *n)?)),
            ProblemSpec::QuadraticRandom {
                d,
                n,
                hess_fluct,
                cubic,
                label_scale,
                seed,
            } => Ok(Box::new(QuadraticProblem::random(
                *d,
                *n,
                *hess_fluct,
                *cubic,
                *label_scale,
                *seed,
            ))),
            ProblemSpec::Saddle {
                n,
                amp,
                mu,
                wall_q,
                wall_x,
                seed,
            } => Ok(Box::new(SaddleBenchmark::new(
                *n, *amp, *mu, *wall_q, *wall_x, *seed,
            ))),
            ProblemSpec::SoftmaxLinear {
                classes,
                input_dim,
                n,
                seed,
            } => {
                let d = classes * input_dim;
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(101))
                    ;
                let theta = DVector::from_iterator(d, (0..d).map(|_| {
                    rng.sample::<f64, _>(rand_distr::StandardNormal)
                }));
                Ok(Box::new(SoftmaxLinear::resampled_from_model(
                    &theta, *classes, *input_dim, *n, *seed,
                )))
            }
        }
    }

    /// A sensible initialization for the described problem.
    pub fn default_init(&self, seed: u64) -> Result<ParamVector> {
        match self {
            ProblemSpec::ToyDiagonal => Ok(ToyDiagonalProblem::default_init()),
            ProblemSpec::WRelu { width, n } => {
                Ok(WReluProblem::new(*width, *n)?.default_init(seed))
            }
            ProblemSpec::QuadraticRandom { d, .. } => Ok(DVector::from_element(*d, 0.1)),
            ProblemSpec::Saddle { .. } => Ok(DVector::zeros(2)),
            ProblemSpec::SoftmaxLinear {
                classes,
                input_dim,
                ..
            } => {
                let d = classes * input_dim;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok(DVector::from_iterator(d, (0..d).map(|_| {
                    rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.3
                })))
            }
        }
    }
}

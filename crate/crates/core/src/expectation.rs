//! Expectations over without-replacement sampling, three ways: exact
//! enumeration, Monte Carlo, and the closed-form combinatorial expansion.
//!
//! Each route serves as an oracle for the others. The closed forms operate
//! on matrix-valued function sequences without assuming commutativity:
//! positions sharing a sampling variable keep their place in the ordered
//! product, and independent variables integrate out jointly.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::optimize::deviation_measured;
use crate::par::run_indexed;
use crate::problem::{Hyperparams, LossOracle, ParamVector};
use crate::schedule::{
    enumerate_schedules, epoch_seed, make_schedule, BatchSchedule, SamplingPolicy,
};

/// Default cap on enumeration work (tuples or schedules).
pub const ENUMERATION_BUDGET: u128 = 10_000_000;

/// A chain of matrix-valued functions of a datum, with composable shapes.
pub struct FunctionSequence {
    funcs: Vec<Box<dyn Fn(usize) -> DMatrix<f64> + Sync + Send>>,
    shapes: Vec<(usize, usize)>,
}

impl FunctionSequence {
    pub fn new(
        funcs: Vec<Box<dyn Fn(usize) -> DMatrix<f64> + Sync + Send>>,
        shapes: Vec<(usize, usize)>,
    ) -> Result<Self> {
        if funcs.len() != shapes.len() || funcs.is_empty() {
            return Err(Error::InvalidConfig(
                "function sequence and shapes must be non-empty and match".into(),
            ));
        }
        for w in shapes.windows(2) {
            if w[0].1 != w[1].0 {
                return Err(Error::InvalidConfig(format!(
                    "shapes do not chain: {:?} then {:?}",
                    w[0], w[1]
                )));
            }
        }
        Ok(FunctionSequence { funcs, shapes })
    }

    /// Scalar sequence: k copies of the identity map `z -> value(z)`.
    pub fn scalar_identity(values: Vec<f64>, k: usize) -> Self {
        let funcs = (0..k)
            .map(|_| {
                let vals = values.clone();
                Box::new(move |z: usize| DMatrix::from_element(1, 1, vals[z]))
                    as Box<dyn Fn(usize) -> DMatrix<f64> + Sync + Send>
            })
            .collect();
        FunctionSequence {
            funcs,
            shapes: vec![(1, 1); k],
        }
    }

    /// Scalar sequence from k arbitrary functions.
    pub fn scalars(fs: Vec<Box<dyn Fn(usize) -> f64 + Sync + Send>>) -> Self {
        let k = fs.len();
        let funcs = fs
            .into_iter()
            .map(|f| {
                Box::new(move |z: usize| DMatrix::from_element(1, 1, f(z)))
                    as Box<dyn Fn(usize) -> DMatrix<f64> + Sync + Send>
            })
            .collect();
        FunctionSequence {
            funcs,
            shapes: vec![(1, 1); k],
        }
    }

    pub fn k(&self) -> usize {
        self.funcs.len()
    }

    pub fn eval(&self, i: usize, z: usize) -> DMatrix<f64> {
        (self.funcs[i])(z)
    }

    pub fn out_shape(&self) -> (usize, usize) {
        (self.shapes[0].0, self.shapes[self.shapes.len() - 1].1)
    }
}

/// How an expectation was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Enumeration,
    MonteCarlo,
    ClosedForm,
}

/// Truncation order of the closed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosedFormOrder {
    /// Pair-covariance truncation (the large-n corollary).
    PairCovariance,
    /// Complete partition sum; exact for every n >= k.
    FullPartition,
}

/// An expectation value with provenance.
#[derive(Debug, Clone)]
pub struct ExpectationEstimate {
    pub value: DMatrix<f64>,
    pub method: Method,
    pub order: Option<ClosedFormOrder>,
    /// Component-wise standard error (Monte Carlo only; enumeration reports
    /// zeros).
    pub stderr: Option<DMatrix<f64>>,
    pub samples: u64,
}

impl ExpectationEstimate {
    /// JSON with the value flattened row-major.
    pub fn to_json(&self) -> serde_json::Value {
        let flat: Vec<f64> = self
            .value
            .row_iter()
            .flat_map(|r| r.iter().cloned().collect::<Vec<_>>())
            .collect();
        let stderr: Option<Vec<f64>> = self.stderr.as_ref().map(|s| {
            s.row_iter()
                .flat_map(|r| r.iter().cloned().collect::<Vec<_>>())
                .collect()
        });
        serde_json::json!({
            "value": flat,
            "rows": self.value.nrows(),
            "cols": self.value.ncols(),
            "method": self.method,
            "order": self.order,
            "samples": self.samples,
            "stderr": stderr,
        })
    }
}

/// Iterator over ordered k-tuples of distinct indices in `[0, n)`,
/// lexicographic order.
#[derive(Debug)]
pub struct DistinctTuples {
    n: usize,
    k: usize,
    current: Vec<usize>,
    used: Vec<bool>,
    started: bool,
    done: bool,
}

impl DistinctTuples {
    pub fn new(n: usize, k: usize) -> Self {
        DistinctTuples {
            n,
            k,
            current: Vec::with_capacity(k),
            used: vec![false; n],
            started: false,
            done: k > n,
        }
    }
}

impl Iterator for DistinctTuples {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        if !self.started {
            self.started = true;
            for i in 0..self.k {
                self.current.push(i);
                self.used[i] = true;
            }
            return Some(self.current.clone());
        }
        // Advance like an odometer that skips used digits.
        loop {
            let Some(mut last) = self.current.pop() else {
                self.done = true;
                return None;
            };
            self.used[last] = false;
            last += 1;
            while last < self.n && self.used[last] {
                last += 1;
            }
            if last < self.n {
                self.current.push(last);
                self.used[last] = true;
                // Refill the remaining positions with the smallest free
                // indices.
                let mut next_free = 0;
                while self.current.len() < self.k {
                    while self.used[next_free] {
                        next_free += 1;
                    }
                    self.current.push(next_free);
                    self.used[next_free] = true;
                }
                return Some(self.current.clone());
            }
        }
    }
}

/// Number of ordered k-tuples of distinct indices: `n! / (n-k)!`.
pub fn tuple_count(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128);
    }
    acc
}

/// Enumerate ordered tuples, refusing above `budget` evaluations.
pub fn enumerate_tuples(n: usize, k: usize, budget: u128) -> Result<DistinctTuples> {
    if k > n {
        return Err(Error::InvalidConfig(format!("k = {k} exceeds n = {n}")));
    }
    let required = tuple_count(n, k);
    if required > budget {
        return Err(Error::EnumerationTooLarge { required, budget });
    }
    Ok(DistinctTuples::new(n, k))
}

/// Exact average of the ordered product over all distinct tuples.
pub fn expectation_enumerated(fs: &FunctionSequence, n: usize) -> Result<ExpectationEstimate> {
    expectation_enumerated_budget(fs, n, ENUMERATION_BUDGET)
}

pub fn expectation_enumerated_budget(
    fs: &FunctionSequence,
    n: usize,
    budget: u128,
) -> Result<ExpectationEstimate> {
    let k = fs.k();
    enumerate_tuples(n, k, budget)?;
    let (rows, cols) = fs.out_shape();
    // Parallelize over the first index; each branch enumerates the remaining
    // positions sequentially, and branches are reduced in index order.
    let partials = run_indexed(n, |first| {
        let mut acc = DMatrix::zeros(rows, cols);
        let mut count = 0u64;
        if k == 1 {
            acc += fs.eval(0, first);
            return (acc, 1u64);
        }
        let mut rest = DistinctTuples::new(n - 1, k - 1);
        // Map indices of the reduced universe back to the original one.
        let remap: Vec<usize> = (0..n).filter(|&z| z != first).collect();
        while let Some(tail) = rest.next() {
            let mut prod = fs.eval(0, first);
            for (pos, &t) in tail.iter().enumerate() {
                prod *= fs.eval(pos + 1, remap[t]);
            }
            acc += prod;
            count += 1;
        }
        (acc, count)
    });
    let mut total = DMatrix::zeros(rows, cols);
    let mut count = 0u64;
    for (acc, c) in partials {
        total += acc;
        count += c;
    }
    Ok(ExpectationEstimate {
        value: total / count as f64,
        method: Method::Enumeration,
        order: None,
        stderr: Some(DMatrix::zeros(rows, cols)),
        samples: count,
    })
}

/// First moments and per-datum evaluations of a function sequence.
///
/// Pair and higher product moments are formed on demand from `evals`; tables
/// built with `means_only` can serve the leading term but fail with
/// `IncompleteMomentTable` when covariance terms are requested.
pub struct MomentTable {
    pub n: usize,
    pub means: Vec<DMatrix<f64>>,
    pub evals: Option<Vec<Vec<DMatrix<f64>>>>,
    shapes: Vec<(usize, usize)>,
}

impl MomentTable {
    /// Build the table with full per-datum evaluations (supports every
    /// order).
    pub fn build(fs: &FunctionSequence, n: usize) -> Self {
        let k = fs.k();
        let evals: Vec<Vec<DMatrix<f64>>> = (0..k)
            .map(|i| (0..n).map(|z| fs.eval(i, z)).collect())
            .collect();
        let means = evals
            .iter()
            .map(|row| {
                let mut acc = row[0].clone();
                for m in &row[1..] {
                    acc += m;
                }
                acc / n as f64
            })
            .collect();
        MomentTable {
            n,
            means,
            evals: Some(evals),
            shapes: fs.shapes.clone(),
        }
    }

    /// First moments only.
    pub fn means_only(fs: &FunctionSequence, n: usize) -> Self {
        let mut table = Self::build(fs, n);
        table.evals = None;
        table
    }

    pub fn k(&self) -> usize {
        self.means.len()
    }

    fn eval(&self, i: usize, z: usize) -> Result<&DMatrix<f64>> {
        self.evals
            .as_ref()
            .map(|e| &e[i][z])
            .ok_or_else(|| {
                Error::IncompleteMomentTable(
                    "product moments require per-datum evaluations".into(),
                )
            })
    }

    fn out_shape(&self) -> (usize, usize) {
        (self.shapes[0].0, self.shapes[self.shapes.len() - 1].1)
    }
}

/// Closed-form expectation of the ordered product over without-replacement
/// sampling.
///
/// `FullPartition` evaluates the complete partition sum: the prefactor
/// `prod_{i<k} n/(n-i)` times, over every partition of the positions, the
/// product of block weights `(-1/n)^{l-1} (l-1)!` and the jointly-integrated
/// ordered product (blocks share one variable, distinct blocks integrate
/// independently over the whole dataset). This is an identity, not an
/// approximation.
///
/// `PairCovariance` evaluates the large-n covariance form: `prod E[f_i]`
/// minus `(n-1)^{-1}` times the sum of sandwiched pair covariances, plus the
/// `((n-1)(n-2))^{-1}` double-covariance sum, dropping blocks of three or
/// more.
pub fn expectation_closed_form(
    table: &MomentTable,
    order: ClosedFormOrder,
) -> Result<ExpectationEstimate> {
    let k = table.k();
    let n = table.n;
    let value = match order {
        ClosedFormOrder::FullPartition => full_partition_sum(table, k, n)?,
        ClosedFormOrder::PairCovariance => pair_covariance_form(table, k, n)?,
    };
    Ok(ExpectationEstimate {
        value,
        method: Method::ClosedForm,
        order: Some(order),
        stderr: None,
        samples: 0,
    })
}

fn mean_product(table: &MomentTable, positions: std::ops::Range<usize>) -> DMatrix<f64> {
    let mut iter = positions.clone();
    match iter.next() {
        None => {
            // Empty range: identity of the appropriate edge dimension.
            let dim = if positions.start < table.k() {
                table.shapes[positions.start].0
            } else {
                table.shapes[table.k() - 1].1
            };
            DMatrix::identity(dim, dim)
        }
        Some(first) => {
            let mut acc = table.means[first].clone();
            for i in iter {
                acc = acc * &table.means[i];
            }
            acc
        }
    }
}

/// Ordered product with the positions in `assignment` bound to fixed data and
/// every other position replaced by its mean.
fn product_with_assignment(
    table: &MomentTable,
    assignment: &[(usize, usize)],
) -> Result<DMatrix<f64>> {
    let k = table.k();
    let lookup: std::collections::HashMap<usize, usize> = assignment.iter().cloned().collect();
    let mut acc: Option<DMatrix<f64>> = None;
    for i in 0..k {
        let factor = match lookup.get(&i) {
            Some(&z) => table.eval(i, z)?.clone(),
            None => table.means[i].clone(),
        };
        acc = Some(match acc {
            None => factor,
            Some(a) => a * factor,
        });
    }
    Ok(acc.expect("k >= 1"))
}

fn full_partition_sum(table: &MomentTable, k: usize, n: usize) -> Result<DMatrix<f64>> {
    if k > n {
        return Err(Error::InvalidConfig(format!("k = {k} exceeds n = {n}")));
    }
    let (rows, cols) = table.out_shape();
    let mut total = DMatrix::zeros(rows, cols);
    for partition in SetPartitions::new(k) {
        // Möbius weight: each block of size l contributes (-1/n)^{l-1} (l-1)!.
        let mut weight = 1.0f64;
        for block in &partition {
            let l = block.len();
            weight *= (-1.0 / n as f64).powi(l as i32 - 1) * factorial(l - 1);
        }
        // Jointly integrate the non-singleton blocks over iid assignments.
        let joint: Vec<&Vec<usize>> = partition.iter().filter(|b| b.len() > 1).collect();
        let mut block_value = DMatrix::zeros(rows, cols);
        let mut assignments = 0u64;
        let mut odo = vec![0usize; joint.len()];
        loop {
            let mut assignment = Vec::new();
            for (b, block) in joint.iter().enumerate() {
                for &pos in block.iter() {
                    assignment.push((pos, odo[b]));
                }
            }
            block_value += product_with_assignment(table, &assignment)?;
            assignments += 1;
            // Advance the odometer over D^{#blocks}.
            let mut pos = joint.len();
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                odo[pos] += 1;
                if odo[pos] < n {
                    break;
                }
                odo[pos] = 0;
            }
            if odo.iter().all(|&x| x == 0) {
                break;
            }
        }
        total += block_value * (weight / assignments as f64);
    }
    let mut prefactor = 1.0f64;
    for i in 0..k {
        prefactor *= n as f64 / (n - i) as f64;
    }
    Ok(total * prefactor)
}

fn pair_covariance_form(table: &MomentTable, k: usize, n: usize) -> Result<DMatrix<f64>> {
    if n < 2 {
        return Err(Error::InvalidConfig("pair covariance form needs n >= 2".into()));
    }
    let mut total = mean_product(table, 0..k);
    // Single sandwiched covariances.
    for i in 0..k {
        for j in i + 1..k {
            total -= centered_pair_term(table, &[(i, j)])? / (n - 1) as f64;
        }
    }
    // Double covariances over disjoint unordered pairs of pairs.
    if k >= 4 && n >= 3 {
        let mut pairs = Vec::new();
        for i in 0..k {
            for j in i + 1..k {
                pairs.push((i, j));
            }
        }
        for (a, &p1) in pairs.iter().enumerate() {
            for &p2 in pairs.iter().skip(a + 1) {
                let set = [p1.0, p1.1, p2.0, p2.1];
                let distinct: std::collections::HashSet<usize> = set.iter().cloned().collect();
                if distinct.len() == 4 {
                    total += centered_pair_term(table, &[p1, p2])?
                        / ((n - 1) as f64 * (n - 2) as f64);
                }
            }
        }
    }
    Ok(total)
}

/// Expectation of the ordered product with the positions of each listed pair
/// centered and bound to a shared iid variable, all other positions at their
/// means. For one pair this is the sandwiched covariance term; for two pairs
/// the (possibly interleaved) double covariance.
fn centered_pair_term(table: &MomentTable, pairs: &[(usize, usize)]) -> Result<DMatrix<f64>> {
    let n = table.n;
    let k = table.k();
    let (rows, cols) = table.out_shape();
    let in_pairs: std::collections::HashMap<usize, usize> = pairs
        .iter()
        .enumerate()
        .flat_map(|(b, &(i, j))| [(i, b), (j, b)])
        .collect();
    let mut acc = DMatrix::zeros(rows, cols);
    let mut odo = vec![0usize; pairs.len()];
    let mut count = 0u64;
    loop {
        let mut prod: Option<DMatrix<f64>> = None;
        for pos in 0..k {
            let factor = match in_pairs.get(&pos) {
                Some(&b) => table.eval(pos, odo[b])? - &table.means[pos],
                None => table.means[pos].clone(),
            };
            prod = Some(match prod {
                None => factor,
                Some(p) => p * factor,
            });
        }
        acc += prod.expect("k >= 1");
        count += 1;
        let mut pos = pairs.len();
        loop {
            if pos == 0 {
                break;
            }
            pos -= 1;
            odo[pos] += 1;
            if odo[pos] < n {
                break;
            }
            odo[pos] = 0;
        }
        if odo.iter().all(|&x| x == 0) {
            break;
        }
        if count > (n as u64).pow(pairs.len() as u32) {
            break;
        }
    }
    Ok(acc / count as f64)
}

fn factorial(x: usize) -> f64 {
    (1..=x).map(|i| i as f64).product()
}

/// Iterator over set partitions of `{0, .., k-1}` via restricted growth
/// strings.
pub struct SetPartitions {
    k: usize,
    rgs: Vec<usize>,
    max: Vec<usize>,
    done: bool,
    first: bool,
}

impl SetPartitions {
    pub fn new(k: usize) -> Self {
        SetPartitions {
            k,
            rgs: vec![0; k],
            max: vec![0; k],
            done: k == 0,
            first: true,
        }
    }

    fn emit(&self) -> Vec<Vec<usize>> {
        let blocks = self.rgs.iter().max().map(|&m| m + 1).unwrap_or(0);
        let mut out = vec![Vec::new(); blocks];
        for (pos, &b) in self.rgs.iter().enumerate() {
            out[b].push(pos);
        }
        out
    }
}

impl Iterator for SetPartitions {
    type Item = Vec<Vec<usize>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        if self.first {
            self.first = false;
            return Some(self.emit());
        }
        // Next restricted growth string.
        let k = self.k;
        let mut i = k;
        loop {
            if i <= 1 {
                self.done = true;
                return None;
            }
            i -= 1;
            if self.rgs[i] <= self.max[i - 1] {
                self.rgs[i] += 1;
                self.max[i] = self.max[i].max(self.rgs[i]);
                for j in i + 1..k {
                    self.rgs[j] = 0;
                    self.max[j] = self.max[i];
                }
                return Some(self.emit());
            }
        }
    }
}

/// Exact mean of `deviation_measured` over every schedule of the policy.
pub fn exact_expected_deviation<O: LossOracle + ?Sized>(
    oracle: &O,
    theta0: &ParamVector,
    hyper: &Hyperparams,
    policy: SamplingPolicy,
) -> Result<ExpectationEstimate> {
    exact_expected_deviation_budget(oracle, theta0, hyper, policy, ENUMERATION_BUDGET)
}

pub fn exact_expected_deviation_budget<O: LossOracle + ?Sized>(
    oracle: &O,
    theta0: &ParamVector,
    hyper: &Hyperparams,
    policy: SamplingPolicy,
    budget: u128,
) -> Result<ExpectationEstimate> {
    let n = oracle.n_examples();
    let schedules = enumerate_schedules(n, hyper, policy, budget)?;
    let d = oracle.dim();
    let devs = run_indexed(schedules.len(), |i| {
        let sched = BatchSchedule::fixed(schedules[i].clone(), policy);
        deviation_measured(oracle, theta0, &sched, hyper)
    });
    let mut acc = nalgebra::DVector::zeros(d);
    let mut count = 0u64;
    for dev in devs {
        acc += dev?;
        count += 1;
    }
    Ok(ExpectationEstimate {
        value: DMatrix::from_column_slice(d, 1, (acc / count as f64).as_slice()),
        method: Method::Enumeration,
        order: None,
        stderr: Some(DMatrix::zeros(d, 1)),
        samples: count,
    })
}

/// Monte-Carlo estimate of the expected deviation with component-wise
/// standard errors. Deterministic in `seed`; per-sample seeds come from a
/// splittable counter.
pub fn mc_expected_deviation<O: LossOracle + ?Sized>(
    oracle: &O,
    theta0: &ParamVector,
    hyper: &Hyperparams,
    policy: SamplingPolicy,
    samples: u64,
    seed: u64,
) -> Result<ExpectationEstimate> {
    if samples < 2 {
        return Err(Error::InvalidConfig("need at least 2 samples".into()));
    }
    let n = oracle.n_examples();
    let d = oracle.dim();
    let devs = run_indexed(samples as usize, |i| {
        let sample_seed = epoch_seed(seed, i as u64);
        let sched = make_schedule(n, hyper, policy, sample_seed)?;
        deviation_measured(oracle, theta0, &sched, hyper)
    });
    let mut mean = nalgebra::DVector::zeros(d);
    for dev in &devs {
        match dev {
            Ok(v) => mean += v,
            Err(_) => {
                return Err(Error::NumericalFailure(
                    "sample diverged during Monte Carlo".into(),
                ))
            }
        }
    }
    mean /= samples as f64;
    let mut var = nalgebra::DVector::zeros(d);
    for dev in &devs {
        let diff = dev.as_ref().expect("checked above") - &mean;
        var += diff.component_mul(&diff);
    }
    var /= (samples - 1) as f64;
    let stderr = var.map(|v| (v / samples as f64).sqrt());
    Ok(ExpectationEstimate {
        value: DMatrix::from_column_slice(d, 1, mean.as_slice()),
        method: Method::MonteCarlo,
        order: None,
        stderr: Some(DMatrix::from_column_slice(d, 1, stderr.as_slice())),
        samples,
    })
}

/// Seeded RNG for callers that need auxiliary draws consistent with the
/// engine's seeding scheme.
pub fn engine_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(epoch_seed(seed, stream))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn tuple_counts_match_spec_examples() {
        assert_eq!(tuple_count(3, 2), 6);
        assert_eq!(tuple_count(6, 6), 720);
        assert_eq!(tuple_count(5, 1), 5);
        assert_eq!(enumerate_tuples(3, 2, 100).unwrap().count(), 6);
        assert_eq!(enumerate_tuples(6, 6, 1000).unwrap().count(), 720);
        assert_eq!(enumerate_tuples(5, 1, 10).unwrap().count(), 5);
    }

    #[test]
    fn tuples_are_distinct_and_lexicographic() {
        let tuples: Vec<Vec<usize>> = enumerate_tuples(4, 3, 100).unwrap().collect();
        assert_eq!(tuples.len(), 24);
        let mut sorted = tuples.clone();
        sorted.sort();
        assert_eq!(tuples, sorted);
        for t in &tuples {
            let mut u = t.clone();
            u.sort_unstable();
            u.dedup();
            assert_eq!(u.len(), 3);
        }
    }

    #[test]
    fn budget_is_enforced() {
        let err = enumerate_tuples(10, 10, 100).unwrap_err();
        assert!(matches!(err, Error::EnumerationTooLarge { .. }));
    }

    #[test]
    fn identity_on_two_points() {
        let fs = FunctionSequence::scalar_identity(vec![1.0, 2.0], 2);
        let e = expectation_enumerated(&fs, 2).unwrap();
        assert_relative_eq!(e.value[(0, 0)], 2.0, epsilon = 1e-14);
        let table = MomentTable::build(&fs, 2);
        let c = expectation_closed_form(&table, ClosedFormOrder::FullPartition).unwrap();
        assert_relative_eq!(c.value[(0, 0)], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn identity_on_three_points() {
        let fs = FunctionSequence::scalar_identity(vec![1.0, 2.0, 3.0], 2);
        let e = expectation_enumerated(&fs, 3).unwrap();
        assert_relative_eq!(e.value[(0, 0)], 11.0 / 3.0, epsilon = 1e-14);
        let table = MomentTable::build(&fs, 3);
        let c = expectation_closed_form(&table, ClosedFormOrder::FullPartition).unwrap();
        assert_relative_eq!(c.value[(0, 0)], 11.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn constants_multiply() {
        let fs = FunctionSequence::scalars(vec![
            Box::new(|_| 2.0),
            Box::new(|_| 3.0),
            Box::new(|_| 5.0),
        ]);
        let e = expectation_enumerated(&fs, 5).unwrap();
        assert_relative_eq!(e.value[(0, 0)], 30.0, epsilon = 1e-12);
        let table = MomentTable::build(&fs, 5);
        for order in [ClosedFormOrder::FullPartition, ClosedFormOrder::PairCovariance] {
            let c = expectation_closed_form(&table, order).unwrap();
            assert_relative_eq!(c.value[(0, 0)], 30.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn full_partition_matches_enumeration_for_matrices() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let shapes = [(2usize, 3usize), (3, 3), (3, 2), (2, 2)];
        for k in 2..=4usize {
            for n in k.max(3)..=6 {
                let mats: Vec<Vec<DMatrix<f64>>> = (0..k)
                    .map(|i| {
                        (0..n)
                            .map(|_| {
                                DMatrix::from_fn(shapes[i].0, shapes[i].1, |_, _| {
                                    rng.sample::<f64, _>(rand_distr::StandardNormal)
                                })
                            })
                            .collect()
                    })
                    .collect();
                let funcs = (0..k)
                    .map(|i| {
                        let col = mats[i].clone();
                        Box::new(move |z: usize| col[z].clone())
                            as Box<dyn Fn(usize) -> DMatrix<f64> + Sync + Send>
                    })
                    .collect();
                let fs =
                    FunctionSequence::new(funcs, shapes[..k].to_vec()).unwrap();
                let e = expectation_enumerated(&fs, n).unwrap();
                let table = MomentTable::build(&fs, n);
                let c = expectation_closed_form(&table, ClosedFormOrder::FullPartition).unwrap();
                let rel = (&e.value - &c.value).norm() / e.value.norm().max(1e-300);
                assert!(rel < 1e-12, "k={k} n={n} rel={rel}");
            }
        }
    }

    #[test]
    fn pair_covariance_is_exact_for_k2() {
        let fs = FunctionSequence::scalar_identity(vec![1.0, 2.0, 5.0, -1.0], 2);
        let e = expectation_enumerated(&fs, 4).unwrap();
        let table = MomentTable::build(&fs, 4);
        let c = expectation_closed_form(&table, ClosedFormOrder::PairCovariance).unwrap();
        assert_relative_eq!(c.value[(0, 0)], e.value[(0, 0)], epsilon = 1e-13);
    }

    #[test]
    fn corollary_error_shrinks_with_n() {
        // Fixed smooth scalar functions on n grid points; the pair form's
        // error against enumeration decays as n grows.
        let mut errs = Vec::new();
        for n in [8usize, 16] {
            let values: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 * 2.0).collect();
            let v1 = values.clone();
            let v2 = values.clone();
            let v3 = values.clone();
            let fs = FunctionSequence::scalars(vec![
                Box::new(move |z| v1[z].sin() + 1.5),
                Box::new(move |z| v2[z] * v2[z] * 0.3 + 0.5),
                Box::new(move |z| (0.7 * v3[z]).cos() + 1.2),
            ]);
            let e = expectation_enumerated(&fs, n).unwrap().value[(0, 0)];
            let table = MomentTable::build(&fs, n);
            let c = expectation_closed_form(&table, ClosedFormOrder::PairCovariance)
                .unwrap()
                .value[(0, 0)];
            errs.push(((c - e) / e).abs());
        }
        assert!(
            errs[0] / errs[1] >= 2.0,
            "error ratio {} below 2",
            errs[0] / errs[1]
        );
    }

    #[test]
    fn means_only_table_rejects_covariance_orders() {
        let fs = FunctionSequence::scalar_identity(vec![1.0, 2.0, 3.0], 2);
        let table = MomentTable::means_only(&fs, 3);
        let err = expectation_closed_form(&table, ClosedFormOrder::FullPartition).unwrap_err();
        assert!(matches!(err, Error::IncompleteMomentTable(_)));
    }

    #[test]
    fn exchangeability_of_scalar_enumeration() {
        // Permuting commuting factors leaves the enumerated value unchanged.
        let values = vec![0.3, 1.7, -0.4, 2.2];
        let orders: [[usize; 3]; 3] = [[0, 1, 2], [2, 0, 1], [1, 2, 0]];
        let fns: Vec<Box<dyn Fn(usize) -> f64 + Sync + Send>> = vec![
            Box::new(|z: usize| [0.3, 1.7, -0.4, 2.2][z] + 1.0),
            Box::new(|z: usize| [0.3, 1.7, -0.4, 2.2][z] * 0.5 + 2.0),
            Box::new(|z: usize| [0.3f64, 1.7, -0.4, 2.2][z].powi(2) + 0.5),
        ];
        let _ = values;
        let base: Vec<f64> = fns.iter().map(|f| f(0)).collect();
        let _ = base;
        let mut results = Vec::new();
        for order in orders {
            let fs = FunctionSequence::scalars(
                order
                    .iter()
                    .map(|&i| {
                        let f: Box<dyn Fn(usize) -> f64 + Sync + Send> = match i {
                            0 => Box::new(|z: usize| [0.3, 1.7, -0.4, 2.2][z] + 1.0),
                            1 => Box::new(|z: usize| [0.3, 1.7, -0.4, 2.2][z] * 0.5 + 2.0),
                            _ => Box::new(|z: usize| [0.3f64, 1.7, -0.4, 2.2][z].powi(2) + 0.5),
                        };
                        f
                    })
                    .collect(),
            );
            results.push(expectation_enumerated(&fs, 4).unwrap().value[(0, 0)]);
        }
        assert_relative_eq!(results[0], results[1], epsilon = 1e-13);
        assert_relative_eq!(results[0], results[2], epsilon = 1e-13);
    }

    #[test]
    fn partitions_count_is_bell_number() {
        assert_eq!(SetPartitions::new(3).count(), 5);
        assert_eq!(SetPartitions::new(4).count(), 15);
        assert_eq!(SetPartitions::new(5).count(), 52);
    }
}

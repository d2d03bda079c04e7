//! Batch schedules under the sampling policies compared in the experiments.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How one epoch's batches are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingPolicy {
    /// Fresh uniform shuffle each epoch, partitioned into k disjoint batches.
    WithoutReplacement,
    /// k independent uniform size-b subsets (no duplicates within a batch).
    WithReplacement,
    /// One shuffle fixed for the whole experiment, reused every epoch.
    ShuffleOnce,
    /// Every batch is the full dataset.
    FullBatch,
    /// Full batch plus isotropic Gaussian gradient noise.
    NoisedFullBatch,
}

impl SamplingPolicy {
    pub const ALL: [SamplingPolicy; 5] = [
        SamplingPolicy::WithoutReplacement,
        SamplingPolicy::WithReplacement,
        SamplingPolicy::ShuffleOnce,
        SamplingPolicy::FullBatch,
        SamplingPolicy::NoisedFullBatch,
    ];

    pub fn disjoint(&self) -> bool {
        matches!(
            self,
            SamplingPolicy::WithoutReplacement | SamplingPolicy::ShuffleOnce
        )
    }
}

/// An ordered sequence of k batches for one epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSchedule {
    pub batches: Vec<Vec<usize>>,
    pub policy: SamplingPolicy,
    pub seed: u64,
}

impl BatchSchedule {
    pub fn k(&self) -> usize {
        self.batches.len()
    }

    /// A fixed schedule supplied directly (used by enumeration).
    pub fn fixed(batches: Vec<Vec<usize>>, policy: SamplingPolicy) -> Self {
        BatchSchedule {
            batches,
            policy,
            seed: 0,
        }
    }
}

/// Draw one epoch's schedule. Deterministic in `(seed, policy)`.
///
/// For the disjoint policies the dataset is shuffled once and split into k
/// blocks of size b; examples beyond `k*b` are unused for the epoch.
pub fn make_schedule(
    n: usize,
    hyper: &crate::problem::Hyperparams,
    policy: SamplingPolicy,
    seed: u64,
) -> Result<BatchSchedule> {
    let (k, b) = (hyper.k, hyper.b);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batches = match policy {
        SamplingPolicy::WithoutReplacement | SamplingPolicy::ShuffleOnce => {
            if k * b > n {
                return Err(Error::ScheduleInfeasible { requested: k * b, n });
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            // Canonical ascending order inside each batch: batch gradients
            // are averages, and a fixed reduction order keeps runs
            // bit-reproducible across policies.
            idx.chunks(b)
                .take(k)
                .map(|c| {
                    let mut batch = c.to_vec();
                    batch.sort_unstable();
                    batch
                })
                .collect()
        }
        SamplingPolicy::WithReplacement => {
            if b > n {
                return Err(Error::ScheduleInfeasible { requested: b, n });
            }
            (0..k)
                .map(|_| {
                    let mut batch = rand::seq::index::sample(&mut rng, n, b).into_vec();
                    batch.sort_unstable();
                    batch
                })
                .collect()
        }
        SamplingPolicy::FullBatch | SamplingPolicy::NoisedFullBatch => {
            vec![(0..n).collect::<Vec<usize>>(); k]
        }
    };
    Ok(BatchSchedule {
        batches,
        policy,
        seed,
    })
}

/// Per-epoch seed derivation (splitmix64 over the base seed and epoch).
pub fn epoch_seed(base: u64, epoch: u64) -> u64 {
    let mut z = base ^ epoch.wrapping_mul(0x9e3779b97f4a7c15);
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Number of distinct schedules a policy admits, for enumeration budgets.
///
/// Disjoint policies count ordered sequences of k pairwise-disjoint size-b
/// batches with canonical (sorted) within-batch order: `n! / ((n-kb)! b!^k)`.
/// WithReplacement counts `C(n,b)^k`. FullBatch has one schedule.
pub fn schedule_count(n: usize, k: usize, b: usize, policy: SamplingPolicy) -> u128 {
    match policy {
        SamplingPolicy::WithoutReplacement | SamplingPolicy::ShuffleOnce => {
            let mut count: u128 = 1;
            for step in 0..k {
                let remaining = n - step * b;
                count = count.saturating_mul(binomial_u128(remaining, b));
            }
            count
        }
        SamplingPolicy::WithReplacement => {
            let per = binomial_u128(n, b);
            let mut count: u128 = 1;
            for _ in 0..k {
                count = count.saturating_mul(per);
            }
            count
        }
        SamplingPolicy::FullBatch | SamplingPolicy::NoisedFullBatch => 1,
    }
}

fn binomial_u128(n: usize, r: usize) -> u128 {
    if r > n {
        return 0;
    }
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc.saturating_mul((n - i) as u128) / (i + 1) as u128;
    }
    acc
}

/// Enumerate every schedule of the policy, in a fixed lexicographic order.
///
/// Batches are canonicalized (ascending within each batch). Refuses rather
/// than truncating when the count exceeds `budget`.
pub fn enumerate_schedules(
    n: usize,
    hyper: &crate::problem::Hyperparams,
    policy: SamplingPolicy,
    budget: u128,
) -> Result<Vec<Vec<Vec<usize>>>> {
    let (k, b) = (hyper.k, hyper.b);
    let required = schedule_count(n, k, b, policy);
    if required > budget {
        return Err(Error::EnumerationTooLarge { required, budget });
    }
    match policy {
        SamplingPolicy::WithoutReplacement | SamplingPolicy::ShuffleOnce => {
            if k * b > n {
                return Err(Error::ScheduleInfeasible { requested: k * b, n });
            }
            let mut out = Vec::new();
            let mut current: Vec<Vec<usize>> = Vec::with_capacity(k);
            let mut free: Vec<usize> = (0..n).collect();
            disjoint_rec(&mut current, &mut free, k, b, &mut out);
            Ok(out)
        }
        SamplingPolicy::WithReplacement => {
            let subsets = combinations(n, b);
            let mut out = Vec::new();
            let mut stack: Vec<usize> = vec![0; k];
            loop {
                out.push(stack.iter().map(|&i| subsets[i].clone()).collect());
                let mut pos = k;
                loop {
                    if pos == 0 {
                        return Ok(out);
                    }
                    pos -= 1;
                    stack[pos] += 1;
                    if stack[pos] < subsets.len() {
                        break;
                    }
                    stack[pos] = 0;
                }
            }
        }
        SamplingPolicy::FullBatch | SamplingPolicy::NoisedFullBatch => {
            Ok(vec![vec![(0..n).collect::<Vec<usize>>(); k]])
        }
    }
}

fn disjoint_rec(
    current: &mut Vec<Vec<usize>>,
    free: &mut Vec<usize>,
    k: usize,
    b: usize,
    out: &mut Vec<Vec<Vec<usize>>>,
) {
    if current.len() == k {
        out.push(current.clone());
        return;
    }
    let choices = combinations_of(free, b);
    for batch in choices {
        let saved = free.clone();
        free.retain(|x| !batch.contains(x));
        current.push(batch);
        disjoint_rec(current, free, k, b, out);
        current.pop();
        *free = saved;
    }
}

fn combinations(n: usize, r: usize) -> Vec<Vec<usize>> {
    let all: Vec<usize> = (0..n).collect();
    combinations_of(&all, r)
}

fn combinations_of(items: &[usize], r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let n = items.len();
    if r > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..r).collect();
    loop {
        out.push(idx.iter().map(|&i| items[i]).collect());
        let mut pos = r;
        loop {
            if pos == 0 {
                return out;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] <= n - (r - pos) {
                for later in pos + 1..r {
                    idx[later] = idx[later - 1] + 1;
                }
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::Hyperparams;

    #[test]
    fn full_batch_single_batch_when_b_equals_n() {
        let hyper = Hyperparams::new(0.1, 1, 5).unwrap();
        for policy in SamplingPolicy::ALL {
            let s = make_schedule(5, &hyper, policy, 7).unwrap();
            assert_eq!(s.k(), 1);
            let mut batch = s.batches[0].clone();
            batch.sort_unstable();
            assert_eq!(batch, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn without_replacement_is_a_permutation() {
        let hyper = Hyperparams::new(0.1, 6, 1).unwrap();
        let s = make_schedule(6, &hyper, SamplingPolicy::WithoutReplacement, 3).unwrap();
        let mut seen: Vec<usize> = s.batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn same_seed_same_schedule() {
        let hyper = Hyperparams::new(0.1, 3, 2).unwrap();
        for policy in SamplingPolicy::ALL {
            let a = make_schedule(7, &hyper, policy, 99).unwrap();
            let b = make_schedule(7, &hyper, policy, 99).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn infeasible_partition_is_an_error() {
        let hyper = Hyperparams::new(0.1, 4, 2).unwrap();
        let err = make_schedule(7, &hyper, SamplingPolicy::WithoutReplacement, 0).unwrap_err();
        assert!(matches!(err, Error::ScheduleInfeasible { .. }));
    }

    #[test]
    fn schedule_counts() {
        // n=6, b=1, k=6: all 720 orderings.
        assert_eq!(
            schedule_count(6, 6, 1, SamplingPolicy::WithoutReplacement),
            720
        );
        // n=4, b=2, k=2: 6 ordered partitions.
        assert_eq!(
            schedule_count(4, 2, 2, SamplingPolicy::WithoutReplacement),
            6
        );
        assert_eq!(schedule_count(3, 2, 1, SamplingPolicy::WithReplacement), 9);
    }

    #[test]
    fn enumeration_matches_count_and_respects_budget() {
        let hyper = Hyperparams::new(0.1, 2, 2).unwrap();
        let all =
            enumerate_schedules(4, &hyper, SamplingPolicy::WithoutReplacement, 1_000).unwrap();
        assert_eq!(all.len(), 6);
        let err =
            enumerate_schedules(4, &hyper, SamplingPolicy::WithoutReplacement, 3).unwrap_err();
        assert!(matches!(err, Error::EnumerationTooLarge { .. }));
    }

    #[test]
    fn with_replacement_batches_have_no_duplicates() {
        let hyper = Hyperparams::new(0.1, 5, 3).unwrap();
        let s = make_schedule(6, &hyper, SamplingPolicy::WithReplacement, 11).unwrap();
        for batch in &s.batches {
            let mut b = batch.clone();
            b.dedup();
            assert_eq!(b.len(), 3);
        }
    }
}

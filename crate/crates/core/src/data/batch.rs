use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SamplePair;
use crate::error::{Error, Result};
use crate::rng;

/// Task-major batch layout: `samples_per_task` samples of task 0, then of
/// task 1, and so on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub n_tasks: usize,
    pub samples_per_task: usize,
}

impl BatchPlan {
    pub fn new(n_tasks: usize, samples_per_task: usize) -> Result<Self> {
        if n_tasks == 0 || samples_per_task == 0 {
            return Err(Error::Config(
                "batch plan needs at least one task and one sample".into(),
            ));
        }
        Ok(BatchPlan {
            n_tasks,
            samples_per_task,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.n_tasks * self.samples_per_task
    }

    /// Task label of every batch position.
    pub fn labels(&self) -> Vec<usize> {
        (0..self.n_tasks)
            .flat_map(|t| std::iter::repeat_n(t, self.samples_per_task))
            .collect()
    }
}

/// Deterministic stream of task-balanced batches.
///
/// An epoch spans `ceil(L / N_s)` batches, where `L` is the size of the
/// largest task. Tasks of size `L` are visited as a random permutation
/// (topped up with random draws when `L` is not a multiple of `N_s`); smaller
/// tasks are drawn uniformly with replacement. The schedule of epoch `e`
/// depends only on `(seed, e)`, so a batch can be recomputed from its step.
#[derive(Debug, Clone)]
pub struct BalancedBatches {
    sizes: Vec<usize>,
    plan: BatchPlan,
    seed: u64,
    cached_epoch: Option<u64>,
    schedule: Vec<Vec<usize>>,
}

impl BalancedBatches {
    pub fn new(task_sizes: &[usize], plan: BatchPlan, seed: u64) -> Result<Self> {
        if task_sizes.len() != plan.n_tasks {
            return Err(Error::Config(format!(
                "batch plan has {} tasks but {} datasets were given",
                plan.n_tasks,
                task_sizes.len()
            )));
        }
        if let Some(t) = task_sizes.iter().position(|&s| s == 0) {
            return Err(Error::Config(format!("task {t} has an empty dataset")));
        }
        Ok(BalancedBatches {
            sizes: task_sizes.to_vec(),
            plan,
            seed,
            cached_epoch: None,
            schedule: Vec::new(),
        })
    }

    pub fn plan(&self) -> BatchPlan {
        self.plan
    }

    pub fn batches_per_epoch(&self) -> usize {
        let largest = *self.sizes.iter().max().unwrap();
        largest.div_ceil(self.plan.samples_per_task)
    }

    fn build_epoch(&mut self, epoch: u64) {
        let draws = self.batches_per_epoch() * self.plan.samples_per_task;
        let largest = *self.sizes.iter().max().unwrap();
        let mut rng = rng::stream(self.seed, epoch);
        self.schedule = self
            .sizes
            .iter()
            .map(|&n| {
                let mut seq: Vec<usize> = if n == largest {
                    let mut p: Vec<usize> = (0..n).collect();
                    p.shuffle(&mut rng);
                    p
                } else {
                    Vec::with_capacity(draws)
                };
                while seq.len() < draws {
                    seq.push(rng.random_range(0..n));
                }
                seq
            })
            .collect();
        self.cached_epoch = Some(epoch);
    }

    /// `(task, sample index)` pairs of global batch number `step`, task-major.
    pub fn batch(&mut self, step: u64) -> Vec<(usize, usize)> {
        let bpe = self.batches_per_epoch() as u64;
        let epoch = step / bpe;
        if self.cached_epoch != Some(epoch) {
            self.build_epoch(epoch);
        }
        let pos = (step % bpe) as usize * self.plan.samples_per_task;
        let ns = self.plan.samples_per_task;
        self.schedule
            .iter()
            .enumerate()
            .flat_map(|(t, seq)| seq[pos..pos + ns].iter().map(move |&i| (t, i)))
            .collect()
    }

    pub fn iter(&mut self) -> impl Iterator<Item = Vec<(usize, usize)>> + '_ {
        (0u64..).map(move |s| self.batch(s))
    }
}

/// Builds the balanced batch stream over per-task datasets.
pub fn make_balanced_batches(
    datasets: &[Vec<SamplePair>],
    plan: BatchPlan,
    seed: u64,
) -> Result<BalancedBatches> {
    let sizes: Vec<usize> = datasets.iter().map(Vec::len).collect();
    BalancedBatches::new(&sizes, plan, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn task_major_labels() {
        let plan = BatchPlan::new(5, 2).unwrap();
        let mut b = BalancedBatches::new(&[7, 3, 5, 9, 2], plan, 1).unwrap();
        for batch in b.iter().take(20) {
            let labels: Vec<usize> = batch.iter().map(|p| p.0).collect();
            assert_eq!(labels, vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4]);
        }
        assert_eq!(plan.labels(), vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4]);
    }

    #[test]
    fn small_task_is_resampled_to_match_largest() {
        let plan = BatchPlan::new(2, 2).unwrap();
        let mut b = BalancedBatches::new(&[10, 2], plan, 42).unwrap();
        assert_eq!(b.batches_per_epoch(), 5);
        let epoch: Vec<(usize, usize)> = (0..5).flat_map(|s| b.batch(s)).collect();
        let big: Vec<usize> = epoch.iter().filter(|p| p.0 == 0).map(|p| p.1).collect();
        let small: Vec<usize> = epoch.iter().filter(|p| p.0 == 1).map(|p| p.1).collect();
        let mut sorted = big.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(small.len(), 10);
        assert!(small.iter().all(|&i| i < 2));
    }

    #[test]
    fn empty_task_is_config_error() {
        let plan = BatchPlan::new(3, 2).unwrap();
        assert!(matches!(
            BalancedBatches::new(&[4, 0, 4], plan, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn replay_is_deterministic() {
        let plan = BatchPlan::new(3, 4).unwrap();
        let mut a = BalancedBatches::new(&[5, 11, 3], plan, 9).unwrap();
        let mut b = BalancedBatches::new(&[5, 11, 3], plan, 9).unwrap();
        let first: Vec<_> = a.iter().take(13).collect();
        let second: Vec<_> = b.iter().take(13).collect();
        assert_eq!(first, second);
        // random access matches sequential order
        assert_eq!(a.batch(7), first[7]);
    }

    proptest! {
        #[test]
        fn every_batch_is_balanced(sizes in prop::collection::vec(1usize..20, 1..6), ns in 1usize..5, seed in any::<u64>()) {
            let plan = BatchPlan::new(sizes.len(), ns).unwrap();
            let mut b = BalancedBatches::new(&sizes, plan, seed).unwrap();
            for step in 0..(2 * b.batches_per_epoch() as u64 + 1) {
                let batch = b.batch(step);
                prop_assert_eq!(batch.len(), plan.batch_size());
                for (pos, &(t, i)) in batch.iter().enumerate() {
                    prop_assert_eq!(t, pos / ns);
                    prop_assert!(i < sizes[t]);
                }
            }
        }
    }
}

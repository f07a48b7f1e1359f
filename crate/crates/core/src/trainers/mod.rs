//! Training procedures: dense ERM (optionally reweighted), sparse training
//! with prune-and-grow (reweighted or not), and the three-stage
//! mask-probing baseline.

mod dense_sparse;
mod mrm;

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numcore::AdamConfig;
use crate::rng::{stream, Rng, Stream};
use crate::sparsity::{AllocationMethod, SparseNet, UpdateReport};

pub use dense_sparse::{dense_gradients, train_erm, train_rest, train_sparse_unweighted, SparseSetup};
pub use mrm::{mrm_probe, mrm_restart, train_mrm, MrmConfig, ProbeOutcome, MASK_LOGIT_INIT};

/// Training-loop hyper-parameters shared by every method.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLoopConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Evaluate after every `eval_every` steps and after the last one.
    pub eval_every: usize,
    pub seed: u64,
    /// Training accuracy is measured on this many leading training examples.
    pub train_eval_examples: usize,
}

impl TrainLoopConfig {
    /// 3000 steps, batch 128, lr 1e-2, weight decay 1e-4, ten evaluations.
    pub fn desk_default(seed: u64) -> Self {
        Self::with_steps(3000, seed)
    }

    pub fn with_steps(total_steps: usize, seed: u64) -> Self {
        Self {
            total_steps,
            batch_size: 128,
            adam: AdamConfig { lr: 1e-2, weight_decay: 1e-4, ..AdamConfig::default() },
            eval_every: (total_steps / 10).max(1),
            seed,
            train_eval_examples: 2000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.total_steps == 0 {
            return Err(Error::invalid("total_steps must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2 for batchnorm"));
        }
        if self.eval_every == 0 || self.eval_every > self.total_steps {
            return Err(Error::invalid(format!(
                "eval_every {} must lie in [1, total_steps = {}]",
                self.eval_every, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Training and unbiased test splits.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
}

/// Metrics at one evaluation point.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPoint {
    pub step: usize,
    /// Active fraction of the sparsifiable weights (1 when dense).
    pub density: f64,
    /// Mean training objective over the steps since the previous point.
    pub train_loss: f64,
    /// Accuracy on the leading training examples.
    pub train_acc: f64,
    pub unbiased_acc: f64,
    pub conflicting_acc: f64,
    pub worst_group_acc: f64,
    pub params_active: u64,
    pub cumulative_train_flops: u64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub points: Vec<EvalPoint>,
    /// Final masks of sparse trainers.
    pub net: Option<SparseNet>,
    pub updates: Vec<UpdateReport>,
}

/// Receives each evaluation point as soon as it is computed.
pub type EvalSink<'a> = &'a mut dyn FnMut(&EvalPoint);

/// Reshuffles the training indices every epoch; an incomplete final batch
/// is dropped.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: Rng,
}

impl BatchSampler {
    pub fn new(count: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > count {
            return Err(Error::invalid(format!("batch size {batch_size} does not fit {count} training examples")));
        }
        Ok(Self { order: (0..count).collect(), cursor: count, batch_size, rng: stream(seed, Stream::Batches) })
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.cursor + self.batch_size > self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += self.batch_size;
        &self.order[self.cursor - self.batch_size..self.cursor]
    }
}

/// Sparse-training setup: allocation method and global density.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparsityConfig {
    pub method: AllocationMethod,
    pub density: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_covers_each_epoch_once() {
        let mut s = BatchSampler::new(10, 3, 0).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch().to_vec()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert!(BatchSampler::new(2, 3, 0).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainLoopConfig::with_steps(100, 0);
        assert!(c.validate().is_ok());
        c.eval_every = 0;
        assert!(c.validate().is_err());
        c = TrainLoopConfig::with_steps(100, 0);
        c.batch_size = 1;
        assert!(c.validate().is_err());
    }
}

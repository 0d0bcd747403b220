//! Class-rebalanced batches: every batch holds each class as evenly as the
//! batch size allows, so rare classes are oversampled.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClassLabel, ImageRecord};
use crate::error::{Error, Result};

/// Endless stream of index batches into the record list it was built from.
///
/// Per batch, `batch_size / 3` slots go to every class and the remaining
/// slots to classes chosen round-robin, so counts differ by at most one and
/// the short class rotates. Each class draws without replacement from a
/// shuffled pool that is reshuffled whenever it runs dry.
pub struct RebalancedBatches {
    pools: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    batch_size: usize,
    batch_index: usize,
    rng: ChaCha8Rng,
}

impl RebalancedBatches {
    pub fn new(records: &[ImageRecord], batch_size: usize, seed: u64) -> Result<Self> {
        let labels: Vec<ClassLabel> = records.iter().map(|r| r.label).collect();
        Self::from_labels(&labels, batch_size, seed)
    }

    /// Same as [`RebalancedBatches::new`] over bare labels.
    pub fn from_labels(labels: &[ClassLabel], batch_size: usize, seed: u64) -> Result<Self> {
        let k = ClassLabel::COUNT;
        if batch_size < k {
            return Err(Error::Sampler(format!(
                "batch size {batch_size} is smaller than the {k} classes"
            )));
        }
        let mut pools = vec![Vec::new(); k];
        for (i, label) in labels.iter().enumerate() {
            pools[label.index()].push(i);
        }
        if let Some(empty) = pools.iter().position(|p| p.is_empty()) {
            return Err(Error::Sampler(format!(
                "class {} has no training records",
                ClassLabel::ALL[empty].display_name()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for pool in &mut pools {
            pool.shuffle(&mut rng);
        }
        Ok(RebalancedBatches {
            cursors: vec![0; k],
            pools,
            batch_size,
            batch_index: 0,
            rng,
        })
    }

    /// Batches that cover the training set about once.
    pub fn batches_per_epoch(&self) -> usize {
        let n: usize = self.pools.iter().map(Vec::len).sum();
        n.div_ceil(self.batch_size)
    }

    /// Per-class slot counts of batch `b`.
    pub fn quota(&self, b: usize) -> Vec<usize> {
        let k = self.pools.len();
        let base = self.batch_size / k;
        let extra = self.batch_size % k;
        let mut q = vec![base; k];
        for j in 0..extra {
            q[(b * extra + j) % k] += 1;
        }
        q
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let quota = self.quota(self.batch_index);
        self.batch_index += 1;
        let mut batch = Vec::with_capacity(self.batch_size);
        for (c, &n) in quota.iter().enumerate() {
            for _ in 0..n {
                if self.cursors[c] == self.pools[c].len() {
                    self.pools[c].shuffle(&mut self.rng);
                    self.cursors[c] = 0;
                }
                batch.push(self.pools[c][self.cursors[c]]);
                self.cursors[c] += 1;
            }
        }
        batch.shuffle(&mut self.rng);
        batch
    }
}

impl Iterator for RebalancedBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}

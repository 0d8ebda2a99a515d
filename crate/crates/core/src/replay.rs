//! Bounded FIFO of backbone features and their nuisance labels.
//!
//! Features are stored exactly as produced by the backbone and never
//! recomputed, so nuisance heads can be trained from the queue without
//! another backbone forward pass. They go stale as the backbone moves on.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::nn_core::Tensor;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ReplayError {
    #[error("batch of {batch} items exceeds queue capacity {capacity}")]
    BatchTooLarge { batch: usize, capacity: usize },
    #[error("queue holds {len} items, {requested} requested")]
    NotEnoughItems { len: usize, requested: usize },
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("queue capacity must be positive")]
    ZeroCapacity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayItem {
    pub feature: Vec<f64>,
    pub y_n: Vec<usize>,
}

/// Features and per-nuisance label columns for one minibatch drawn from the
/// queue. `labels[i][j]` is nuisance `i` of row `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBatch {
    pub features: Tensor,
    pub labels: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct ReplayQueue {
    capacity: usize,
    feature_dim: usize,
    num_nuisances: usize,
    items: VecDeque<ReplayItem>,
}

impl ReplayQueue {
    pub fn new(capacity: usize, feature_dim: usize, num_nuisances: usize) -> Result<Self, ReplayError> {
        if capacity == 0 {
            return Err(ReplayError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            feature_dim,
            num_nuisances,
            items: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &ReplayItem> {
        self.items.iter()
    }

    /// Appends `features.rows()` items, evicting the oldest on overflow.
    /// `labels` is column-major per nuisance, as in [`ReplayBatch`].
    pub fn enqueue_batch(&mut self, features: &Tensor, labels: &[Vec<usize>]) -> Result<(), ReplayError> {
        let n = features.rows();
        if n > self.capacity {
            return Err(ReplayError::BatchTooLarge { batch: n, capacity: self.capacity });
        }
        if features.cols() != self.feature_dim {
            return Err(ReplayError::Dim(format!(
                "feature dim {} != queue dim {}",
                features.cols(),
                self.feature_dim
            )));
        }
        if labels.len() != self.num_nuisances || labels.iter().any(|col| col.len() != n) {
            return Err(ReplayError::Dim(format!(
                "expected {} label columns of length {n}",
                self.num_nuisances
            )));
        }
        let overflow = (self.items.len() + n).saturating_sub(self.capacity);
        self.items.drain(..overflow);
        for r in 0..n {
            self.items.push_back(ReplayItem {
                feature: features.row(r).to_vec(),
                y_n: labels.iter().map(|col| col[r]).collect(),
            });
        }
        Ok(())
    }

    fn gather<'a>(&self, items: impl ExactSizeIterator<Item = &'a ReplayItem>) -> ReplayBatch {
        let n = items.len();
        let mut data = Vec::with_capacity(n * self.feature_dim);
        let mut labels = vec![Vec::with_capacity(n); self.num_nuisances];
        for item in items {
            data.extend_from_slice(&item.feature);
            for (col, &v) in labels.iter_mut().zip(&item.y_n) {
                col.push(v);
            }
        }
        ReplayBatch {
            features: Tensor::matrix(n, self.feature_dim, data).expect("stored dims are uniform"),
            labels,
        }
    }

    /// The `n` most recently enqueued items, oldest first.
    pub fn latest_batch(&self, n: usize) -> Result<ReplayBatch, ReplayError> {
        if n > self.items.len() {
            return Err(ReplayError::NotEnoughItems { len: self.items.len(), requested: n });
        }
        Ok(self.gather(self.items.range(self.items.len() - n..)))
    }

    /// A random permutation of the queue cut into `floor(len / n)` disjoint
    /// minibatches of exactly `n` items.
    pub fn full_pass_minibatches<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<ReplayBatch>, ReplayError> {
        if n == 0 || n > self.items.len() {
            return Err(ReplayError::NotEnoughItems { len: self.items.len(), requested: n });
        }
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        order.shuffle(rng);
        Ok(order
            .chunks_exact(n)
            .map(|chunk| self.gather(chunk.iter().map(|&i| &self.items[i])))
            .collect())
    }
}

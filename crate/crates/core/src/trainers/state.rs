use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::data_synth::DatasetSpec;
use crate::nn_core::{init_network, Network, NetworkSpec};
use crate::seeds::derive_seed;

/// Layer sizes for the backbone and the heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub backbone_hidden: Vec<usize>,
    pub det_hidden: Vec<usize>,
    pub nuisance_hidden: Vec<usize>,
    pub nuisance_cardinalities: Vec<usize>,
}

impl ModelSpec {
    /// Backbone `input -> 128 -> 64`, linear heads on the 64-d feature.
    pub fn for_dataset(spec: &DatasetSpec) -> Self {
        Self {
            input_dim: spec.num_pixels(),
            num_classes: spec.num_classes,
            feature_dim: 64,
            backbone_hidden: vec![128],
            det_hidden: vec![],
            nuisance_hidden: vec![],
            nuisance_cardinalities: spec.cardinalities(),
        }
    }

    pub fn num_nuisances(&self) -> usize {
        self.nuisance_cardinalities.len()
    }

    pub fn backbone_spec(&self) -> NetworkSpec {
        NetworkSpec::new(self.input_dim, self.backbone_hidden.clone(), self.feature_dim)
    }

    /// Class logits followed by the 4 box outputs.
    pub fn det_spec(&self) -> NetworkSpec {
        NetworkSpec::new(self.feature_dim, self.det_hidden.clone(), self.num_classes + 4)
    }

    pub fn nuisance_spec(&self, i: usize) -> NetworkSpec {
        NetworkSpec::new(
            self.feature_dim,
            self.nuisance_hidden.clone(),
            self.nuisance_cardinalities[i],
        )
    }
}

/// `f_O(f_T(x))`: the part of the model that is kept after training.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionModel {
    pub backbone: Network,
    pub det_head: Network,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub backbone_forwards: u64,
    pub nuisance_sgd_steps: u64,
    pub reinit_count: u64,
    pub full_pass_count: u64,
    /// NDFT monitoring loops that stopped at `max_inner_iters`.
    pub inner_cap_hits: u64,
}

/// Epoch-wise shuffled minibatch indices; a partial tail is dropped.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            cursor: 0,
        }
    }

    pub fn next_indices(&mut self, len: usize, n: usize) -> Result<Vec<usize>, TrainError> {
        if n == 0 || n > len {
            return Err(TrainError::Config(format!(
                "cannot draw minibatches of {n} from {len} samples"
            )));
        }
        if self.order.len() != len || self.cursor + n > len {
            if self.order.len() != len {
                self.order = (0..len).collect();
            }
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let idx = self.order[self.cursor..self.cursor + n].to_vec();
        self.cursor += n;
        Ok(idx)
    }
}

/// Everything a trainer mutates: the three players, the iteration counter,
/// compute counters and the random streams.
///
/// Random streams are independent so that the outer minibatch sequence is
/// the same across trainers given the same seed, whatever the nuisance
/// machinery consumes.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ModelSpec,
    pub detector: DetectionModel,
    pub nuisance_heads: Vec<Network>,
    pub t: usize,
    pub counters: Counters,
    pub(crate) data_sampler: BatchSampler,
    pub(crate) inner_sampler: BatchSampler,
    pub(crate) reinit_rng: ChaCha8Rng,
    pub(crate) queue_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: &ModelSpec, seed: u64) -> Result<Self, TrainError> {
        let backbone = init_network(&model.backbone_spec(), derive_seed(seed, 100))?;
        let det_head = init_network(&model.det_spec(), derive_seed(seed, 101))?;
        let nuisance_heads = (0..model.num_nuisances())
            .map(|i| init_network(&model.nuisance_spec(i), derive_seed(seed, 200 + i as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            model: model.clone(),
            detector: DetectionModel {
                backbone,
                det_head,
                num_classes: model.num_classes,
            },
            nuisance_heads,
            t: 0,
            counters: Counters::default(),
            data_sampler: BatchSampler::new(derive_seed(seed, 1)),
            inner_sampler: BatchSampler::new(derive_seed(seed, 2)),
            reinit_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 3)),
            queue_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 4)),
        })
    }

    pub fn backbone(&self) -> &Network {
        &self.detector.backbone
    }

    pub fn det_head(&self) -> &Network {
        &self.detector.det_head
    }
}

use std::time::Instant;

use super::steps::{
    ema_nuisance_update, full_queue_retrain_if_due, joint_update, monitor_and_update_nuisance,
    reinit_nuisance_if_due,
};
use super::{
    AdversarialMode, AndftConfig, BaselineConfig, IterationMetrics, JointObjective, ModelSpec,
    NdftConfig, TrainError, TrainState, TrainerConfig,
};
use crate::data_synth::{Batch, Sample};
use crate::replay::ReplayQueue;

/// A finished run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<IterationMetrics>,
}

/// A run that stopped on an error; the log up to the failure is kept.
#[derive(Debug, thiserror::Error)]
#[error("training aborted after {} iterations: {error}", log.len())]
pub struct TrainAbort {
    #[source]
    pub error: TrainError,
    pub log: Vec<IterationMetrics>,
}

/// Step-wise driver shared by all three algorithms. Only sees the training
/// split.
#[derive(Debug, Clone)]
pub struct Trainer {
    state: TrainState,
    config: TrainerConfig,
    queue: Option<ReplayQueue>,
    log: Vec<IterationMetrics>,
    elapsed: f64,
}

impl Trainer {
    pub fn new(model: &ModelSpec, config: TrainerConfig, seed: u64) -> Result<Self, TrainError> {
        config.validate(model.num_nuisances())?;
        let queue = match &config {
            TrainerConfig::Andft(c) => Some(ReplayQueue::new(
                c.queue_capacity,
                model.feature_dim,
                model.num_nuisances(),
            )?),
            _ => None,
        };
        Ok(Self {
            state: TrainState::new(model, seed)?,
            config,
            queue,
            log: Vec::new(),
            elapsed: 0.0,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn queue(&self) -> Option<&ReplayQueue> {
        self.queue.as_ref()
    }

    pub fn log(&self) -> &[IterationMetrics] {
        &self.log
    }

    pub fn is_done(&self) -> bool {
        self.state.t >= self.config.iterations()
    }

    /// Runs one outer iteration and appends its metrics row. Elapsed time
    /// counts only time spent inside `step`.
    pub fn step(&mut self, train: &[Sample]) -> Result<&IterationMetrics, TrainError> {
        let started = Instant::now();
        let forwards_before = self.state.counters.backbone_forwards;
        self.state.t += 1;
        let n = self.config.batch_size();
        let idx = self.state.data_sampler.next_indices(train.len(), n)?;
        let batch = Batch::from_samples(idx.iter().map(|&i| &train[i]));

        let joint = match &self.config {
            TrainerConfig::Baseline(c) => {
                let objective = JointObjective {
                    gammas: vec![0.0; self.state.nuisance_heads.len()],
                    mode: AdversarialMode::NegativeEntropy,
                    loc_weight: c.loc_weight,
                };
                joint_update(&mut self.state, &batch, &objective, c.eta_u)?
            }
            TrainerConfig::Ndft(c) => {
                let out = joint_update(&mut self.state, &batch, &c.objective(), c.eta_u)?;
                monitor_and_update_nuisance(&mut self.state, train, c)?;
                reinit_nuisance_if_due(&mut self.state, c.psi)?;
                out
            }
            TrainerConfig::Andft(c) => {
                let queue = self.queue.as_mut().expect("A-NDFT trainer owns a queue");
                let out = joint_update(&mut self.state, &batch, &c.objective(), c.eta_u)?;
                queue.enqueue_batch(&out.features, &batch.y_n)?;
                ema_nuisance_update(&mut self.state, &out.features, &batch.y_n, c.beta, c.eta_n)?;
                full_queue_retrain_if_due(&mut self.state, queue, c.phi, c.eta_n, n)?;
                out
            }
        };

        self.elapsed += started.elapsed().as_secs_f64();
        let total = self.state.counters.backbone_forwards;
        self.log.push(IterationMetrics {
            t: self.state.t,
            loss_o: joint.loss_o,
            adversarial_loss: joint.adversarial_loss,
            nuisance_accuracy: joint.nuisance_accuracy,
            backbone_forwards_this_iter: total - forwards_before,
            backbone_forwards_total: total,
            elapsed_seconds: self.elapsed,
        });
        Ok(self.log.last().expect("just pushed"))
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            state: self.state,
            log: self.log,
        }
    }

    pub fn run(mut self, train: &[Sample]) -> Result<TrainOutcome, TrainAbort> {
        while !self.is_done() {
            if let Err(error) = self.step(train) {
                return Err(TrainAbort { error, log: self.log });
            }
        }
        Ok(self.into_outcome())
    }
}

fn start(model: &ModelSpec, config: TrainerConfig, seed: u64) -> Result<Trainer, TrainAbort> {
    Trainer::new(model, config, seed).map_err(|error| TrainAbort { error, log: Vec::new() })
}

/// Detection-only SGD; exactly one backbone forward per iteration.
pub fn train_baseline(
    train: &[Sample],
    model: &ModelSpec,
    config: &BaselineConfig,
    seed: u64,
) -> Result<TrainOutcome, TrainAbort> {
    start(model, TrainerConfig::Baseline(config.clone()), seed)?.run(train)
}

pub fn train_ndft(
    train: &[Sample],
    model: &ModelSpec,
    config: &NdftConfig,
    seed: u64,
) -> Result<TrainOutcome, TrainAbort> {
    start(model, TrainerConfig::Ndft(config.clone()), seed)?.run(train)
}

pub fn train_andft(
    train: &[Sample],
    model: &ModelSpec,
    config: &AndftConfig,
    seed: u64,
) -> Result<TrainOutcome, TrainAbort> {
    start(model, TrainerConfig::Andft(config.clone()), seed)?.run(train)
}

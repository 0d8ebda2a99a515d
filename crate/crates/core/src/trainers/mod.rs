//! Baseline, NDFT and A-NDFT training loops.
//!
//! All three share one [`TrainState`] layout (backbone, detection head, k
//! nuisance heads) and one joint update for the backbone and detection head.
//! They differ only in how the nuisance heads are kept strong:
//!
//! * baseline: nuisance heads are ignored (all adversarial weights zero).
//! * NDFT: after each joint step the heads are trained on fresh minibatches
//!   until every head's batch accuracy exceeds `alpha`, and they are
//!   re-initialized every `psi` iterations. Every check needs a fresh
//!   backbone forward pass.
//! * A-NDFT: the features from the joint step are pushed into a replay
//!   queue and reused for an EMA-damped head update; every `phi` iterations
//!   the heads take one SGD pass over the whole queue. Exactly one backbone
//!   forward per iteration.

mod run;
mod state;
mod steps;

use serde::{Deserialize, Serialize};

use crate::nn_core::NnError;
use crate::replay::ReplayError;

pub use run::{train_andft, train_baseline, train_ndft, TrainAbort, TrainOutcome, Trainer};
pub use state::{BatchSampler, Counters, DetectionModel, ModelSpec, TrainState};
pub use steps::{
    backbone_forward, ema_nuisance_update, ema_update_params, full_queue_retrain_if_due,
    joint_gradients, joint_update, monitor_and_update_nuisance, nuisance_gradients,
    nuisance_sgd_update, reinit_nuisance_if_due, JointGradients, JointOutput, NuisanceGradients,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("numeric failure in {term}")]
    Numeric { term: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("invalid training config: {0}")]
    Config(String),
}

/// How the backbone is pushed away from the nuisance heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    /// Minimize the heads' negative entropy (drive them toward uniform).
    #[default]
    NegativeEntropy,
    /// Maximize the heads' cross-entropy.
    GradientReversal,
}

/// The backbone/detection-head objective `L_O + Σ γ_i A_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointObjective {
    pub gammas: Vec<f64>,
    pub mode: AdversarialMode,
    pub loc_weight: f64,
}

pub const DEFAULT_GAMMA: f64 = 0.01;
pub const DEFAULT_BETA: f64 = 0.99;
pub const DEFAULT_PHI: usize = 325;
pub const DEFAULT_QUEUE_CAPACITY: usize = 256;
pub const DEFAULT_ALPHA: f64 = 0.6;
pub const DEFAULT_PSI: usize = 500;
pub const DEFAULT_MAX_INNER_ITERS: usize = 50;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_LEARNING_RATE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub eta_u: f64,
    pub loc_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NdftConfig {
    pub gammas: Vec<f64>,
    pub iterations: usize,
    /// Accuracy threshold; negative disables monitoring.
    pub alpha: f64,
    pub psi: usize,
    pub eta_u: f64,
    pub eta_n: f64,
    pub batch_size: usize,
    pub max_inner_iters: usize,
    pub adversarial_mode: AdversarialMode,
    pub loc_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AndftConfig {
    pub gammas: Vec<f64>,
    pub iterations: usize,
    pub eta_u: f64,
    pub eta_n: f64,
    pub batch_size: usize,
    pub queue_capacity: usize,
    pub beta: f64,
    pub phi: usize,
    pub adversarial_mode: AdversarialMode,
    pub loc_weight: f64,
}

impl BaselineConfig {
    pub fn new(iterations: usize) -> Self {
        Self {
            iterations,
            batch_size: DEFAULT_BATCH_SIZE,
            eta_u: DEFAULT_LEARNING_RATE,
            loc_weight: 1.0,
        }
    }
}

impl NdftConfig {
    pub fn new(iterations: usize, k: usize) -> Self {
        Self {
            gammas: vec![DEFAULT_GAMMA; k],
            iterations,
            alpha: DEFAULT_ALPHA,
            psi: DEFAULT_PSI,
            eta_u: DEFAULT_LEARNING_RATE,
            eta_n: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            max_inner_iters: DEFAULT_MAX_INNER_ITERS,
            adversarial_mode: AdversarialMode::default(),
            loc_weight: 1.0,
        }
    }

    pub fn objective(&self) -> JointObjective {
        JointObjective {
            gammas: self.gammas.clone(),
            mode: self.adversarial_mode,
            loc_weight: self.loc_weight,
        }
    }
}

impl AndftConfig {
    pub fn new(iterations: usize, k: usize) -> Self {
        Self {
            gammas: vec![DEFAULT_GAMMA; k],
            iterations,
            eta_u: DEFAULT_LEARNING_RATE,
            eta_n: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            beta: DEFAULT_BETA,
            phi: DEFAULT_PHI,
            adversarial_mode: AdversarialMode::default(),
            loc_weight: 1.0,
        }
    }

    pub fn objective(&self) -> JointObjective {
        JointObjective {
            gammas: self.gammas.clone(),
            mode: self.adversarial_mode,
            loc_weight: self.loc_weight,
        }
    }
}

fn check_rate(name: &str, v: f64) -> Result<(), TrainError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(TrainError::Config(format!("{name} must be finite and >= 0, got {v}")))
    }
}

fn check_gammas(gammas: &[f64], k: usize) -> Result<(), TrainError> {
    if gammas.len() != k {
        return Err(TrainError::Config(format!(
            "{} gammas for {k} nuisances",
            gammas.len()
        )));
    }
    gammas.iter().try_for_each(|&g| check_rate("gamma", g))
}

/// Which training loop to run, with its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainerConfig {
    Baseline(BaselineConfig),
    Ndft(NdftConfig),
    Andft(AndftConfig),
}

impl TrainerConfig {
    pub fn iterations(&self) -> usize {
        match self {
            TrainerConfig::Baseline(c) => c.iterations,
            TrainerConfig::Ndft(c) => c.iterations,
            TrainerConfig::Andft(c) => c.iterations,
        }
    }

    pub fn batch_size(&self) -> usize {
        match self {
            TrainerConfig::Baseline(c) => c.batch_size,
            TrainerConfig::Ndft(c) => c.batch_size,
            TrainerConfig::Andft(c) => c.batch_size,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainerConfig::Baseline(_) => "baseline",
            TrainerConfig::Ndft(_) => "ndft",
            TrainerConfig::Andft(_) => "andft",
        }
    }

    pub fn validate(&self, k: usize) -> Result<(), TrainError> {
        if self.batch_size() == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        match self {
            TrainerConfig::Baseline(c) => {
                check_rate("eta_u", c.eta_u)?;
                check_rate("loc_weight", c.loc_weight)
            }
            TrainerConfig::Ndft(c) => {
                check_gammas(&c.gammas, k)?;
                check_rate("eta_u", c.eta_u)?;
                check_rate("eta_n", c.eta_n)?;
                check_rate("loc_weight", c.loc_weight)?;
                if !(c.alpha < 1.0) {
                    return Err(TrainError::Config(format!("alpha must be < 1, got {}", c.alpha)));
                }
                if c.psi == 0 || c.max_inner_iters == 0 {
                    return Err(TrainError::Config("psi and max_inner_iters must be positive".into()));
                }
                Ok(())
            }
            TrainerConfig::Andft(c) => {
                check_gammas(&c.gammas, k)?;
                check_rate("eta_u", c.eta_u)?;
                check_rate("eta_n", c.eta_n)?;
                check_rate("loc_weight", c.loc_weight)?;
                if !(0.0..1.0).contains(&c.beta) {
                    return Err(TrainError::Config(format!("beta must lie in [0, 1), got {}", c.beta)));
                }
                if c.phi == 0 {
                    return Err(TrainError::Config("phi must be positive".into()));
                }
                if c.queue_capacity < c.batch_size {
                    return Err(TrainError::Config(format!(
                        "queue capacity {} smaller than batch size {}",
                        c.queue_capacity, c.batch_size
                    )));
                }
                Ok(())
            }
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationMetrics {
    /// 1-based outer iteration.
    pub t: usize,
    pub loss_o: f64,
    /// `Σ γ_i A_i` as it entered the joint objective.
    pub adversarial_loss: f64,
    /// Batch accuracy of each nuisance head on the joint-step minibatch.
    pub nuisance_accuracy: Vec<f64>,
    pub backbone_forwards_this_iter: u64,
    pub backbone_forwards_total: u64,
    pub elapsed_seconds: f64,
}

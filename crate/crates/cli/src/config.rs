//! Flat JSON run configuration. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use andft_core::data_synth::{default_nuisances, DatasetSpec, NuisanceSpec};
use andft_core::eval::DEFAULT_IOU_THRESHOLD;
use andft_core::trainers::{
    AdversarialMode, AndftConfig, BaselineConfig, ModelSpec, NdftConfig, TrainerConfig,
    DEFAULT_ALPHA, DEFAULT_BATCH_SIZE, DEFAULT_BETA, DEFAULT_GAMMA, DEFAULT_LEARNING_RATE,
    DEFAULT_MAX_INNER_ITERS, DEFAULT_PHI, DEFAULT_PSI, DEFAULT_QUEUE_CAPACITY,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    Baseline,
    Ndft,
    #[default]
    Andft,
}

impl TrainerKind {
    pub const ALL: [TrainerKind; 3] = [TrainerKind::Baseline, TrainerKind::Ndft, TrainerKind::Andft];

    pub fn name(self) -> &'static str {
        match self {
            TrainerKind::Baseline => "baseline",
            TrainerKind::Ndft => "ndft",
            TrainerKind::Andft => "andft",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub trainer: TrainerKind,
    pub seed: u64,
    pub dataset_dir: PathBuf,
    pub output_dir: PathBuf,

    // dataset
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "C")]
    pub num_classes: usize,
    pub nuisances: Vec<NuisanceSpec>,
    #[serde(rename = "M_train")]
    pub m_train: usize,
    #[serde(rename = "M_test")]
    pub m_test: usize,
    pub data_seed: u64,
    pub noise_amplitude: f32,

    // model
    pub feature_dim: usize,
    pub backbone_hidden: Vec<usize>,

    // shared optimization
    /// One weight per nuisance; defaults to 0.01 each.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gammas: Option<Vec<f64>>,
    /// Outer iterations; defaults to `epochs * M_train / batch_size`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub eta_u: f64,
    pub eta_n: f64,
    pub loc_weight: f64,
    pub adversarial_mode: AdversarialMode,

    // NDFT
    pub alpha: f64,
    pub psi: usize,
    pub max_inner_iters: usize,

    // A-NDFT
    pub queue_capacity: usize,
    pub beta: f64,
    pub phi: usize,

    // evaluation
    pub eval_every: usize,
    pub iou_threshold: f64,
    pub probe_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DatasetSpec::default();
        Self {
            trainer: TrainerKind::default(),
            seed: 0,
            dataset_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("runs"),
            height: data.height,
            width: data.width,
            num_classes: data.num_classes,
            nuisances: default_nuisances(),
            m_train: data.m_train,
            m_test: data.m_test,
            data_seed: data.seed,
            noise_amplitude: data.noise_amplitude,
            feature_dim: 64,
            backbone_hidden: vec![128],
            gammas: None,
            iterations: None,
            epochs: 8,
            batch_size: DEFAULT_BATCH_SIZE,
            eta_u: DEFAULT_LEARNING_RATE,
            eta_n: DEFAULT_LEARNING_RATE,
            loc_weight: 1.0,
            adversarial_mode: AdversarialMode::default(),
            alpha: DEFAULT_ALPHA,
            psi: DEFAULT_PSI,
            max_inner_iters: DEFAULT_MAX_INNER_ITERS,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            beta: DEFAULT_BETA,
            phi: DEFAULT_PHI,
            eval_every: 100,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            probe_epochs: 3,
        }
    }
}

fn bad(key: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {reason}"))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            nuisances: self.nuisances.clone(),
            m_train: self.m_train,
            m_test: self.m_test,
            seed: self.data_seed,
            noise_amplitude: self.noise_amplitude,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            feature_dim: self.feature_dim,
            backbone_hidden: self.backbone_hidden.clone(),
            ..ModelSpec::for_dataset(&self.dataset_spec())
        }
    }

    pub fn gammas(&self) -> Vec<f64> {
        self.gammas
            .clone()
            .unwrap_or_else(|| vec![DEFAULT_GAMMA; self.nuisances.len()])
    }

    pub fn total_iterations(&self) -> usize {
        self.iterations
            .unwrap_or(self.epochs * self.m_train / self.batch_size.max(1))
    }

    pub fn trainer_config(&self, kind: TrainerKind) -> TrainerConfig {
        let t = self.total_iterations();
        match kind {
            TrainerKind::Baseline => TrainerConfig::Baseline(BaselineConfig {
                iterations: t,
                batch_size: self.batch_size,
                eta_u: self.eta_u,
                loc_weight: self.loc_weight,
            }),
            TrainerKind::Ndft => TrainerConfig::Ndft(NdftConfig {
                gammas: self.gammas(),
                iterations: t,
                alpha: self.alpha,
                psi: self.psi,
                eta_u: self.eta_u,
                eta_n: self.eta_n,
                batch_size: self.batch_size,
                max_inner_iters: self.max_inner_iters,
                adversarial_mode: self.adversarial_mode,
                loc_weight: self.loc_weight,
            }),
            TrainerKind::Andft => TrainerConfig::Andft(AndftConfig {
                gammas: self.gammas(),
                iterations: t,
                eta_u: self.eta_u,
                eta_n: self.eta_n,
                batch_size: self.batch_size,
                queue_capacity: self.queue_capacity,
                beta: self.beta,
                phi: self.phi,
                adversarial_mode: self.adversarial_mode,
                loc_weight: self.loc_weight,
            }),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.dataset_spec().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.feature_dim == 0 || self.backbone_hidden.contains(&0) {
            return Err(bad("feature_dim/backbone_hidden", "layer sizes must be positive"));
        }
        if let Some(g) = &self.gammas {
            if g.len() != self.nuisances.len() {
                return Err(bad("gammas", format!("{} entries for {} nuisances", g.len(), self.nuisances.len())));
            }
        }
        if self.batch_size == 0 || self.batch_size > self.m_train {
            return Err(bad("batch_size", "must be in 1..=M_train"));
        }
        if self.total_iterations() == 0 {
            return Err(bad("iterations", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(bad("eval_every", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(bad("iou_threshold", "must lie in [0, 1]"));
        }
        let k = self.nuisances.len();
        for kind in TrainerKind::ALL {
            self.trainer_config(kind)
                .validate(k)
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

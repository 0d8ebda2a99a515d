//! Model checkpoints: `header.json` (model layout plus names and shapes of
//! every parameter array, in file order) and `params.bin` (all parameters as
//! little-endian `f64`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn_core::{Network, NetworkSpec, ParamArray, ParameterSet};
use crate::trainers::{DetectionModel, ModelSpec, TrainState};

pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_FILE: &str = "header.json";
const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkHeader {
    pub role: String,
    pub spec: NetworkSpec,
    pub arrays: Vec<ArrayHeader>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelSpec,
    pub iteration: usize,
    pub networks: Vec<NetworkHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelSpec,
    pub iteration: usize,
    pub detector: DetectionModel,
    pub nuisance_heads: Vec<Network>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint(dir: &Path, state: &TrainState) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut nets: Vec<(String, &Network)> = vec![
        ("backbone".into(), &state.detector.backbone),
        ("det_head".into(), &state.detector.det_head),
    ];
    for (i, h) in state.nuisance_heads.iter().enumerate() {
        nets.push((format!("nuisance_{}", i + 1), h));
    }
    let mut bytes = Vec::new();
    let networks = nets
        .iter()
        .map(|(role, net)| {
            for v in net.params().iter_flat() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            NetworkHeader {
                role: role.clone(),
                spec: net.spec().clone(),
                arrays: net
                    .params()
                    .arrays()
                    .iter()
                    .map(|a| ArrayHeader { name: a.name.clone(), shape: a.shape.clone() })
                    .collect(),
            }
        })
        .collect();
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        model: state.model.clone(),
        iteration: state.t,
        networks,
    };
    let hpath = dir.join(HEADER_FILE);
    let json = serde_json::to_string_pretty(&header).map_err(|e| CheckpointError::Format(e.to_string()))?;
    fs::write(&hpath, json + "\n").map_err(io_err(&hpath))?;
    let ppath = dir.join(PARAMS_FILE);
    fs::write(&ppath, bytes).map_err(io_err(&ppath))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, CheckpointError> {
    let hpath = dir.join(HEADER_FILE);
    let text = fs::read_to_string(&hpath).map_err(io_err(&hpath))?;
    let header: CheckpointHeader =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Format(format!("{HEADER_FILE}: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {}", header.version)));
    }
    let ppath = dir.join(PARAMS_FILE);
    let bytes = fs::read(&ppath).map_err(io_err(&ppath))?;
    let needed: usize = header
        .networks
        .iter()
        .flat_map(|n| &n.arrays)
        .map(|a| a.shape.iter().product::<usize>())
        .sum();
    if bytes.len() != needed * 8 {
        return Err(CheckpointError::Format(format!(
            "{PARAMS_FILE} has {} bytes, header describes {}",
            bytes.len(),
            needed * 8
        )));
    }
    let mut values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut nets = Vec::with_capacity(header.networks.len());
    for nh in &header.networks {
        let arrays = nh
            .arrays
            .iter()
            .map(|a| ParamArray {
                name: a.name.clone(),
                shape: a.shape.clone(),
                data: values.by_ref().take(a.shape.iter().product()).collect(),
            })
            .collect();
        let params = ParameterSet::new(arrays).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let net = Network::from_params(nh.spec.clone(), params)
            .map_err(|e| CheckpointError::Format(format!("network '{}': {e}", nh.role)))?;
        nets.push((nh.role.clone(), net));
    }
    let mut take = |role: &str| -> Result<Network, CheckpointError> {
        let pos = nets
            .iter()
            .position(|(r, _)| r == role)
            .ok_or_else(|| CheckpointError::Format(format!("missing network '{role}'")))?;
        Ok(nets.remove(pos).1)
    };
    let backbone = take("backbone")?;
    let det_head = take("det_head")?;
    let nuisance_heads = (1..=header.model.num_nuisances())
        .map(|i| take(&format!("nuisance_{i}")))
        .collect::<Result<Vec<_>, _>>()?;
    if backbone.spec() != &header.model.backbone_spec() || det_head.spec() != &header.model.det_spec() {
        return Err(CheckpointError::Format("network layout disagrees with model spec".into()));
    }
    Ok(Checkpoint {
        iteration: header.iteration,
        detector: DetectionModel { backbone, det_head, num_classes: header.model.num_classes },
        model: header.model,
        nuisance_heads,
    })
}

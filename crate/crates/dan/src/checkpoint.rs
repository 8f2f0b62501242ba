//! Policy checkpoints: a tensor container plus a JSON sidecar next to it
//! (`model.danl` pairs with `model.json`).

use std::path::{Path, PathBuf};

use fjsp_autodiff::checkpoint::{self, CheckpointError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, Policy};

pub const FORMAT: &str = "DANL1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub format: String,
    pub model: ModelConfig,
    pub parameters: usize,
    /// Training provenance; free-form.
    pub metadata: serde_json::Value,
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error(transparent)]
    Tensors(#[from] CheckpointError),
    #[error("sidecar {path}: {source}")]
    Sidecar {
        path: PathBuf,
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("unsupported checkpoint format `{0}` (expected {FORMAT})")]
    Version(String),
    #[error("checkpoint does not match its model description: {0}")]
    Layout(String),
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_policy(path: &Path, policy: &Policy, metadata: serde_json::Value) -> Result<(), CheckpointError> {
    checkpoint::save(path, &policy.tensors())?;
    let sidecar = Sidecar {
        format: FORMAT.to_string(),
        model: policy.config.clone(),
        parameters: policy.num_parameters(),
        metadata,
    };
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(sidecar_path(path), text + "\n")?;
    Ok(())
}

pub fn load_sidecar(path: &Path) -> Result<Sidecar, LoadError> {
    let sp = sidecar_path(path);
    let err = |e: Box<dyn std::error::Error + Send + Sync>| LoadError::Sidecar {
        path: sp.clone(),
        source: e,
    };
    let text = std::fs::read_to_string(&sp).map_err(|e| err(e.into()))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| err(e.into()))?;
    if sidecar.format != FORMAT {
        return Err(LoadError::Version(sidecar.format));
    }
    Ok(sidecar)
}

pub fn load_policy(path: &Path) -> Result<(Policy, Sidecar), LoadError> {
    let sidecar = load_sidecar(path)?;
    let tensors = checkpoint::load(path)?;
    let policy = Policy::from_tensors(sidecar.model.clone(), tensors).map_err(LoadError::Layout)?;
    Ok((policy, sidecar))
}

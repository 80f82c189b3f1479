//! Model persistence. A checkpoint stores every parameter tensor plus the
//! standardization constants, with a TOML manifest describing the
//! architecture so [`load_model`] can rebuild the exact network.

use std::path::Path;

use serde::{Deserialize, Serialize};

use threetank_autodiff::{read_checkpoint, write_checkpoint, Tensor};

use crate::{build_model, ArchConfig, Model, ModelError, Result, Standardizer};

const MANIFEST_SCHEMA: u32 = 1;
const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub config: ArchConfig,
}

/// Write the model (parameters, normalization, architecture) to `path`.
pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let manifest = ModelManifest {
        schema_version: MANIFEST_SCHEMA,
        seed: model.seed,
        config: model.config.clone(),
    };
    let manifest = toml::to_string_pretty(&manifest)?;
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    for p in model.params().iter() {
        let name = p.name();
        if name.starts_with("norm.") {
            return Err(ModelError::CheckpointMismatch(format!(
                "parameter name '{name}' collides with the reserved norm.* entries"
            )));
        }
        entries.push((name, p.value()));
    }
    entries.push((NORM_MEAN.to_string(), Tensor::new(&[3], model.norm.mean.to_vec())?));
    entries.push((NORM_STD.to_string(), Tensor::new(&[3], model.norm.std.to_vec())?));
    write_checkpoint(path, &manifest, &entries)?;
    Ok(())
}

/// Rebuild a model from a checkpoint. Every stored entry must map onto a
/// parameter of the rebuilt network (or the norm constants), every
/// parameter must be present, and shapes must agree.
pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let ckpt = read_checkpoint(path)?;
    let manifest: ModelManifest = toml::from_str(&ckpt.manifest).map_err(|e| {
        ModelError::CheckpointMismatch(format!("{}: bad manifest: {e}", path.display()))
    })?;
    if manifest.schema_version != MANIFEST_SCHEMA {
        return Err(ModelError::CheckpointMismatch(format!(
            "unsupported manifest schema {}",
            manifest.schema_version
        )));
    }

    let mut mean: Option<[f64; 3]> = None;
    let mut std: Option<[f64; 3]> = None;
    let mut weights: Vec<(String, Tensor)> = Vec::new();
    for (name, tensor) in ckpt.entries {
        match name.as_str() {
            NORM_MEAN => mean = Some(three(&name, &tensor)?),
            NORM_STD => std = Some(three(&name, &tensor)?),
            _ => weights.push((name, tensor)),
        }
    }
    let norm = Standardizer {
        mean: mean.ok_or_else(|| missing(NORM_MEAN))?,
        std: std.ok_or_else(|| missing(NORM_STD))?,
    };

    let model = build_model(&manifest.config, norm, manifest.seed)?;
    let mut seen = 0usize;
    for (name, tensor) in &weights {
        let param = model.params().find(name).ok_or_else(|| {
            ModelError::CheckpointMismatch(format!("entry '{name}' has no matching parameter"))
        })?;
        if param.shape() != tensor.shape() {
            return Err(ModelError::CheckpointMismatch(format!(
                "entry '{name}' has shape {:?}, parameter expects {:?}",
                tensor.shape(),
                param.shape()
            )));
        }
        param.set_value(tensor.clone());
        seen += 1;
    }
    if seen != model.params().len() {
        let stored: Vec<&str> = weights.iter().map(|(n, _)| n.as_str()).collect();
        let missing: Vec<String> = model
            .params()
            .iter()
            .map(|p| p.name())
            .filter(|n| !stored.contains(&n.as_str()))
            .collect();
        return Err(ModelError::CheckpointMismatch(format!(
            "checkpoint is missing parameters: {}",
            missing.join(", ")
        )));
    }
    Ok(model)
}

fn three(name: &str, t: &Tensor) -> Result<[f64; 3]> {
    if t.shape() != [3] {
        return Err(ModelError::CheckpointMismatch(format!(
            "entry '{name}' must have shape [3], got {:?}",
            t.shape()
        )));
    }
    Ok([t.data()[0], t.data()[1], t.data()[2]])
}

fn missing(name: &str) -> ModelError {
    ModelError::CheckpointMismatch(format!("checkpoint lacks required entry '{name}'"))
}

//! Checkpoint directories: one binary tensor per parameter and a manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PoseModelParams};
use crate::tensor::{read_binary, write_binary};

pub const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Digest of the run configuration that produced the checkpoint.
    pub config_digest: String,
    pub model: ModelConfig,
    pub parameters: Vec<ManifestEntry>,
}

pub fn save(dir: &Path, params: &PoseModelParams, model: &ModelConfig, config_digest: &str) -> Result<Manifest> {
    params.check_against(model)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut parameters = Vec::new();
    for (name, tensor) in params.named_tensors() {
        let file = format!("{name}.spt");
        let bytes = write_binary(tensor);
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        parameters.push(ManifestEntry {
            name,
            file,
            shape: tensor.shape().to_vec(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config_digest: config_digest.to_string(),
        model: model.clone(),
        parameters,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint format {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Loads parameters, verifying digests and shapes against the manifest's
/// model configuration.
pub fn load(dir: &Path) -> Result<(Manifest, PoseModelParams)> {
    let manifest = read_manifest(dir)?;
    manifest.model.validate()?;
    let mut params = PoseModelParams::init(&manifest.model, 0)?;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    if names.len() != manifest.parameters.len() {
        return Err(Error::Incompatible(format!(
            "manifest lists {} tensors, its model configuration needs {}",
            manifest.parameters.len(),
            names.len()
        )));
    }
    for ((name, slot), entry) in names.iter().zip(params.tensors_mut()).zip(&manifest.parameters) {
        if *name != entry.name {
            return Err(Error::Incompatible(format!("expected tensor {name}, manifest has {}", entry.name)));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Format(format!("{}: digest mismatch", path.display())));
        }
        let tensor = read_binary(&bytes)?;
        if tensor.shape() != slot.shape() || tensor.shape() != entry.shape.as_slice() {
            return Err(Error::Incompatible(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
    }
    Ok((manifest, params))
}

/// Loads and additionally requires the stored model to equal `expected`.
pub fn load_for(dir: &Path, expected: &ModelConfig) -> Result<PoseModelParams> {
    let (manifest, params) = load(dir)?;
    if manifest.model != *expected {
        return Err(Error::Incompatible(format!(
            "{} was trained with a different model configuration",
            dir.display()
        )));
    }
    Ok(params)
}

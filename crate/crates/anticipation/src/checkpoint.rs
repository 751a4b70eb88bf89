//! Checkpoint directories: `manifest.json` plus one TNS1 file per parameter.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anticipation_core::model::{AnticipationModel, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tns;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "anticipation-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub model: ModelConfig,
    /// Last phase completed, if any.
    pub phase: Option<String>,
    pub params: Vec<ParamRecord>,
}

pub fn save(dir: &Path, model: &AnticipationModel<f32>, phase: Option<&str>) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut params = Vec::new();
    for e in model.params().entries() {
        let file = format!("{}.tns", e.name);
        tns::write_file(&dir.join(&file), &e.value)?;
        params.push(ParamRecord {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        model: model.config().clone(),
        phase: phase.map(str::to_string),
        params,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(Error::json(&path))?;
    fs::write(&path, text + "\n").map_err(Error::io(&path))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(Error::json(&path))?;
    if m.format != FORMAT {
        return Err(Error::Format {
            path,
            reason: format!("unsupported format {:?}", m.format),
        });
    }
    Ok(m)
}

/// Rebuilds the model and installs every stored tensor. Missing, extra,
/// duplicated or misshapen parameters are errors.
pub fn load(dir: &Path) -> Result<(AnticipationModel<f32>, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let mut model = AnticipationModel::new(manifest.model.clone())?;
    let expected: BTreeSet<String> = model.param_names().into_iter().collect();
    let mut seen = BTreeSet::new();
    for rec in &manifest.params {
        if !expected.contains(&rec.name) || !seen.insert(rec.name.clone()) {
            return Err(Error::Format {
                path: dir.join(MANIFEST),
                reason: format!("unexpected or repeated parameter {}", rec.name),
            });
        }
        let path = dir.join(&rec.file);
        let t = tns::read_file(&path)?;
        if t.shape() != rec.shape.as_slice() {
            return Err(Error::Format {
                path,
                reason: format!("shape {:?} disagrees with manifest {:?}", t.shape(), rec.shape),
            });
        }
        model.params_mut().set(&rec.name, t)?;
    }
    if let Some(missing) = expected.difference(&seen).next() {
        return Err(Error::Format {
            path: dir.join(MANIFEST),
            reason: format!("parameter {missing} missing"),
        });
    }
    Ok((model, manifest))
}

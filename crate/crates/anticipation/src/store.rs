//! Dataset directories: `manifest.json` and `<split>/<id>.<modality>.tns`,
//! each file holding all stored frames of a clip as one `[frames, ..]` tensor.

use std::fs;
use std::path::Path;

use anticipation_core::datagen::{Dataset, DatasetManifest, Sample, Split, STORED_MODALITIES};
use anticipation_core::evalkit::EvalLabels;
use anticipation_core::model::ModalityKind;
use anticipation_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tns;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    pub verb: usize,
    pub noun: usize,
    pub action: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestFile {
    #[serde(flatten)]
    manifest: DatasetManifest,
    samples: Vec<SampleRecord>,
}

pub fn sample_path(root: &Path, split: Split, id: &str, m: ModalityKind) -> std::path::PathBuf {
    root.join(split.name()).join(format!("{id}.{m}.tns"))
}

fn stack(frames: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let mut shape = vec![frames.len()];
    shape.extend_from_slice(frames[0].shape());
    let data = frames.iter().flat_map(|f| f.data().iter().copied()).collect();
    Ok(Tensor::new(&shape, data)?)
}

fn unstack(t: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    let shape = t.shape();
    if shape.is_empty() || shape[0] == 0 {
        return Err(anticipation_core::Error::Data("clip tensor has no frame axis".into()).into());
    }
    let per = t.numel() / shape[0];
    t.data()
        .chunks(per)
        .map(|c| Ok(Tensor::new(&shape[1..], c.to_vec())?))
        .collect()
}

pub fn save(root: &Path, data: &Dataset) -> Result<()> {
    for split in Split::ALL {
        let dir = root.join(split.name());
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    }
    let mut records = Vec::with_capacity(data.samples().len());
    for s in data.samples() {
        for m in STORED_MODALITIES {
            tns::write_file(&sample_path(root, s.split, &s.id, m), &stack(s.stored_frames(m)?)?)?;
        }
        records.push(SampleRecord {
            id: s.id.clone(),
            split: s.split,
            verb: s.verb,
            noun: s.noun,
            action: s.action,
        });
    }
    let file = ManifestFile {
        manifest: data.manifest.clone(),
        samples: records,
    };
    let path = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(&file).map_err(Error::json(&path))?;
    fs::write(&path, text + "\n").map_err(Error::io(&path))
}

fn read_manifest_file(root: &Path) -> Result<ManifestFile> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    serde_json::from_str(&text).map_err(Error::json(&path))
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    Ok(read_manifest_file(root)?.manifest)
}

/// Labels of one split in manifest order, without touching frame files.
pub fn labels(root: &Path, split: Split) -> Result<EvalLabels> {
    let file = read_manifest_file(root)?;
    let mut l = EvalLabels {
        ids: Vec::new(),
        verb: Vec::new(),
        noun: Vec::new(),
        action: Vec::new(),
    };
    for r in file.samples.into_iter().filter(|r| r.split == split) {
        l.ids.push(r.id);
        l.verb.push(r.verb);
        l.noun.push(r.noun);
        l.action.push(r.action);
    }
    Ok(l)
}

pub fn load(root: &Path) -> Result<Dataset> {
    let file = read_manifest_file(root)?;
    let mut samples = Vec::with_capacity(file.samples.len());
    for r in file.samples {
        let mut streams: [Vec<Tensor<f32>>; 4] = Default::default();
        for (slot, m) in streams.iter_mut().zip(STORED_MODALITIES) {
            *slot = unstack(&tns::read_file(&sample_path(root, r.split, &r.id, m))?)?;
        }
        samples.push(Sample::new(r.id, r.split, [r.verb, r.noun, r.action], streams)?);
    }
    Ok(Dataset::new(file.manifest, samples)?)
}

//! Model checkpoints on disk: one float64 `EMB1` tensor per weight matrix and
//! bias vector, plus a JSON manifest with the layer sizes, step and schedule.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::{read_emb1_any, write_atomic, write_emb1_f64};
use crate::error::{Error, Result};
use crate::math::DenseMatrix;
use crate::nn::{AffineLayer, CheckpointRecord, MlpModel, TrainSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub layer_sizes: Vec<usize>,
    pub step: u64,
    pub schedule: TrainSchedule,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub train_loss: f64,
    /// Per affine layer: weights file, then bias file.
    pub tensors: Vec<(PathBuf, PathBuf)>,
}

/// Writes `step{N}.json` and its tensors into `dir`; returns the manifest path.
pub fn save_checkpoint(dir: impl AsRef<Path>, record: &CheckpointRecord, schedule: &TrainSchedule) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for (i, layer) in record.params.layers().iter().enumerate() {
        let w = PathBuf::from(format!("step{}_layer{i}_weights.emb1", record.step));
        let b = PathBuf::from(format!("step{}_layer{i}_bias.emb1", record.step));
        write_emb1_f64(dir.join(&w), &layer.weights)?;
        write_emb1_f64(
            dir.join(&b),
            &DenseMatrix::new(1, layer.bias.len(), layer.bias.clone())?,
        )?;
        tensors.push((w, b));
    }
    let manifest = CheckpointManifest {
        layer_sizes: record.params.layer_sizes().to_vec(),
        step: record.step,
        schedule: schedule.clone(),
        train_accuracy: record.train_accuracy,
        test_accuracy: record.test_accuracy,
        train_loss: record.train_loss,
        tensors,
    };
    let path = dir.join(format!("step{}.json", record.step));
    let bytes = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&path, |w| std::io::Write::write_all(w, &bytes))?;
    Ok(path)
}

pub fn load_checkpoint(manifest_path: impl AsRef<Path>) -> Result<(CheckpointRecord, TrainSchedule)> {
    let path = manifest_path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let m: CheckpointManifest = serde_json::from_slice(&bytes)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut layers = Vec::with_capacity(m.tensors.len());
    for (w, b) in &m.tensors {
        let weights = read_emb1_any(dir.join(w))?;
        let bias = read_emb1_any(dir.join(b))?.into_data();
        layers.push(AffineLayer { weights, bias });
    }
    let params = MlpModel::from_layers(layers)?;
    if params.layer_sizes() != m.layer_sizes.as_slice() {
        return Err(Error::format(path, 0, "tensor shapes disagree with layer_sizes"));
    }
    Ok((
        CheckpointRecord {
            step: m.step,
            params,
            train_accuracy: m.train_accuracy,
            test_accuracy: m.test_accuracy,
            train_loss: m.train_loss,
        },
        m.schedule,
    ))
}

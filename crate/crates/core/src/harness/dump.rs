//! Activation dumps: per-layer tensors produced outside the engine (or by
//! [`export_dump`]) and described by a JSON manifest.
//!
//! Paths inside a manifest are relative to the manifest's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::{self, Dtype};
use crate::error::{Error, Result};
use crate::math::DenseMatrix;
use crate::metrics::Split;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpLayer {
    pub name: String,
    pub tensor_file: PathBuf,
    pub checkpoint_step: u64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationDumpManifest {
    pub layers: Vec<DumpLayer>,
    pub labels: BTreeMap<Split, PathBuf>,
    pub num_classes: usize,
    #[serde(default)]
    pub producer: serde_json::Value,
}

impl ActivationDumpManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes =
            std::fs::read(path).map_err(|_| Error::format(path, 0, "manifest file is missing or unreadable"))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.column() as u64, format!("manifest: {e}")))
    }

    /// Checkpoint steps present, ascending.
    pub fn steps(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.layers.iter().map(|l| l.checkpoint_step).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Layer names in first-appearance order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for l in &self.layers {
            if !names.contains(&l.name) {
                names.push(l.name.clone());
            }
        }
        names
    }

    pub fn find(&self, name: &str, step: u64, split: Split) -> Option<&DumpLayer> {
        self.layers
            .iter()
            .find(|l| l.name == name && l.checkpoint_step == step && l.split == split)
    }
}

/// Outcome of checking one file named by a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct FileVerdict {
    pub file: PathBuf,
    pub detail: std::result::Result<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DumpReport {
    pub manifest: PathBuf,
    pub verdicts: Vec<FileVerdict>,
    /// Problems spanning files (count mismatches, duplicates, missing splits).
    pub problems: Vec<String>,
}

impl DumpReport {
    pub fn is_ok(&self) -> bool {
        self.problems.is_empty() && self.verdicts.iter().all(|v| v.detail.is_ok())
    }
}

fn resolve(manifest_path: &Path, file: &Path) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).join(file)
}

fn inspect_activation(path: &Path) -> Result<container::Emb1Header> {
    if !path.exists() {
        return Err(Error::format(path, 0, "tensor file is missing"));
    }
    let header = container::inspect_emb1(path)?;
    if header.dtype != Dtype::F32 {
        return Err(Error::UnsupportedDtype {
            file: path.to_path_buf(),
            code: header.dtype as u8,
        });
    }
    Ok(header)
}

/// Checks headers, lengths and cross-file counts without reading tensor payloads.
///
/// Fails only when the manifest itself cannot be read; file-level problems
/// are reported per file.
pub fn validate_dump(manifest_path: impl AsRef<Path>) -> Result<DumpReport> {
    let manifest_path = manifest_path.as_ref();
    let m = ActivationDumpManifest::read(manifest_path)?;
    let mut verdicts = Vec::new();
    let mut problems = Vec::new();
    if m.num_classes == 0 {
        problems.push("num_classes must be at least 1".into());
    }

    let mut label_counts: BTreeMap<Split, u64> = BTreeMap::new();
    for (split, file) in &m.labels {
        let path = resolve(manifest_path, file);
        let detail = if !path.exists() {
            Err(Error::format(&path, 0, "label file is missing").to_string())
        } else {
            match container::read_lbl1(&path) {
                Ok(labels) => match labels.iter().position(|l| *l >= m.num_classes) {
                    Some(i) => Err(Error::format(
                        &path,
                        container::LBL1_HEADER_LEN + 4 * i as u64,
                        format!("label {} out of range for {} classes", labels[i], m.num_classes),
                    )
                    .to_string()),
                    None => {
                        label_counts.insert(*split, labels.len() as u64);
                        Ok(format!("{} labels ({split})", labels.len()))
                    }
                },
                Err(e) => Err(e.to_string()),
            }
        };
        verdicts.push(FileVerdict { file: path, detail });
    }

    let mut seen = std::collections::BTreeSet::new();
    let mut widths: BTreeMap<&str, u64> = BTreeMap::new();
    for layer in &m.layers {
        let path = resolve(manifest_path, &layer.tensor_file);
        if !seen.insert((&layer.name, layer.checkpoint_step, layer.split)) {
            problems.push(format!(
                "layer {} step {} split {} listed twice",
                layer.name, layer.checkpoint_step, layer.split
            ));
        }
        let detail = match inspect_activation(&path) {
            Ok(h) => {
                match label_counts.get(&layer.split) {
                    Some(&n) if n != h.rows => problems.push(format!(
                        "{}: {} rows but {} {} labels",
                        path.display(),
                        h.rows,
                        n,
                        layer.split
                    )),
                    None if !m.labels.contains_key(&layer.split) => problems.push(format!(
                        "no label file for split {} (layer {})",
                        layer.split, layer.name
                    )),
                    _ => {}
                }
                if let Some(&w) = widths.get(layer.name.as_str()) {
                    if w != h.cols {
                        problems.push(format!(
                            "layer {} has {} features here but {} elsewhere",
                            layer.name, h.cols, w
                        ));
                    }
                }
                widths.insert(&layer.name, h.cols);
                Ok(format!(
                    "{} x {} float32 ({} step {} {})",
                    h.rows, h.cols, layer.name, layer.checkpoint_step, layer.split
                ))
            }
            Err(e) => Err(e.to_string()),
        };
        verdicts.push(FileVerdict { file: path, detail });
    }
    Ok(DumpReport {
        manifest: manifest_path.to_path_buf(),
        verdicts,
        problems,
    })
}

/// A fully loaded and cross-checked dump.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestedDump {
    pub manifest: ActivationDumpManifest,
    /// Same order as `manifest.layers`.
    pub tensors: Vec<DenseMatrix>,
    pub labels: BTreeMap<Split, Vec<usize>>,
}

impl IngestedDump {
    pub fn tensor(&self, name: &str, step: u64, split: Split) -> Option<&DenseMatrix> {
        self.manifest
            .layers
            .iter()
            .position(|l| l.name == name && l.checkpoint_step == step && l.split == split)
            .map(|i| &self.tensors[i])
    }

    /// The tensor, or a format error naming the missing layer.
    pub fn require(&self, manifest_path: &Path, name: &str, step: u64, split: Split) -> Result<&DenseMatrix> {
        self.tensor(name, step, split).ok_or_else(|| {
            Error::format(
                manifest_path,
                0,
                format!("manifest has no tensor for layer `{name}` at step {step} ({split})"),
            )
        })
    }
}

/// Loads every tensor and label file, failing on the first inconsistency.
pub fn ingest_dump(manifest_path: impl AsRef<Path>) -> Result<IngestedDump> {
    let manifest_path = manifest_path.as_ref();
    let manifest = ActivationDumpManifest::read(manifest_path)?;
    let mut labels = BTreeMap::new();
    for (split, file) in &manifest.labels {
        let path = resolve(manifest_path, file);
        if !path.exists() {
            return Err(Error::format(&path, 0, "label file is missing"));
        }
        let l = container::read_lbl1(&path)?;
        if let Some(i) = l.iter().position(|v| *v >= manifest.num_classes) {
            return Err(Error::format(
                &path,
                container::LBL1_HEADER_LEN + 4 * i as u64,
                format!("label {} out of range for {} classes", l[i], manifest.num_classes),
            ));
        }
        labels.insert(*split, l);
    }
    let mut tensors = Vec::with_capacity(manifest.layers.len());
    for layer in &manifest.layers {
        let path = resolve(manifest_path, &layer.tensor_file);
        inspect_activation(&path)?;
        let t = container::read_emb1(&path)?;
        let n = labels.get(&layer.split).map(Vec::len).ok_or_else(|| {
            Error::format(
                manifest_path,
                0,
                format!("no label file for split {} (layer {})", layer.split, layer.name),
            )
        })?;
        if t.rows() != n {
            return Err(Error::format(
                &path,
                6,
                format!("{} rows but {} {} labels", t.rows(), n, layer.split),
            ));
        }
        tensors.push(t);
    }
    Ok(IngestedDump {
        manifest,
        tensors,
        labels,
    })
}

/// One tensor to export.
pub struct ExportLayer<'a> {
    pub name: &'a str,
    pub step: u64,
    pub split: Split,
    pub activations: &'a DenseMatrix,
}

/// Writes `{layer}_{step}_{split}.emb1` per tensor, `labels_{split}.lbl1`
/// per split, and `manifest.json` last. Returns the manifest path.
pub fn export_dump(
    dir: impl AsRef<Path>,
    layers: &[ExportLayer<'_>],
    labels: &BTreeMap<Split, Vec<usize>>,
    num_classes: usize,
    producer: serde_json::Value,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(layers.len());
    for l in layers {
        if l.name.is_empty() || l.name.contains(['/', '\\']) {
            return Err(Error::invalid(format!("layer name `{}` is not file-name safe", l.name)));
        }
        let file = PathBuf::from(format!("{}_{}_{}.emb1", l.name, l.step, l.split));
        container::write_emb1(dir.join(&file), l.activations)?;
        entries.push(DumpLayer {
            name: l.name.to_string(),
            tensor_file: file,
            checkpoint_step: l.step,
            split: l.split,
        });
    }
    let mut label_files = BTreeMap::new();
    for (split, l) in labels {
        let file = PathBuf::from(format!("labels_{split}.lbl1"));
        container::write_lbl1(dir.join(&file), l)?;
        label_files.insert(*split, file);
    }
    let manifest = ActivationDumpManifest {
        layers: entries,
        labels: label_files,
        num_classes,
        producer,
    };
    let path = dir.join("manifest.json");
    let bytes = serde_json::to_vec_pretty(&manifest)?;
    container::write_atomic(&path, |w| std::io::Write::write_all(w, &bytes))?;
    Ok(path)
}

//! Experiment configuration: a TOML document with `key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_idx, synth_blobs, train_test_split, LabeledDataset};
use crate::error::{Error, Result};
use crate::metrics::DivergenceParams;
use crate::nn::TrainSchedule;
use crate::probes::ProbeSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    StepSweep,
    LayerSweep,
    RandomLabels,
    Overfit,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::StepSweep => "step_sweep",
            Protocol::LayerSweep => "layer_sweep",
            Protocol::RandomLabels => "random_labels",
            Protocol::Overfit => "overfit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Blobs {
        num_classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub train_n: usize,
    pub test_n: usize,
    #[serde(default)]
    pub split_seed: u64,
}

impl DatasetSpec {
    /// Loads or synthesizes the pool and splits it into disjoint train/test sets.
    pub fn materialize(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let pool = match &self.source {
            DataSource::Blobs {
                num_classes,
                per_class,
                dim,
                spread,
                seed,
            } => synth_blobs(*num_classes, *per_class, *dim, *spread, *seed)?,
            DataSource::Idx { images, labels } => load_idx(images, labels)?,
        };
        train_test_split(&pool, self.train_n, self.test_n, self.split_seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Natively trained MLP; input and output sizes come from the dataset.
    Mlp {
        hidden: Vec<usize>,
        #[serde(default)]
        init_seed: u64,
    },
    /// Activations produced elsewhere and described by a dump manifest.
    Dump {
        manifest: PathBuf,
        /// Layer probed in step sweeps; defaults to the last layer before `logits`.
        #[serde(default)]
        embedding_layer: Option<String>,
    },
}

#[derive(Default, Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelSpec {
    /// Resample train labels uniformly (test labels are never touched).
    pub randomize: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverfitSpec {
    /// Train samples kept from the train split.
    pub subset_n: usize,
    #[serde(default = "default_true")]
    pub stratified: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct LayerSweepSpec {
    /// Checkpoint analysed; defaults to the final one.
    pub step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub protocol: Protocol,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub probes: ProbeSettings,
    #[serde(default)]
    pub labels: LabelSpec,
    #[serde(default)]
    pub overfit: Option<OverfitSpec>,
    #[serde(default)]
    pub layer_sweep: LayerSweepSpec,
    #[serde(default)]
    pub detector: DivergenceParams,
    /// Worker threads for probe fitting and evaluation; 0 means all cores.
    #[serde(default)]
    pub workers: usize,
    /// Relative paths resolve against the output root.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn config_error(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Applies `path=value` overrides to the parsed document before decoding.
    ///
    /// Values parse as TOML (`0.1`, `true`, `[64]`, `"x"`); anything that does
    /// not parse is taken as a bare string.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| config_error("<document>", e.to_string()))?;
        for ov in overrides {
            apply_override(&mut doc, ov)?;
        }
        let cfg: Self = serde_path_to_error::deserialize(toml::Value::Table(doc)).map_err(|e| {
            let path = e.path().to_string();
            config_error(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| config_error("<document>", e.to_string()))
    }

    /// Cross-field checks that the schema alone cannot express.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(config_error("name", "must be a nonempty file-name-safe identifier"));
        }
        if self.dataset.train_n == 0 || self.dataset.test_n == 0 {
            return Err(config_error("dataset", "train_n and test_n must be positive"));
        }
        if self.probes.kinds.is_empty() {
            return Err(config_error("probes.kinds", "at least one probe kind is required"));
        }
        if self.probes.k == 0 {
            return Err(config_error("probes.k", "must be at least 1"));
        }
        self.detector.validate()?;
        let native = matches!(self.model, ModelSpec::Mlp { .. });
        match self.protocol {
            Protocol::RandomLabels | Protocol::Overfit if !native => {
                return Err(config_error(
                    "model.kind",
                    format!("protocol {} needs a native mlp model", self.protocol.as_str()),
                ));
            }
            Protocol::Overfit => {
                let Some(o) = self.overfit else {
                    return Err(config_error(
                        "overfit",
                        "the overfit protocol needs an [overfit] section",
                    ));
                };
                if o.subset_n == 0 || o.subset_n > self.dataset.train_n {
                    return Err(config_error(
                        "overfit.subset_n",
                        format!("must be in 1..={}", self.dataset.train_n),
                    ));
                }
            }
            _ => {}
        }
        if let ModelSpec::Mlp { hidden, .. } = &self.model {
            if hidden.contains(&0) {
                return Err(config_error("model.hidden", "layer sizes must be positive"));
            }
            let n_train = match (self.protocol, self.overfit) {
                (Protocol::Overfit, Some(o)) => o.subset_n,
                _ => self.dataset.train_n,
            };
            if let Some((field, message)) = self.schedule.problem(n_train) {
                return Err(config_error(&format!("schedule.{field}"), message));
            }
        }
        Ok(())
    }
}

fn apply_override(doc: &mut toml::Table, ov: &str) -> Result<()> {
    let (path, raw) = ov
        .split_once('=')
        .ok_or_else(|| config_error(ov, "override must look like key.path=value"))?;
    let path = path.trim();
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_error(path, "empty key in override path"));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut table = doc;
    for key in &keys[..keys.len() - 1] {
        let entry = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_error(path, format!("`{key}` is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Built-in configurations, by name.
pub const PRESETS: &[(&str, &str)] = &[
    ("blobs_step_sweep", include_str!("../../presets/blobs_step_sweep.toml")),
    (
        "blobs_layer_sweep",
        include_str!("../../presets/blobs_layer_sweep.toml"),
    ),
    ("mnist_step_sweep", include_str!("../../presets/mnist_step_sweep.toml")),
    (
        "mnist_layer_sweep",
        include_str!("../../presets/mnist_layer_sweep.toml"),
    ),
    (
        "mnist_random_layer_sweep",
        include_str!("../../presets/mnist_random_layer_sweep.toml"),
    ),
    (
        "mnist_random_labels",
        include_str!("../../presets/mnist_random_labels.toml"),
    ),
    ("mnist_overfit", include_str!("../../presets/mnist_overfit.toml")),
    (
        "mnist_overfit_control",
        include_str!("../../presets/mnist_overfit_control.toml"),
    ),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Reads a config file, or a preset when `source` names one and no such file exists.
pub fn load_config(source: impl AsRef<Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let source = source.as_ref();
    let text = if source.exists() {
        std::fs::read_to_string(source).map_err(|e| Error::io(source, e))?
    } else if let Some(text) = source.to_str().and_then(preset) {
        text.to_string()
    } else {
        return Err(config_error(
            "--config",
            format!("`{}` is neither a readable file nor a preset name", source.display()),
        ));
    };
    ExperimentConfig::from_toml_with_overrides(&text, overrides)
}

/// The complete default schema, as TOML.
pub fn defaults_toml() -> String {
    #[derive(Serialize)]
    struct Defaults {
        schedule: TrainSchedule,
        probes: ProbeSettings,
        labels: LabelSpec,
        detector: DivergenceParams,
        workers: usize,
    }
    toml::to_string_pretty(&Defaults {
        schedule: TrainSchedule::default(),
        probes: ProbeSettings::default(),
        labels: LabelSpec::default(),
        detector: DivergenceParams::default(),
        workers: 0,
    })
    .expect("defaults serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_parses() {
        for (name, text) in PRESETS {
            let cfg = ExperimentConfig::from_toml_str(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(&cfg.name, name);
        }
    }

    #[test]
    fn overrides_apply_with_typed_values() {
        let cfg = ExperimentConfig::from_toml_with_overrides(
            preset("blobs_step_sweep").unwrap(),
            &[
                "schedule.total_steps=0".into(),
                "probes.k=5".into(),
                "probes.kinds=[\"knn\"]".into(),
                "name=other".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.schedule.total_steps, 0);
        assert_eq!(cfg.probes.k, 5);
        assert_eq!(cfg.probes.kinds, vec![crate::probes::ProbeKind::Knn]);
        assert_eq!(cfg.name, "other");
    }

    #[test]
    fn unknown_protocol_names_the_field() {
        let err =
            ExperimentConfig::from_toml_with_overrides(preset("blobs_step_sweep").unwrap(), &["protocol=bogus".into()])
                .unwrap_err();
        match err {
            Error::Config { field, message } => {
                assert_eq!(field, "protocol");
                assert!(message.contains("bogus"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nested_field_errors_carry_the_path() {
        let err = ExperimentConfig::from_toml_with_overrides(
            preset("blobs_step_sweep").unwrap(),
            &["schedule.batch_size=\"many\"".into()],
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::Config { ref field, .. } if field == "schedule.batch_size"),
            "{err:?}"
        );
        let err = ExperimentConfig::from_toml_with_overrides(
            preset("blobs_step_sweep").unwrap(),
            &["schedule.typo=1".into()],
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::Config { ref field, .. } if field.starts_with("schedule")),
            "{err:?}"
        );
    }

    #[test]
    fn overfit_requires_its_section_and_a_native_model() {
        let text = preset("mnist_overfit").unwrap();
        let mut doc: toml::Table = text.parse().unwrap();
        doc.remove("overfit");
        let err = ExperimentConfig::from_toml_str(&toml::to_string(&doc).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "overfit"));
        let err = ExperimentConfig::from_toml_with_overrides(
            text,
            &["model={ kind = \"dump\", manifest = \"m.json\" }".into()],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "model.kind"));
    }

    #[test]
    fn config_roundtrips_through_toml() {
        for (_, text) in PRESETS {
            let cfg = ExperimentConfig::from_toml_str(text).unwrap();
            let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
            assert_eq!(cfg, again);
        }
    }

    #[test]
    fn defaults_parse_back() {
        let text = defaults_toml();
        assert!(text.contains("total_steps = 10000"));
        assert!(text.contains("k = 30"));
    }
}

//! Experiment orchestration: configs, protocols, dumps and reports.

pub mod config;
pub mod dump;
pub mod protocols;
pub mod report;

use std::path::{Path, PathBuf};

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::metrics::MetricSeries;

pub use config::{load_config, ExperimentConfig, Protocol};
pub use dump::{export_dump, ingest_dump, validate_dump, ActivationDumpManifest};
pub use protocols::{
    run_layer_sweep, run_native, run_overfit_experiment, run_protocol, run_random_label_experiment, run_step_sweep,
};

/// Files written by [`write_run_outputs`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutputs {
    pub series_csv: PathBuf,
    pub series_json: PathBuf,
    pub config: PathBuf,
    pub detectors: Option<PathBuf>,
    pub report: Vec<PathBuf>,
}

/// Writes the series (CSV and JSON), the resolved config, the detector
/// outcome and the report files under `dir`.
pub fn write_run_outputs(cfg: &ExperimentConfig, series: &MetricSeries, dir: impl AsRef<Path>) -> Result<RunOutputs> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let series_csv = dir.join("series.csv");
    let series_json = dir.join("series.json");
    series.write_csv(&series_csv)?;
    series.write_json(&series_json)?;
    let config = dir.join("config.toml");
    let text = cfg.to_toml_string()?;
    write_atomic(&config, |w| std::io::Write::write_all(w, text.as_bytes()))?;
    let detectors = match &series.metadata.detectors {
        Some(d) => {
            let path = dir.join("detectors.json");
            let mut bytes = serde_json::to_vec_pretty(d)?;
            bytes.push(b'\n');
            write_atomic(&path, |w| std::io::Write::write_all(w, &bytes))?;
            Some(path)
        }
        None => None,
    };
    let report = if series.rows.is_empty() {
        Vec::new()
    } else {
        report::write_report(std::slice::from_ref(series), dir.join("report"))?
    };
    Ok(RunOutputs {
        series_csv,
        series_json,
        config,
        detectors,
        report,
    })
}

/// Runs the configured protocol and writes its outputs under `dir`.
///
/// A training failure still writes the partial series, then returns the error.
pub fn run_experiment(cfg: &ExperimentConfig, dir: impl AsRef<Path>) -> Result<(MetricSeries, RunOutputs)> {
    let series = run_protocol(cfg)?;
    let outputs = write_run_outputs(cfg, &series, dir)?;
    if let Some(f) = &series.metadata.training_failure {
        return Err(Error::TrainingFailure {
            step: f.step,
            loss: f.loss.unwrap_or(f64::NAN),
        });
    }
    Ok((series, outputs))
}

//! The four experiment protocols over native MLPs or activation dumps.

use std::collections::BTreeSet;

use rayon::prelude::*;

use super::config::{ExperimentConfig, ModelSpec, Protocol};
use super::dump::{ingest_dump, IngestedDump};
use crate::data::{randomize_labels, subsample, LabeledDataset};
use crate::error::{Error, Result};
use crate::math::{softmax_unchecked, DenseMatrix, ProbabilityDistribution};
use crate::metrics::{
    decision_identifiers, detect_divergence, detect_memorization, evaluate, DetectorOutcome, FailureNote, MetricRow,
    MetricSeries, SeriesMetadata, Split,
};
use crate::nn::{init_mlp, tap_names, train_until_failure, CheckpointRecord, MlpModel};
use crate::probes::{ProbeKind, ProbeSettings};

pub fn run_step_sweep(cfg: &ExperimentConfig) -> Result<MetricSeries> {
    run_as(cfg, Protocol::StepSweep)
}

pub fn run_layer_sweep(cfg: &ExperimentConfig) -> Result<MetricSeries> {
    run_as(cfg, Protocol::LayerSweep)
}

pub fn run_random_label_experiment(cfg: &ExperimentConfig) -> Result<MetricSeries> {
    run_as(cfg, Protocol::RandomLabels)
}

pub fn run_overfit_experiment(cfg: &ExperimentConfig) -> Result<MetricSeries> {
    run_as(cfg, Protocol::Overfit)
}

/// Runs the protocol named in the config.
pub fn run_protocol(cfg: &ExperimentConfig) -> Result<MetricSeries> {
    run_as(cfg, cfg.protocol)
}

fn run_as(cfg: &ExperimentConfig, protocol: Protocol) -> Result<MetricSeries> {
    match &cfg.model {
        ModelSpec::Mlp { .. } => {
            let (train, test) = cfg.dataset.materialize()?;
            run_native(cfg, protocol, train, test)
        }
        ModelSpec::Dump { .. } => run_dump(cfg, protocol),
    }
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start {workers} workers: {e}")))
}

fn base_metadata(cfg: &ExperimentConfig, protocol: Protocol, dataset: &str) -> Result<SeriesMetadata> {
    Ok(SeriesMetadata {
        run_id: cfg.name.clone(),
        protocol: protocol.as_str().to_string(),
        engine_version: env!("CARGO_PKG_VERSION").to_string(),
        dataset: dataset.to_string(),
        config: serde_json::to_value(cfg)?,
        decisions: decision_identifiers(),
        detectors: None,
        training_failure: None,
        notes: Vec::new(),
    })
}

/// Runs `protocol` on already materialized splits, applying its label and subset rules.
///
/// A training divergence does not fail the call: the checkpoints taken
/// before it are evaluated and the failure is recorded in the metadata.
pub fn run_native(
    cfg: &ExperimentConfig,
    protocol: Protocol,
    train: LabeledDataset,
    test: LabeledDataset,
) -> Result<MetricSeries> {
    let ModelSpec::Mlp { hidden, init_seed } = &cfg.model else {
        return Err(Error::invalid("run_native needs an mlp model spec"));
    };
    if train.num_classes != test.num_classes || train.num_features() != test.num_features() {
        return Err(Error::invalid("train and test splits disagree on classes or features"));
    }
    let mut meta = base_metadata(cfg, protocol, &train.name)?;
    let mut schedule = cfg.schedule.clone();
    let mut train = train;
    if protocol == Protocol::Overfit {
        let o = cfg
            .overfit
            .ok_or_else(|| Error::invalid("overfit protocol needs an overfit section"))?;
        if schedule.weight_decay != 0.0 {
            meta.notes
                .push(format!("weight_decay {} forced to 0", schedule.weight_decay));
            schedule.weight_decay = 0.0;
        }
        train = subsample(&train, o.subset_n, o.seed, o.stratified)?;
    }
    if protocol == Protocol::RandomLabels || cfg.labels.randomize {
        train = randomize_labels(&train, cfg.labels.seed);
    }

    let sizes: Vec<usize> = std::iter::once(train.num_features())
        .chain(hidden.iter().copied())
        .chain(std::iter::once(train.num_classes))
        .collect();
    let model = init_mlp(&sizes, *init_seed)?;
    let run = train_until_failure(&model, &train, &test, &schedule)?;
    if let Some(d) = run.failure {
        meta.training_failure = Some(FailureNote {
            step: d.step,
            loss: d.loss.is_finite().then_some(d.loss),
            message: Error::from(d).to_string(),
        });
    }

    let probes = effective_probes(&cfg.probes, &train, &mut meta.notes);
    let pool = thread_pool(cfg.workers)?;
    let names = tap_names(hidden.len());
    let embedding = names.len() - 2;

    match protocol {
        Protocol::LayerSweep => {
            let record = pick_checkpoint(&run.checkpoints, cfg.layer_sweep.step)?;
            let taps: Vec<usize> = (0..names.len()).collect();
            let (rows, notes) = pool.install(|| evaluate_checkpoint(record, &train, &test, &taps, &names, &probes))?;
            meta.notes.extend(notes);
            Ok(MetricSeries { metadata: meta, rows })
        }
        _ => {
            let results: Vec<(Vec<MetricRow>, Vec<String>)> = pool.install(|| {
                run.checkpoints
                    .par_iter()
                    .map(|c| evaluate_checkpoint(c, &train, &test, &[embedding], &names, &probes))
                    .collect::<Result<_>>()
            })?;
            let mut rows = Vec::new();
            let mut seen_notes = BTreeSet::new();
            for (r, notes) in results {
                rows.extend(r);
                for n in notes {
                    if seen_notes.insert(n.clone()) {
                        meta.notes.push(n);
                    }
                }
            }
            let acc: Vec<(u64, f64)> = run.checkpoints.iter().map(|c| (c.step, c.train_accuracy)).collect();
            let mut series = MetricSeries { metadata: meta, rows };
            series.metadata.detectors = Some(apply_detectors(cfg, &series, &acc)?);
            Ok(series)
        }
    }
}

/// Drops linear probes that cannot fit the train labels and clamps k, with a note for each.
fn effective_probes(settings: &ProbeSettings, train: &LabeledDataset, notes: &mut Vec<String>) -> ProbeSettings {
    let mut s = settings.clone();
    let observed = train.class_counts().iter().filter(|c| **c > 0).count();
    if observed < 2 {
        let before = s.kinds.len();
        s.kinds.retain(|k| *k == ProbeKind::Knn);
        if s.kinds.len() != before {
            notes.push(format!(
                "linear probes skipped: train split has {observed} observed class"
            ));
        }
    }
    if s.k > train.len() {
        notes.push(format!("k clamped from {} to the train size {}", s.k, train.len()));
        s.k = train.len();
    }
    s
}

fn pick_checkpoint(checkpoints: &[CheckpointRecord], step: Option<u64>) -> Result<&CheckpointRecord> {
    match step {
        None => checkpoints
            .last()
            .ok_or_else(|| Error::invalid("training produced no checkpoints")),
        Some(s) => checkpoints.iter().find(|c| c.step == s).ok_or_else(|| Error::Config {
            field: "layer_sweep.step".into(),
            message: format!("{s} is not a checkpoint step of this run"),
        }),
    }
}

fn softmax_rows(logits: &DenseMatrix) -> Vec<ProbabilityDistribution> {
    logits
        .row_iter()
        .map(|r| ProbabilityDistribution::from_raw(softmax_unchecked(r)))
        .collect()
}

/// Activations and labels of one split at one tap.
struct SplitView<'a> {
    split: Split,
    activations: &'a DenseMatrix,
    labels: &'a [usize],
    dnn: Option<&'a [ProbabilityDistribution]>,
}

fn evaluate_checkpoint(
    record: &CheckpointRecord,
    train: &LabeledDataset,
    test: &LabeledDataset,
    taps: &[usize],
    names: &[String],
    probes: &ProbeSettings,
) -> Result<(Vec<MetricRow>, Vec<String>)> {
    let model: &MlpModel = &record.params;
    let train_pass = model.forward_all(&train.features)?;
    let test_pass = model.forward_all(&test.features)?;
    let train_dnn = softmax_rows(train_pass.logits());
    let test_dnn = softmax_rows(test_pass.logits());
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for &t in taps {
        let views = [
            SplitView {
                split: Split::Train,
                activations: &train_pass.taps[t].activations,
                labels: &train.labels,
                dnn: Some(&train_dnn),
            },
            SplitView {
                split: Split::Test,
                activations: &test_pass.taps[t].activations,
                labels: &test.labels,
                dnn: Some(&test_dnn),
            },
        ];
        let (r, n) = probe_rows(record.step, t, &names[t], &views, probes, train.num_classes)?;
        rows.extend(r);
        notes.extend(n);
    }
    Ok((rows, notes))
}

/// Fits every configured probe on the train view and evaluates it on all views.
///
/// Rows come out split-major, then in configured probe order.
fn probe_rows(
    step: u64,
    layer_index: usize,
    layer: &str,
    views: &[SplitView<'_>],
    probes: &ProbeSettings,
    num_classes: usize,
) -> Result<(Vec<MetricRow>, Vec<String>)> {
    let train = views
        .iter()
        .find(|v| v.split == Split::Train)
        .ok_or_else(|| Error::invalid("probes need a train split"))?;
    let mut per_kind = Vec::with_capacity(probes.kinds.len());
    let mut notes = Vec::new();
    for &kind in &probes.kinds {
        match probes.fit(kind, train.activations, train.labels, num_classes) {
            Ok(p) => per_kind.push((kind, p)),
            Err(Error::FitFailure(msg)) => {
                notes.push(format!("{kind} probe failed at step {step}, layer {layer}: {msg}"))
            }
            Err(e) => return Err(e),
        }
    }
    let mut rows = Vec::new();
    for v in views {
        for (kind, probe) in &per_kind {
            let dists = probe.predict_proba_batch(v.activations)?;
            let a = evaluate(&dists, v.dnn, v.labels)?;
            rows.push(MetricRow {
                step,
                layer_index,
                layer: layer.to_string(),
                split: v.split,
                probe: *kind,
                n_samples: v.labels.len(),
                accuracy_probe: a.accuracy_probe,
                accuracy_dnn: a.accuracy_dnn,
                p_same: a.p_same,
                mean_kl: a.mean_kl,
            });
        }
    }
    Ok((rows, notes))
}

/// Memorization from the network's full-split train accuracy, divergence from
/// the k-NN KL series (or the first configured probe without k-NN).
fn apply_detectors(cfg: &ExperimentConfig, series: &MetricSeries, train_acc: &[(u64, f64)]) -> Result<DetectorOutcome> {
    let probe = if cfg.probes.kinds.contains(&ProbeKind::Knn) {
        ProbeKind::Knn
    } else {
        cfg.probes.kinds[0]
    };
    let mut flags = Vec::new();
    let memorization_step = detect_memorization(train_acc);
    let kl = |split| series.trace(probe, split, |r| r.mean_kl);
    let (train_kl, test_kl) = (kl(Split::Train), kl(Split::Test));
    let divergence_step = match memorization_step {
        None => {
            flags.push("memorization_not_reached".to_string());
            None
        }
        Some(_) if train_kl.is_empty() => {
            flags.push("no_kl_series".to_string());
            None
        }
        Some(m) => detect_divergence(&train_kl, &test_kl, m, cfg.detector)?,
    };
    Ok(DetectorOutcome {
        memorization_step,
        divergence_step,
        params: cfg.detector,
        probe,
        flags,
    })
}

fn run_dump(cfg: &ExperimentConfig, protocol: Protocol) -> Result<MetricSeries> {
    let ModelSpec::Dump {
        manifest,
        embedding_layer,
    } = &cfg.model
    else {
        unreachable!("checked by caller");
    };
    if matches!(protocol, Protocol::RandomLabels | Protocol::Overfit) {
        return Err(Error::invalid(format!(
            "protocol {} needs a native model",
            protocol.as_str()
        )));
    }
    let dump = ingest_dump(manifest)?;
    let num_classes = dump.manifest.num_classes;
    let labels = |split: Split| {
        dump.labels
            .get(&split)
            .ok_or_else(|| Error::format(manifest, 0, format!("dump has no {split} labels")))
    };
    let (train_labels, test_labels) = (labels(Split::Train)?, labels(Split::Test)?);
    let producer = dump
        .manifest
        .producer
        .get("dataset")
        .and_then(|v| v.as_str())
        .unwrap_or("external dump")
        .to_string();
    let mut meta = base_metadata(cfg, protocol, &producer)?;
    let names = dump.manifest.layer_names();
    let mut probes = cfg.probes.clone();
    if probes.k > train_labels.len() {
        meta.notes.push(format!(
            "k clamped from {} to the train size {}",
            probes.k,
            train_labels.len()
        ));
        probes.k = train_labels.len();
    }
    let has_logits = names.iter().any(|n| n == "logits");
    if !has_logits {
        meta.notes
            .push("dump has no logits layer: network agreement metrics omitted".into());
    }
    let steps = dump.manifest.steps();
    let pool = thread_pool(cfg.workers)?;

    let eval = |step: u64, layer_index: usize, layer: &str| -> Result<(Vec<MetricRow>, Vec<String>)> {
        let mut dnn = Vec::new();
        for split in Split::BOTH {
            dnn.push(if has_logits {
                Some(softmax_rows(dump.require(manifest, "logits", step, split)?))
            } else {
                None
            });
        }
        let views = [
            SplitView {
                split: Split::Train,
                activations: dump.require(manifest, layer, step, Split::Train)?,
                labels: train_labels,
                dnn: dnn[0].as_deref(),
            },
            SplitView {
                split: Split::Test,
                activations: dump.require(manifest, layer, step, Split::Test)?,
                labels: test_labels,
                dnn: dnn[1].as_deref(),
            },
        ];
        probe_rows(step, layer_index, layer, &views, &probes, num_classes)
    };

    let mut rows = Vec::new();
    match protocol {
        Protocol::LayerSweep => {
            let step = match cfg.layer_sweep.step {
                Some(s) if steps.contains(&s) => s,
                Some(s) => {
                    return Err(Error::Config {
                        field: "layer_sweep.step".into(),
                        message: format!("{s} is not a checkpoint step of the dump"),
                    })
                }
                None => *steps
                    .last()
                    .ok_or_else(|| Error::format(manifest, 0, "manifest lists no layers"))?,
            };
            let results: Vec<_> = pool.install(|| {
                names
                    .par_iter()
                    .enumerate()
                    .map(|(i, n)| eval(step, i, n))
                    .collect::<Result<Vec<_>>>()
            })?;
            for (r, n) in results {
                rows.extend(r);
                meta.notes.extend(n);
            }
            Ok(MetricSeries { metadata: meta, rows })
        }
        _ => {
            let layer = dump_embedding_layer(&dump, embedding_layer.as_deref(), manifest)?;
            let index = names.iter().position(|n| *n == layer).unwrap();
            let results: Vec<_> = pool.install(|| {
                steps
                    .par_iter()
                    .map(|s| eval(*s, index, &layer))
                    .collect::<Result<Vec<_>>>()
            })?;
            for (r, n) in results {
                rows.extend(r);
                meta.notes.extend(n);
            }
            let acc: Vec<(u64, f64)> = if has_logits {
                let probe = probes.kinds[0];
                rows.iter()
                    .filter(|r| r.split == Split::Train && r.probe == probe)
                    .filter_map(|r| r.accuracy_dnn.map(|a| (r.step, a)))
                    .collect()
            } else {
                Vec::new()
            };
            let mut series = MetricSeries { metadata: meta, rows };
            series.metadata.detectors = Some(apply_detectors(cfg, &series, &acc)?);
            Ok(series)
        }
    }
}

fn dump_embedding_layer(dump: &IngestedDump, configured: Option<&str>, manifest: &std::path::Path) -> Result<String> {
    let names = dump.manifest.layer_names();
    if let Some(name) = configured {
        return if names.iter().any(|n| n == name) {
            Ok(name.to_string())
        } else {
            Err(Error::format(manifest, 0, format!("manifest has no layer `{name}`")))
        };
    }
    let candidates: Vec<&String> = names.iter().filter(|n| *n != "logits").collect();
    candidates
        .last()
        .map(|s| s.to_string())
        .ok_or_else(|| Error::format(manifest, 0, "manifest has no layer to probe besides logits"))
}

//! Figure-style long-format data files and a plain-text summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::metrics::{MetricRow, MetricSeries, Split};

pub const FIGURE_FILES: [&str; 4] = [
    "accuracy_vs_step.csv",
    "psame_vs_step.csv",
    "kl_vs_step.csv",
    "accuracy_vs_layer.csv",
];

fn csv_bytes(header: &[&str], records: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in records {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::invalid(e.to_string()))
}

fn num(v: f64) -> String {
    v.to_string()
}

/// Probe rows plus one network row per (step, layer, split), in series order.
fn accuracy_records<'a>(
    series: &'a [MetricSeries],
    key: impl Fn(&MetricRow) -> Vec<String> + 'a,
) -> impl Iterator<Item = Vec<String>> + 'a {
    series.iter().flat_map(move |s| {
        let mut out = Vec::new();
        let mut last_dnn: Option<(u64, usize, Split)> = None;
        for r in &s.rows {
            let mut rec = vec![s.metadata.run_id.clone()];
            rec.extend(key(r));
            rec.extend([r.split.to_string(), r.probe.to_string(), num(r.accuracy_probe)]);
            out.push(rec);
            if let Some(a) = r.accuracy_dnn {
                let id = (r.step, r.layer_index, r.split);
                if last_dnn != Some(id) {
                    last_dnn = Some(id);
                    let mut rec = vec![s.metadata.run_id.clone()];
                    rec.extend(key(r));
                    rec.extend([r.split.to_string(), "dnn".to_string(), num(a)]);
                    out.push(rec);
                }
            }
        }
        out
    })
}

/// Writes the four figure files into `dir` and returns their paths.
///
/// Several series are concatenated, told apart by the `run_id` column.
pub fn write_figure_data(series: &[MetricSeries], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let step_key = |r: &MetricRow| vec![r.step.to_string(), r.layer.clone()];
    let layer_key = |r: &MetricRow| vec![r.step.to_string(), r.layer_index.to_string(), r.layer.clone()];
    let optional = |name: &str, value: fn(&MetricRow) -> Option<f64>| {
        csv_bytes(
            &["run_id", "step", "layer", "split", "probe", name],
            series.iter().flat_map(move |s| {
                s.rows.iter().filter_map(move |r| {
                    value(r).map(|v| {
                        vec![
                            s.metadata.run_id.clone(),
                            r.step.to_string(),
                            r.layer.clone(),
                            r.split.to_string(),
                            r.probe.to_string(),
                            num(v),
                        ]
                    })
                })
            }),
        )
    };
    let contents = [
        csv_bytes(
            &["run_id", "step", "layer", "split", "model", "accuracy"],
            accuracy_records(series, step_key),
        )?,
        optional("p_same", |r| r.p_same)?,
        optional("mean_kl", |r| r.mean_kl)?,
        csv_bytes(
            &["run_id", "step", "layer_index", "layer", "split", "model", "accuracy"],
            accuracy_records(series, layer_key),
        )?,
    ];
    let mut paths = Vec::new();
    for (name, bytes) in FIGURE_FILES.iter().zip(contents) {
        let path = dir.join(name);
        write_atomic(&path, |w| std::io::Write::write_all(w, &bytes))?;
        paths.push(path);
    }
    Ok(paths)
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "none".to_string(), |v| v.to_string())
}

/// Final accuracies and agreement per probe and split, plus detector results.
pub fn summary_text(series: &[MetricSeries]) -> String {
    let mut out = String::new();
    for s in series {
        let m = &s.metadata;
        let _ = writeln!(out, "run {} ({}, {})", m.run_id, m.protocol, m.dataset);
        if let Some(last) = s.rows.iter().map(|r| r.step).max() {
            let _ = writeln!(out, "  last step: {last}");
        }
        for r in s
            .rows
            .iter()
            .filter(|r| Some(r.step) == s.rows.iter().map(|r| r.step).max())
        {
            let _ = writeln!(
                out,
                "  {:<8} {:<5} {:<4} acc_probe {:.4}  acc_dnn {}  p_same {}  mean_kl {}",
                r.layer,
                r.split.as_str(),
                r.probe.as_str(),
                r.accuracy_probe,
                opt(r.accuracy_dnn.map(|v| format!("{v:.4}"))),
                opt(r.p_same.map(|v| format!("{v:.4}"))),
                opt(r.mean_kl.map(|v| format!("{v:.4}"))),
            );
        }
        if let Some(d) = &m.detectors {
            let _ = writeln!(out, "  memorization step: {}", opt(d.memorization_step));
            let _ = writeln!(
                out,
                "  divergence step: {} ({} KL, window {}, ratio {})",
                opt(d.divergence_step),
                d.probe,
                d.params.window,
                d.params.ratio
            );
            for f in &d.flags {
                let _ = writeln!(out, "  flag: {f}");
            }
        }
        if let Some(f) = &m.training_failure {
            let _ = writeln!(out, "  training stopped at step {}: {}", f.step, f.message);
        }
        for n in &m.notes {
            let _ = writeln!(out, "  note: {n}");
        }
    }
    out
}

/// Loads series for reporting; an empty series is an error.
pub fn load_series(path: impl AsRef<Path>) -> Result<MetricSeries> {
    let path = path.as_ref();
    let series =
        MetricSeries::read_json(path).map_err(|e| Error::format(path, 0, format!("not a metric series: {e}")))?;
    if series.rows.is_empty() {
        return Err(Error::format(path, 0, "metric series has no rows"));
    }
    Ok(series)
}

/// Writes figure files and `summary.txt` for the given series into `dir`.
pub fn write_report(series: &[MetricSeries], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut paths = write_figure_data(series, dir)?;
    let summary = dir.join("summary.txt");
    let text = summary_text(series);
    write_atomic(&summary, |w| std::io::Write::write_all(w, text.as_bytes()))?;
    paths.push(summary);
    Ok(paths)
}

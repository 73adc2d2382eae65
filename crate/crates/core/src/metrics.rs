//! Agreement metrics between probes and the network, plus the memorization
//! and divergence detectors.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::math::{kl_unchecked, ProbabilityDistribution, DEFAULT_KL_FLOOR};
use crate::probes::ProbeKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub const BOTH: [Split; 2] = [Split::Train, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fraction of positions where the two label sequences agree.
pub fn p_same(model_labels: &[usize], dnn_labels: &[usize]) -> Result<f64> {
    if model_labels.len() != dnn_labels.len() || model_labels.is_empty() {
        return Err(Error::invalid(format!(
            "p_same needs equal nonempty sequences, got {} and {}",
            model_labels.len(),
            dnn_labels.len()
        )));
    }
    let same = model_labels.iter().zip(dnn_labels).filter(|(a, b)| a == b).count();
    Ok(same as f64 / model_labels.len() as f64)
}

/// Average per-sample `KL(model ‖ dnn)` in nats, summed in sample order.
pub fn mean_kl(model_dists: &[ProbabilityDistribution], dnn_dists: &[ProbabilityDistribution]) -> Result<f64> {
    mean_kl_with_floor(model_dists, dnn_dists, DEFAULT_KL_FLOOR)
}

pub fn mean_kl_with_floor(
    model_dists: &[ProbabilityDistribution],
    dnn_dists: &[ProbabilityDistribution],
    floor: f64,
) -> Result<f64> {
    if model_dists.len() != dnn_dists.len() || model_dists.is_empty() {
        return Err(Error::invalid(format!(
            "mean_kl needs equal nonempty sets, got {} and {}",
            model_dists.len(),
            dnn_dists.len()
        )));
    }
    if !(floor > 0.0 && floor <= 1e-6) {
        return Err(Error::invalid(format!("kl floor {floor} outside (0, 1e-6]")));
    }
    let mut total = 0.0;
    for (p, q) in model_dists.iter().zip(dnn_dists) {
        if p.num_classes() != q.num_classes() {
            return Err(Error::invalid(format!(
                "class count mismatch: {} vs {}",
                p.num_classes(),
                q.num_classes()
            )));
        }
        total += kl_unchecked(p.probs(), q.probs(), floor);
    }
    Ok(total / model_dists.len() as f64)
}

/// Fraction of predictions equal to the labels.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() || predicted.is_empty() {
        return Err(Error::invalid(format!(
            "accuracy needs equal nonempty sequences, got {} and {}",
            predicted.len(),
            labels.len()
        )));
    }
    Ok(crate::nn::accuracy(predicted, labels))
}

/// One evaluation of one probe on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    /// Position of the tap in canonical order (input = 0).
    pub layer_index: usize,
    pub layer: String,
    pub split: Split,
    pub probe: ProbeKind,
    pub n_samples: usize,
    pub accuracy_probe: f64,
    /// Missing when the network's outputs are unknown (dumps without logits).
    pub accuracy_dnn: Option<f64>,
    pub p_same: Option<f64>,
    pub mean_kl: Option<f64>,
}

/// Metrics for one probe on one split, from its distributions and the network's.
pub fn evaluate(
    probe_dists: &[ProbabilityDistribution],
    dnn_dists: Option<&[ProbabilityDistribution]>,
    labels: &[usize],
) -> Result<Agreement> {
    let probe_labels: Vec<usize> = probe_dists.iter().map(|d| d.argmax()).collect();
    let accuracy_probe = accuracy(&probe_labels, labels)?;
    let (accuracy_dnn, p_same_value, kl) = match dnn_dists {
        Some(dnn) => {
            let dnn_labels: Vec<usize> = dnn.iter().map(|d| d.argmax()).collect();
            (
                Some(accuracy(&dnn_labels, labels)?),
                Some(p_same(&probe_labels, &dnn_labels)?),
                Some(mean_kl(probe_dists, dnn)?),
            )
        }
        None => (None, None, None),
    };
    Ok(Agreement {
        accuracy_probe,
        accuracy_dnn,
        p_same: p_same_value,
        mean_kl: kl,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Agreement {
    pub accuracy_probe: f64,
    pub accuracy_dnn: Option<f64>,
    pub p_same: Option<f64>,
    pub mean_kl: Option<f64>,
}

/// First step whose full-split train accuracy is exactly 1.0.
pub fn detect_memorization(train_acc_series: &[(u64, f64)]) -> Option<u64> {
    train_acc_series.iter().find(|(_, acc)| *acc == 1.0).map(|(s, _)| *s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DivergenceParams {
    pub window: usize,
    pub ratio: f64,
    /// Lower clamp on the train KL in the ratio's denominator.
    pub floor: f64,
}

impl Default for DivergenceParams {
    fn default() -> Self {
        Self {
            window: 3,
            ratio: 3.0,
            floor: 1e-9,
        }
    }
}

impl DivergenceParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Config {
                field: "detector.window".into(),
                message: format!("must be >= 2, got {}", self.window),
            });
        }
        if !(self.ratio > 1.0) {
            return Err(Error::Config {
                field: "detector.ratio".into(),
                message: format!("must be > 1, got {}", self.ratio),
            });
        }
        if !(self.floor > 0.0) {
            return Err(Error::Config {
                field: "detector.floor".into(),
                message: format!("must be > 0, got {}", self.floor),
            });
        }
        Ok(())
    }
}

/// Earliest checkpoint `s >= memo_step` that starts a run of `window`
/// consecutive checkpoints with `test / max(train, floor) >= ratio`.
pub fn detect_divergence(
    train_kl: &[(u64, f64)],
    test_kl: &[(u64, f64)],
    memo_step: u64,
    params: DivergenceParams,
) -> Result<Option<u64>> {
    params.validate()?;
    if train_kl.len() != test_kl.len() || train_kl.iter().zip(test_kl).any(|(a, b)| a.0 != b.0) {
        return Err(Error::invalid(
            "train and test KL series are not aligned on the same steps",
        ));
    }
    let mut run = 0;
    let mut start = None;
    for ((step, tr), (_, te)) in train_kl.iter().zip(test_kl) {
        if *step < memo_step {
            continue;
        }
        if te / tr.max(params.floor) >= params.ratio {
            if run == 0 {
                start = Some(*step);
            }
            run += 1;
            if run >= params.window {
                return Ok(start);
            }
        } else {
            run = 0;
        }
    }
    Ok(None)
}

/// What the detectors concluded for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorOutcome {
    pub memorization_step: Option<u64>,
    pub divergence_step: Option<u64>,
    pub params: DivergenceParams,
    /// Probe whose KL series fed the divergence rule.
    pub probe: ProbeKind,
    pub flags: Vec<String>,
}

/// Everything needed to interpret a series without its producer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesMetadata {
    pub run_id: String,
    pub protocol: String,
    pub engine_version: String,
    pub dataset: String,
    /// Fully resolved experiment config.
    pub config: serde_json::Value,
    pub decisions: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detectors: Option<DetectorOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_failure: Option<FailureNote>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Why training stopped before its last scheduled step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureNote {
    pub step: u64,
    /// The offending loss when it is finite enough to record (absent for NaN/∞).
    pub loss: Option<f64>,
    pub message: String,
}

/// Identifiers of the modeling choices every report is computed under.
pub fn decision_identifiers() -> BTreeMap<String, String> {
    [
        ("kl_base", "nats"),
        ("kl_direction", "probe_to_dnn"),
        ("kl_floor", "1e-10"),
        ("kl_zero_terms", "p_zero_contributes_zero"),
        ("tie_rule", "lowest_index"),
        ("knn_metric", "euclidean_l2_raw"),
        ("knn_vote", "unweighted_fraction"),
        ("knn_train_queries", "self_included"),
        ("svm_probability", "softmax_ovr_margins"),
        ("lr_solver", "full_batch_gd_curvature_scaled"),
        ("input_scaling", "div255_no_centering"),
        ("hidden_activation", "relu"),
        ("init", "he_normal"),
        ("optimizer", "plain_sgd"),
        ("embedding_tap", "last_hidden_post_activation"),
        ("memorization", "full_train_accuracy_exactly_1"),
        ("label_randomization", "uniform_resample"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub metadata: SeriesMetadata,
    pub rows: Vec<MetricRow>,
}

/// Column order of the series CSV.
pub const CSV_HEADER: [&str; 10] = [
    "step",
    "layer_index",
    "layer",
    "split",
    "probe",
    "n_samples",
    "accuracy_probe",
    "accuracy_dnn",
    "p_same",
    "mean_kl",
];

impl MetricSeries {
    /// Rows for one probe and split, in series order.
    pub fn select(&self, probe: ProbeKind, split: Split) -> impl Iterator<Item = &MetricRow> + '_ {
        self.rows.iter().filter(move |r| r.probe == probe && r.split == split)
    }

    /// `(step, value)` for one probe and split.
    pub fn trace(&self, probe: ProbeKind, split: Split, value: impl Fn(&MetricRow) -> Option<f64>) -> Vec<(u64, f64)> {
        self.select(probe, split)
            .filter_map(|r| value(r).map(|v| (r.step, v)))
            .collect()
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        if self.rows.is_empty() {
            w.write_record(CSV_HEADER)?;
        }
        w.into_inner().map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_csv_bytes()?;
        write_atomic(path.as_ref(), |w| std::io::Write::write_all(w, &bytes))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path.as_ref(), |w| std::io::Write::write_all(w, &bytes))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Parses rows written by [`MetricSeries::write_csv`].
pub fn read_csv_rows(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{other:?}")),
    })?;
    let rows: std::result::Result<Vec<MetricRow>, _> = r.deserialize().collect();
    Ok(rows?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(v: &[f64]) -> ProbabilityDistribution {
        ProbabilityDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn p_same_examples() {
        assert_eq!(p_same(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(p_same(&[0, 0, 1], &[1, 1, 0]).unwrap(), 0.0);
        assert_eq!(p_same(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 0.75);
        assert!(p_same(&[0], &[0, 1]).is_err());
        assert!(p_same(&[], &[]).is_err());
    }

    #[test]
    fn mean_kl_examples() {
        let a = vec![dist(&[0.5, 0.5]), dist(&[0.2, 0.8])];
        assert_eq!(mean_kl(&a, &a).unwrap(), 0.0);
        let p = vec![dist(&[0.5, 0.5]), dist(&[0.0, 1.0])];
        let q = vec![dist(&[0.5, 0.5]), dist(&[0.5, 0.5])];
        let expected = (0.0 + 2f64.ln()) / 2.0;
        assert!((mean_kl(&p, &q).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.346574).abs() < 1e-6);
        let single = crate::math::kl_divergence(&p[1], &q[1], DEFAULT_KL_FLOOR).unwrap();
        assert_eq!(mean_kl(&p[1..], &q[1..]).unwrap(), single);
        assert!(mean_kl(&p, &q[..1]).is_err());
        assert!(mean_kl(&[dist(&[1.0])], &[dist(&[0.5, 0.5])]).is_err());
    }

    #[test]
    fn memorization_examples() {
        assert_eq!(
            detect_memorization(&[(100, 0.8), (200, 0.95), (300, 1.0), (400, 1.0)]),
            Some(300)
        );
        assert_eq!(detect_memorization(&[(0, 0.1), (10, 0.999_999)]), None);
        assert_eq!(detect_memorization(&[(0, 1.0)]), Some(0));
    }

    #[test]
    fn divergence_examples() {
        let p = DivergenceParams::default();
        let steps = [0u64, 100, 200, 300, 400];
        let same: Vec<_> = steps.iter().map(|s| (*s, 0.3)).collect();
        assert_eq!(detect_divergence(&same, &same, 0, p).unwrap(), None);

        let train: Vec<_> = steps
            .iter()
            .zip([0.5, 0.4, 0.01, 0.005, 0.002])
            .map(|(s, v)| (*s, v))
            .collect();
        let test: Vec<_> = steps
            .iter()
            .zip([0.5, 0.5, 0.2, 0.25, 0.3])
            .map(|(s, v)| (*s, v))
            .collect();
        assert_eq!(detect_divergence(&train, &test, 200, p).unwrap(), Some(200));
        assert_eq!(detect_divergence(&train, &test, 300, p).unwrap(), None);

        let short_test: Vec<_> = steps
            .iter()
            .zip([0.5, 0.5, 0.2, 0.25, 0.0])
            .map(|(s, v)| (*s, v))
            .collect();
        assert_eq!(detect_divergence(&train, &short_test, 0, p).unwrap(), None);

        assert!(detect_divergence(&train, &test[1..], 0, p).is_err());
        let shifted: Vec<_> = test.iter().map(|(s, v)| (s + 1, *v)).collect();
        assert!(detect_divergence(&train, &shifted, 0, p).is_err());
        let bad = DivergenceParams { window: 1, ..p };
        assert!(detect_divergence(&train, &test, 0, bad).is_err());
    }

    #[test]
    fn evaluate_without_dnn() {
        let probe = vec![dist(&[0.9, 0.1]), dist(&[0.4, 0.6])];
        let a = evaluate(&probe, None, &[0, 0]).unwrap();
        assert_eq!(a.accuracy_probe, 0.5);
        assert!(a.p_same.is_none() && a.mean_kl.is_none() && a.accuracy_dnn.is_none());
    }

    #[test]
    fn csv_roundtrip_and_header() {
        let row = MetricRow {
            step: 250,
            layer_index: 1,
            layer: "hidden1".into(),
            split: Split::Test,
            probe: ProbeKind::Knn,
            n_samples: 10,
            accuracy_probe: 0.9,
            accuracy_dnn: Some(0.8),
            p_same: None,
            mean_kl: Some(0.125),
        };
        let series = MetricSeries {
            metadata: SeriesMetadata {
                run_id: "r".into(),
                protocol: "step_sweep".into(),
                engine_version: "0".into(),
                dataset: "d".into(),
                config: serde_json::Value::Null,
                decisions: decision_identifiers(),
                detectors: None,
                training_failure: None,
                notes: vec![],
            },
            rows: vec![row.clone()],
        };
        let text = String::from_utf8(series.to_csv_bytes().unwrap()).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER.join(","));
        assert_eq!(text.lines().nth(1).unwrap(), "250,1,hidden1,test,knn,10,0.9,0.8,,0.125");
        let dir = tempfile::tempdir().unwrap();
        series.write_csv(dir.path().join("s.csv")).unwrap();
        assert_eq!(read_csv_rows(dir.path().join("s.csv")).unwrap(), vec![row]);
        series.write_json(dir.path().join("s.json")).unwrap();
        assert_eq!(MetricSeries::read_json(dir.path().join("s.json")).unwrap(), series);
    }

    fn labels(n: usize, c: usize) -> impl Strategy<Value = Vec<usize>> {
        proptest::collection::vec(0..c, n)
    }

    proptest! {
        #[test]
        fn p_same_symmetric_and_relabel_invariant(
            (a, b) in (1usize..60).prop_flat_map(|n| (labels(n, 5), labels(n, 5))),
            perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(),
        ) {
            let ab = p_same(&a, &b).unwrap();
            prop_assert_eq!(ab, p_same(&b, &a).unwrap());
            let pa: Vec<usize> = a.iter().map(|l| perm[*l]).collect();
            let pb: Vec<usize> = b.iter().map(|l| perm[*l]).collect();
            prop_assert_eq!(ab, p_same(&pa, &pb).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn p_same_inclusion_exclusion_bound(
            (truth, probe, dnn) in (1usize..80).prop_flat_map(|n| (labels(n, 4), labels(n, 4), labels(n, 4))),
        ) {
            let ps = p_same(&probe, &dnn).unwrap();
            let bound = accuracy(&probe, &truth).unwrap() + accuracy(&dnn, &truth).unwrap() - 1.0;
            prop_assert!(ps >= bound - 1e-12);
        }

        #[test]
        fn memorization_idempotent_under_appending(
            accs in proptest::collection::vec(prop_oneof![0.0f64..1.0, Just(1.0)], 1..20),
            tail in proptest::collection::vec(0.0f64..=1.0, 0..5),
        ) {
            let series: Vec<(u64, f64)> = accs.iter().enumerate().map(|(i, a)| (i as u64 * 10, *a)).collect();
            let first = detect_memorization(&series);
            if let Some(m) = first {
                prop_assert!(m >= series[0].0);
                let mut longer = series.clone();
                longer.extend(tail.iter().enumerate().map(|(i, a)| (1000 + i as u64, *a)));
                prop_assert_eq!(detect_memorization(&longer), first);
            }
        }

        #[test]
        fn divergence_never_before_memorization(
            vals in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..30),
            memo in 0u64..300,
        ) {
            let train: Vec<_> = vals.iter().enumerate().map(|(i, v)| (i as u64 * 10, v.0)).collect();
            let test: Vec<_> = vals.iter().enumerate().map(|(i, v)| (i as u64 * 10, v.1)).collect();
            if let Some(s) = detect_divergence(&train, &test, memo, DivergenceParams::default()).unwrap() {
                prop_assert!(s >= memo);
            }
        }
    }
}

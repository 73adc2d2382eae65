//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.
//!
//! The MNIST runs read `data/mnist` at the workspace root and take several
//! minutes on a single core.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use layerprobe::data::{seeded_rng, synth_blobs};
use layerprobe::harness::{load_config, run_protocol, ExperimentConfig};
use layerprobe::math::{kl_divergence, DenseMatrix, ProbabilityDistribution, DEFAULT_KL_FLOOR};
use layerprobe::metrics::{accuracy, detect_divergence, p_same, MetricSeries, Split};
use layerprobe::nn::{gradient_check, init_mlp, relative_error};
use layerprobe::probes::{fit_knn, lr_loss_and_gradient, svm_objective, svm_subgradient, ProbeKind};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn mnist_config(preset: &str, extra: &[&str]) -> ExperimentConfig {
    let dir = mnist_dir();
    let mut overrides = vec![
        format!(
            "dataset.source.images=\"{}\"",
            dir.join("mnist10k-images-idx3-ubyte.gz").display()
        ),
        format!(
            "dataset.source.labels=\"{}\"",
            dir.join("mnist10k-labels-idx1-ubyte.gz").display()
        ),
    ];
    overrides.extend(extra.iter().map(|s| s.to_string()));
    load_config(preset, &overrides).unwrap_or_else(|e| panic!("preset {preset}: {e}"))
}

fn run(cfg: &ExperimentConfig) -> MetricSeries {
    let series = run_protocol(cfg).unwrap_or_else(|e| panic!("{}: {e}", cfg.name));
    assert!(
        series.metadata.training_failure.is_none(),
        "{}: training failed",
        cfg.name
    );
    series
}

fn last_row<'a>(
    series: &'a MetricSeries,
    probe: ProbeKind,
    split: Split,
    layer: &str,
) -> &'a layerprobe::metrics::MetricRow {
    series
        .select(probe, split)
        .filter(|r| r.layer == layer)
        .max_by_key(|r| r.step)
        .expect("row present")
}

fn random_dist(rng: &mut impl Rng, c: usize, zeros: bool) -> Vec<f64> {
    let mut v: Vec<f64> = (0..c)
        .map(|_| {
            if zeros && rng.random_bool(0.3) {
                0.0
            } else {
                -rng.random::<f64>().max(1e-300).ln()
            }
        })
        .collect();
    if v.iter().all(|&x| x == 0.0) {
        v[0] = 1.0;
    }
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    v
}

fn kl_oracle() -> Outcome {
    let p = ProbabilityDistribution::new(vec![0.5, 0.5]).unwrap();
    let q = ProbabilityDistribution::new(vec![0.25, 0.75]).unwrap();
    let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    let got = kl_divergence(&p, &q, DEFAULT_KL_FLOOR).unwrap();
    if (got - expected).abs() > 1e-12 {
        return Err(format!("kl = {got}, expected {expected}"));
    }
    let self_kl = kl_divergence(&q, &q, DEFAULT_KL_FLOOR).unwrap();
    if self_kl != 0.0 {
        return Err(format!("kl(p, p) = {self_kl}"));
    }
    let mut rng = seeded_rng(101, 0);
    let mut worst = f64::INFINITY;
    for _ in 0..10_000 {
        let c = rng.random_range(2..=12);
        let p = random_dist(&mut rng, c, true);
        let mut q = random_dist(&mut rng, c, true);
        q.iter_mut().for_each(|x| *x = x.max(DEFAULT_KL_FLOOR));
        let total: f64 = q.iter().sum();
        q.iter_mut().for_each(|x| *x /= total);
        let p = ProbabilityDistribution::new(p).unwrap();
        let q = ProbabilityDistribution::new(q).unwrap();
        worst = worst.min(kl_divergence(&p, &q, DEFAULT_KL_FLOOR).unwrap());
    }
    check(
        worst >= -1e-12,
        format!("direct sum within 1e-12, kl(p,p)=0, min over 10k pairs {worst:.3e}"),
    )
}

fn p_same_oracle() -> Outcome {
    let cases = [
        (vec![0, 1, 2, 3], vec![0, 1, 2, 3], 1.0),
        (vec![0, 1, 2, 3], vec![1, 2, 3, 0], 0.0),
        (vec![0, 1, 2, 3], vec![0, 1, 2, 0], 0.75),
    ];
    for (a, b, want) in &cases {
        let got = p_same(a, b).unwrap();
        if got != *want {
            return Err(format!("p_same({a:?}, {b:?}) = {got}, expected {want}"));
        }
    }
    let mut rng = seeded_rng(102, 0);
    for fixture in 0..1000 {
        let n = rng.random_range(1..=200);
        let c = rng.random_range(2..=10);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let noisy = |rng: &mut rand_chacha::ChaCha8Rng, flip: f64| -> Vec<usize> {
            truth
                .iter()
                .map(|&t| {
                    if rng.random_bool(flip) {
                        rng.random_range(0..c)
                    } else {
                        t
                    }
                })
                .collect()
        };
        let (fa, fb) = (rng.random::<f64>(), rng.random::<f64>());
        let probe = noisy(&mut rng, fa);
        let dnn = noisy(&mut rng, fb);
        let bound = accuracy(&probe, &truth).unwrap() + accuracy(&dnn, &truth).unwrap() - 1.0;
        let ps = p_same(&probe, &dnn).unwrap();
        if ps < bound - 1e-12 {
            return Err(format!("fixture {fixture}: p_same {ps} below bound {bound}"));
        }
    }
    Ok("1.0/0.0/0.75 cases exact, lower bound holds on 1k fixtures".into())
}

/// Full sort of sequentially accumulated distances, ties broken by index.
fn naive_neighbors(reference: &[Vec<f64>], query: &[f64], k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = reference
        .iter()
        .enumerate()
        .map(|(j, r)| {
            let mut acc = 0.0;
            for t in 0..query.len() {
                acc += (query[t] - r[t]) * (query[t] - r[t]);
            }
            (acc, j)
        })
        .collect();
    d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|x| x.1).collect()
}

fn knn_exactness() -> Outcome {
    let mut rng = seeded_rng(103, 0);
    let mut compared = 0usize;
    for fixture in 0..50 {
        let n = if fixture == 0 {
            2000
        } else {
            rng.random_range(30..=2000)
        };
        let d = if fixture == 0 { 64 } else { rng.random_range(1..=64) };
        let k = if fixture == 0 { 30 } else { rng.random_range(1..=30) };
        let c = rng.random_range(2..=10);
        // Every third fixture uses a coarse integer grid so distance ties are common.
        let grid = fixture % 3 == 0;
        let point = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..d)
                .map(|_| {
                    if grid {
                        rng.random_range(0..3) as f64
                    } else {
                        rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-2..3))
                    }
                })
                .collect()
        };
        let reference: Vec<Vec<f64>> = (0..n).map(|_| point(&mut rng)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let mut queries: Vec<Vec<f64>> = (0..100).map(|_| point(&mut rng)).collect();
        queries.extend(reference.iter().take(50).cloned());
        let probe = fit_knn(&DenseMatrix::from_rows(&reference).unwrap(), &labels, k, c).unwrap();
        let qm = DenseMatrix::from_rows(&queries).unwrap();
        let got = probe.neighbors_batch(&qm).unwrap();
        let dists = probe.predict_proba_batch(&qm).unwrap();
        for (qi, q) in queries.iter().enumerate() {
            let want = naive_neighbors(&reference, q, k);
            if got[qi] != want {
                return Err(format!("fixture {fixture} query {qi}: neighbor lists differ"));
            }
            let mut votes = vec![0usize; c];
            for &j in &want {
                votes[labels[j]] += 1;
            }
            let want_p: Vec<f64> = votes.iter().map(|&v| v as f64 / k as f64).collect();
            if dists[qi].probs() != want_p.as_slice() {
                return Err(format!("fixture {fixture} query {qi}: vote fractions differ"));
            }
            compared += 1;
        }
    }
    Ok(format!("{compared} queries over 50 fixtures match bit for bit"))
}

fn gradient_checks() -> Outcome {
    let eps = 1e-5;
    let data = synth_blobs(10, 2, 784, 0.5, 7).unwrap();
    let model = init_mlp(&[784, 640, 10], 3).unwrap();
    let mlp = gradient_check(&model, &data.features, &data.labels, eps).unwrap();

    let mut rng = seeded_rng(104, 0);
    let (n, d, c, l2) = (60, 12, 4, 1e-3);
    let x = DenseMatrix::new(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let w = DenseMatrix::new(c, d, (0..c * d).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
    let b: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let (_, gw, gb) = lr_loss_and_gradient(&w, &b, &x, &labels, l2);
    let loss_at =
        |w: &[f64], b: &[f64]| lr_loss_and_gradient(&DenseMatrix::new(c, d, w.to_vec()).unwrap(), b, &x, &labels, l2).0;
    let mut lr = 0.0f64;
    for i in 0..c * d {
        let (mut plus, mut minus) = (w.data().to_vec(), w.data().to_vec());
        plus[i] += eps;
        minus[i] -= eps;
        let numeric = (loss_at(&plus, &b) - loss_at(&minus, &b)) / (2.0 * eps);
        lr = lr.max(relative_error(gw.data()[i], numeric));
    }
    for i in 0..c {
        let (mut plus, mut minus) = (b.clone(), b.clone());
        plus[i] += eps;
        minus[i] -= eps;
        let numeric = (loss_at(w.data(), &plus) - loss_at(w.data(), &minus)) / (2.0 * eps);
        lr = lr.max(relative_error(gb[i], numeric));
    }

    // Resample until every margin sits well clear of the hinge.
    let y: Vec<f64> = labels.iter().map(|&l| if l == 0 { 1.0 } else { -1.0 }).collect();
    let (sw, sb) = loop {
        let sw: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sb: f64 = rng.random_range(-0.5..0.5);
        let clear = x.row_iter().zip(&y).all(|(row, yi)| {
            let m: f64 = yi * (row.iter().zip(&sw).map(|(a, b)| a * b).sum::<f64>() + sb);
            (m - 1.0).abs() > 1e-3
        });
        if clear {
            break (sw, sb);
        }
    };
    let (gw, gb) = svm_subgradient(&sw, sb, &x, &y, l2);
    let mut svm = 0.0f64;
    for i in 0..=d {
        let (mut wp, mut wm, mut bp, mut bm) = (sw.clone(), sw.clone(), sb, sb);
        if i < d {
            wp[i] += eps;
            wm[i] -= eps;
        } else {
            bp += eps;
            bm -= eps;
        }
        let numeric = (svm_objective(&wp, bp, &x, &y, l2) - svm_objective(&wm, bm, &x, &y, l2)) / (2.0 * eps);
        let analytic = if i < d { gw[i] } else { gb };
        svm = svm.max(relative_error(analytic, numeric));
    }
    let worst = mlp.max(lr).max(svm);
    check(
        worst < 1e-4,
        format!("max relative error mlp {mlp:.2e}, lr {lr:.2e}, svm {svm:.2e} (limit 1e-4)"),
    )
}

fn step_sweep_accuracy(series: &MetricSeries) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for kind in ProbeKind::ALL {
        let r = last_row(series, kind, Split::Test, "hidden1");
        let dnn = r.accuracy_dnn.expect("dnn accuracy");
        let gap = (r.accuracy_probe - dnn).abs();
        ok &= gap <= 0.03;
        parts.push(format!("{kind} {:.3} vs dnn {dnn:.3}", r.accuracy_probe));
    }
    check(ok, format!("{} (limit 0.03)", parts.join(", ")))
}

fn step_sweep_agreement(series: &MetricSeries) -> Outcome {
    let trace = series.trace(ProbeKind::Knn, Split::Test, |r| r.p_same);
    let (first, last) = (trace.first().unwrap(), trace.last().unwrap());
    check(
        first.0 == 0 && last.1 - first.1 >= 0.10 && last.1 >= 0.85,
        format!(
            "test p_same(knn) {:.3} at step {} to {:.3} at step {}",
            first.1, first.0, last.1, last.0
        ),
    )
}

fn layer_sweep(true_labels: &MetricSeries, random_labels: &MetricSeries) -> Outcome {
    let acc = |s: &MetricSeries, split, layer| last_row(s, ProbeKind::Knn, split, layer).accuracy_probe;
    let (input_test, hidden_test) = (
        acc(true_labels, Split::Test, "input"),
        acc(true_labels, Split::Test, "hidden1"),
    );
    let (input_train, hidden_train) = (
        acc(random_labels, Split::Train, "input"),
        acc(random_labels, Split::Train, "hidden1"),
    );
    let random_test = acc(random_labels, Split::Test, "hidden1");
    let chance = 1.0 / 10.0;
    check(
        hidden_test >= input_test && hidden_train - input_train >= 0.10 && (random_test - chance).abs() <= 0.05,
        format!(
            "true labels test knn input {input_test:.3} hidden {hidden_test:.3}; random labels train knn input \
             {input_train:.3} hidden {hidden_train:.3}, hidden test {random_test:.3}"
        ),
    )
}

fn kl_after_memorization(series: &MetricSeries) -> Outcome {
    let det = series.metadata.detectors.as_ref().expect("detectors recorded");
    let Some(memo) = det.memorization_step else {
        return Err("no memorization step".into());
    };
    let train = series.trace(ProbeKind::Knn, Split::Train, |r| r.mean_kl);
    let test = series.trace(ProbeKind::Knn, Split::Test, |r| r.mean_kl);
    let at = |t: &[(u64, f64)]| t.iter().find(|p| p.0 == memo).unwrap().1;
    let (train_memo, test_memo) = (at(&train), at(&test));
    let train_min = train
        .iter()
        .filter(|p| p.0 > memo)
        .map(|p| p.1)
        .fold(f64::INFINITY, f64::min);
    let test_min = test
        .iter()
        .filter(|p| p.0 > memo)
        .map(|p| p.1)
        .fold(f64::INFINITY, f64::min);
    let recomputed = detect_divergence(&train, &test, memo, det.params).unwrap();
    let fired = det.divergence_step.is_some_and(|s| s >= memo) && recomputed == det.divergence_step;
    check(
        train_min < train_memo && test_min >= 0.5 * test_memo && fired,
        format!(
            "memorization at {memo}; train kl {train_memo:.3} at memorization, min after {train_min:.3}; test kl \
             {test_memo:.3}, min after {test_min:.3}; divergence {:?}",
            det.divergence_step
        ),
    )
}

fn overfit_divergence(overfit: &MetricSeries, control: &MetricSeries) -> Outcome {
    let det = overfit.metadata.detectors.as_ref().expect("detectors recorded");
    let control_div = control.metadata.detectors.as_ref().and_then(|d| d.divergence_step);
    let soft = if control_div.is_none() {
        "control divergence none".to_string()
    } else {
        format!("soft check missed: control divergence {control_div:?}")
    };
    let ok = matches!((det.memorization_step, det.divergence_step), (Some(m), Some(d)) if d >= m);
    check(
        ok,
        format!(
            "memorization {:?}, divergence {:?}; {soft}",
            det.memorization_step, det.divergence_step
        ),
    )
}

struct Ledger {
    failed: Vec<String>,
}

impl Ledger {
    fn record(&mut self, name: &str, limit: Option<Duration>, started: Instant, outcome: Outcome) {
        let elapsed = started.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        let slow = limit.is_some_and(|l| elapsed > l);
        let timing = match limit {
            Some(l) => format!("{:.1}s, limit {}s", elapsed.as_secs_f64(), l.as_secs()),
            None => format!("{:.1}s", elapsed.as_secs_f64()),
        };
        let pass = ok && !slow;
        println!("{} {name}: {detail} [{timing}]", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(name.to_string());
        }
    }
}

#[test]
fn acceptance_criteria() {
    let secs = Duration::from_secs;
    let mut ledger = Ledger { failed: Vec::new() };

    let t = Instant::now();
    ledger.record("kl oracle", Some(secs(1)), t, kl_oracle());
    let t = Instant::now();
    ledger.record("p_same oracle", Some(secs(1)), t, p_same_oracle());
    let t = Instant::now();
    ledger.record("knn exactness", Some(secs(30)), t, knn_exactness());
    let t = Instant::now();
    ledger.record("gradient checks", Some(secs(30)), t, gradient_checks());

    let t = Instant::now();
    let sweep = run(&mnist_config("mnist_step_sweep", &[]));
    ledger.record(
        "probe accuracy tracks dnn",
        Some(secs(300)),
        t,
        step_sweep_accuracy(&sweep),
    );
    ledger.record("knn agreement grows", Some(secs(300)), t, step_sweep_agreement(&sweep));

    let t = Instant::now();
    let layers = run(&mnist_config("mnist_layer_sweep", &[]));
    let random_layers = run(&mnist_config("mnist_random_layer_sweep", &[]));
    ledger.record("layer sweep", Some(secs(300)), t, layer_sweep(&layers, &random_layers));

    let t = Instant::now();
    let random_cfg = mnist_config("mnist_random_labels", &[]);
    let random = run(&random_cfg);
    ledger.record(
        "random-label kl split",
        Some(secs(600)),
        t,
        kl_after_memorization(&random),
    );

    let t = Instant::now();
    let overfit = run(&mnist_config("mnist_overfit", &[]));
    let control = run(&mnist_config("mnist_overfit_control", &[]));
    ledger.record(
        "overfit divergence",
        Some(secs(600)),
        t,
        overfit_divergence(&overfit, &control),
    );

    let t = Instant::now();
    let mut threaded = random_cfg.clone();
    threaded.workers = 3;
    let (a, b) = (random.to_csv_bytes().unwrap(), run(&threaded).to_csv_bytes().unwrap());
    let mut single = random_cfg.clone();
    single.workers = 1;
    let repeat = run(&single).to_csv_bytes().unwrap();
    ledger.record(
        "determinism",
        None,
        t,
        check(
            a == b && a == repeat,
            format!("{} csv bytes identical with all cores, 1 worker and 3 workers", a.len()),
        ),
    );

    assert!(
        ledger.failed.is_empty(),
        "failed criteria: {}",
        ledger.failed.join(", ")
    );
}

//! Classical probes fitted on embedding spaces: exact k-NN, multinomial
//! logistic regression, and one-vs-rest linear SVM.
//!
//! Every probe yields a class distribution; hard labels are always
//! `argmax_tiebreak` of that distribution.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::data::seeded_rng;
use crate::error::{Error, Result};
use crate::math::{argmax_unchecked, softmax_in_place, DenseMatrix, ProbabilityDistribution};

/// Neighbor count used unless configured otherwise.
pub const DEFAULT_K: usize = 30;

/// Query rows handled per distance block.
const QUERY_BLOCK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Knn,
    Svm,
    Lr,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 3] = [ProbeKind::Knn, ProbeKind::Svm, ProbeKind::Lr];

    pub fn as_str(self) -> &'static str {
        match self {
            ProbeKind::Knn => "knn",
            ProbeKind::Svm => "svm",
            ProbeKind::Lr => "lr",
        }
    }
}

impl std::fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "knn" => Ok(ProbeKind::Knn),
            "svm" => Ok(ProbeKind::Svm),
            "lr" => Ok(ProbeKind::Lr),
            other => Err(Error::invalid(format!("unknown probe kind `{other}`"))),
        }
    }
}

fn check_fit_inputs(embeddings: &DenseMatrix, labels: &[usize], num_classes: usize) -> Result<()> {
    if embeddings.rows() == 0 {
        return Err(Error::invalid("cannot fit a probe on an empty embedding set"));
    }
    if labels.len() != embeddings.rows() {
        return Err(Error::invalid(format!(
            "{} labels for {} embedding rows",
            labels.len(),
            embeddings.rows()
        )));
    }
    if let Some(bad) = labels.iter().find(|l| **l >= num_classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    if !embeddings.is_finite() {
        return Err(Error::invalid("embeddings contain non-finite values"));
    }
    Ok(())
}

fn check_query_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::invalid(format!(
            "query has {got} features, probe expects {expected}"
        )));
    }
    Ok(())
}

/// Squared Euclidean distance, accumulated in feature order.
///
/// This exact expression defines neighbor order; the blocked search only uses
/// faster arithmetic to discard references that cannot be among the k nearest.
#[inline]
pub fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

fn sequential_norm_sq(a: &[f64]) -> f64 {
    let mut acc = 0.0;
    for x in a {
        acc += x * x;
    }
    acc
}

/// Exact k-nearest-neighbor probe over stored reference embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnProbe {
    reference: DenseMatrix,
    reference_norms: Vec<f64>,
    labels: Vec<usize>,
    k: usize,
    num_classes: usize,
}

/// Stores the references verbatim after validation.
pub fn fit_knn(embeddings: &DenseMatrix, labels: &[usize], k: usize, num_classes: usize) -> Result<KnnProbe> {
    check_fit_inputs(embeddings, labels, num_classes)?;
    if k == 0 || k > embeddings.rows() {
        return Err(Error::invalid(format!(
            "k = {k} must be in 1..={} (reference size)",
            embeddings.rows()
        )));
    }
    Ok(KnnProbe {
        reference_norms: embeddings.row_iter().map(sequential_norm_sq).collect(),
        reference: embeddings.clone(),
        labels: labels.to_vec(),
        k,
        num_classes,
    })
}

impl KnnProbe {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn reference(&self) -> &DenseMatrix {
        &self.reference
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Indices of the k nearest references, nearest first; distance ties go to the lower index.
    pub fn neighbors(&self, query: &[f64]) -> Result<Vec<usize>> {
        check_query_dim(self.reference.cols(), query.len())?;
        let q = DenseMatrix::from_raw(1, query.len(), query.to_vec());
        Ok(self.neighbors_block(&q).pop().unwrap())
    }

    /// [`KnnProbe::neighbors`] for every query row; blocks run in parallel on the current rayon pool.
    pub fn neighbors_batch(&self, queries: &DenseMatrix) -> Result<Vec<Vec<usize>>> {
        check_query_dim(self.reference.cols(), queries.cols())?;
        let blocks: Vec<Vec<usize>> = (0..queries.rows())
            .step_by(QUERY_BLOCK)
            .map(|s| (s..(s + QUERY_BLOCK).min(queries.rows())).collect())
            .collect();
        Ok(blocks
            .par_iter()
            .map(|rows| self.neighbors_block(&queries.select_rows(rows)))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect())
    }

    fn neighbors_block(&self, queries: &DenseMatrix) -> Vec<Vec<usize>> {
        let n = self.reference.rows();
        let d = self.reference.cols();
        // |approx - exact| <= slack * (‖q‖² + ‖r‖²) covers rounding in the
        // norm expansion, the GEMM dot products, and the exact sum itself.
        let slack = (4.0 * d as f64 + 16.0) * f64::EPSILON;
        let gram = queries.matmul_transposed(&self.reference);
        let mut out = Vec::with_capacity(queries.rows());
        let mut upper = vec![0.0; n];
        let mut lower = vec![0.0; n];
        for (qi, query) in queries.row_iter().enumerate() {
            let qn = sequential_norm_sq(query);
            for (j, g) in gram.row(qi).iter().enumerate() {
                let rn = self.reference_norms[j];
                let approx = qn + rn - 2.0 * g;
                let bound = slack * (qn + rn);
                upper[j] = approx + bound;
                lower[j] = approx - bound;
            }
            let tau = if self.k < n {
                let mut scratch = upper.clone();
                let (_, kth, _) = scratch.select_nth_unstable_by(self.k - 1, f64::total_cmp);
                *kth
            } else {
                f64::INFINITY
            };
            let mut candidates: Vec<(f64, usize)> = (0..n)
                .filter(|&j| lower[j] <= tau)
                .map(|j| (squared_euclidean(query, self.reference.row(j)), j))
                .collect();
            candidates.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            out.push(candidates.iter().take(self.k).map(|c| c.1).collect());
        }
        out
    }

    fn votes(&self, neighbors: &[usize]) -> ProbabilityDistribution {
        let mut counts = vec![0usize; self.num_classes];
        for &j in neighbors {
            counts[self.labels[j]] += 1;
        }
        ProbabilityDistribution::from_raw(counts.into_iter().map(|c| c as f64 / self.k as f64).collect())
    }

    /// Vote fractions over the k nearest references.
    pub fn predict_proba(&self, query: &[f64]) -> Result<ProbabilityDistribution> {
        Ok(self.votes(&self.neighbors(query)?))
    }

    pub fn predict_proba_batch(&self, queries: &DenseMatrix) -> Result<Vec<ProbabilityDistribution>> {
        Ok(self.neighbors_batch(queries)?.iter().map(|nb| self.votes(nb)).collect())
    }
}

pub fn knn_predict_proba(probe: &KnnProbe, query: &[f64]) -> Result<ProbabilityDistribution> {
    probe.predict_proba(query)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrHyper {
    pub l2: f64,
    /// Step size in units of 1/L, where L is the estimated smoothness constant.
    pub lr: f64,
    pub max_steps: usize,
    pub tol: f64,
    /// Nesterov extrapolation with gradient-based restart.
    pub accelerated: bool,
}

impl Default for LrHyper {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            lr: 0.5,
            max_steps: 2000,
            tol: 1e-5,
            accelerated: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvmHyper {
    pub l2: f64,
    pub lr: f64,
    /// Passes over the training set.
    #[serde(alias = "max_steps")]
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmHyper {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            lr: 0.1,
            epochs: 50,
            seed: 0,
        }
    }
}

/// What a linear probe was trained with, and how the fit ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "solver", rename_all = "snake_case")]
pub enum FitRecord {
    GradientDescent {
        hyper: LrHyper,
        steps: usize,
        weight_step: f64,
        bias_step: f64,
        final_grad_inf_norm: f64,
        converged: bool,
    },
    Subgradient {
        hyper: SvmHyper,
        updates: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    kind: ProbeKind,
    weights: DenseMatrix,
    biases: Vec<f64>,
    fit: FitRecord,
}

impl LinearProbe {
    pub fn new(kind: ProbeKind, weights: DenseMatrix, biases: Vec<f64>, fit: FitRecord) -> Result<Self> {
        if kind == ProbeKind::Knn {
            return Err(Error::invalid("a linear probe must be svm or lr"));
        }
        if biases.len() != weights.rows() || !weights.is_finite() || biases.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("linear probe parameters are inconsistent or non-finite"));
        }
        Ok(Self {
            kind,
            weights,
            biases,
            fit,
        })
    }

    pub fn kind(&self) -> ProbeKind {
        self.kind
    }

    pub fn weights(&self) -> &DenseMatrix {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn fit_record(&self) -> &FitRecord {
        &self.fit
    }

    pub fn num_classes(&self) -> usize {
        self.biases.len()
    }

    /// Raw scores `W·x + b`.
    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        check_query_dim(self.weights.cols(), query.len())?;
        Ok(self
            .weights
            .row_iter()
            .zip(&self.biases)
            .map(|(w, b)| w.iter().zip(query).map(|(a, x)| a * x).sum::<f64>() + b)
            .collect())
    }

    /// Softmax over the class scores.
    pub fn predict_proba(&self, query: &[f64]) -> Result<ProbabilityDistribution> {
        let mut s = self.scores(query)?;
        softmax_in_place(&mut s);
        Ok(ProbabilityDistribution::from_raw(s))
    }

    pub fn predict_proba_batch(&self, queries: &DenseMatrix) -> Result<Vec<ProbabilityDistribution>> {
        check_query_dim(self.weights.cols(), queries.cols())?;
        let mut scores = batch_scores(queries, &self.weights, &self.biases);
        Ok((0..scores.rows())
            .map(|r| {
                let row = scores.row_mut(r);
                softmax_in_place(row);
                ProbabilityDistribution::from_raw(row.to_vec())
            })
            .collect())
    }
}

pub fn linear_predict_proba(probe: &LinearProbe, query: &[f64]) -> Result<ProbabilityDistribution> {
    probe.predict_proba(query)
}

fn batch_scores(x: &DenseMatrix, weights: &DenseMatrix, biases: &[f64]) -> DenseMatrix {
    let mut s = x.matmul_transposed(weights);
    for r in 0..s.rows() {
        for (v, b) in s.row_mut(r).iter_mut().zip(biases) {
            *v += b;
        }
    }
    s
}

fn require_two_classes(labels: &[usize]) -> Result<()> {
    let first = labels[0];
    if labels.iter().all(|l| *l == first) {
        return Err(Error::invalid(format!(
            "probe needs at least two observed classes, all labels are {first}"
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy plus `(l2/2)·‖W‖²` and its gradient (biases unpenalized).
pub fn lr_loss_and_gradient(
    weights: &DenseMatrix,
    biases: &[f64],
    x: &DenseMatrix,
    labels: &[usize],
    l2: f64,
) -> (f64, DenseMatrix, Vec<f64>) {
    let n = x.rows() as f64;
    let mut residual = batch_scores(x, weights, biases);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = residual.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        softmax_in_place(row);
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n);
    }
    loss = loss / n + 0.5 * l2 * weights.norm_sq();
    let mut grad_w = residual.transpose_matmul(x);
    for (g, w) in grad_w.data_mut().iter_mut().zip(weights.data()) {
        *g += l2 * w;
    }
    let mut grad_b = vec![0.0; biases.len()];
    for row in residual.row_iter() {
        for (g, v) in grad_b.iter_mut().zip(row) {
            *g += v;
        }
    }
    (loss, grad_w, grad_b)
}

/// Largest eigenvalue of `(1/n)·XᵀX`, by power iteration from the all-ones vector.
fn second_moment_top_eigenvalue(x: &DenseMatrix) -> f64 {
    let (n, d) = x.shape();
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..50 {
        let mut next = vec![0.0; d];
        for row in x.row_iter() {
            let s = dot(row, &v);
            for (acc, a) in next.iter_mut().zip(row) {
                *acc += a * s;
            }
        }
        next.iter_mut().for_each(|t| *t /= n as f64);
        let norm = next.iter().map(|t| t * t).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = next.into_iter().map(|t| t / norm).collect();
    }
    lambda
}

/// Multinomial logistic regression by full-batch gradient descent.
///
/// Weights and biases take separate steps, `hyper.lr` over each block's
/// curvature bound: `λ_max(XᵀX/n) + 2·l2` for the weights and 1 for the
/// unpenalized biases. With `accelerated`, steps are taken from a Nesterov
/// extrapolation that restarts whenever it points uphill. Stops when the
/// gradient ∞-norm at the returned parameters drops below `tol`.
pub fn fit_lr(embeddings: &DenseMatrix, labels: &[usize], num_classes: usize, hyper: LrHyper) -> Result<LinearProbe> {
    check_fit_inputs(embeddings, labels, num_classes)?;
    require_two_classes(labels)?;
    if !(hyper.l2 >= 0.0) || !(hyper.lr > 0.0) {
        return Err(Error::invalid(format!(
            "lr probe needs l2 >= 0 and lr > 0, got {hyper:?}"
        )));
    }
    let weight_curvature = second_moment_top_eigenvalue(embeddings) + 2.0 * hyper.l2;
    let weight_step = hyper.lr / weight_curvature.max(f64::MIN_POSITIVE);
    let bias_step = hyper.lr;

    let d = embeddings.cols();
    let nw = num_classes * d;
    let step_of = |i: usize| if i < nw { weight_step } else { bias_step };
    let split = |flat: &[f64]| {
        (
            DenseMatrix::from_raw(num_classes, d, flat[..nw].to_vec()),
            flat[nw..].to_vec(),
        )
    };
    // `x` is the iterate, `y` the extrapolated point whose gradient drives the step.
    let mut x = vec![0.0; nw + num_classes];
    let mut x_prev = x.clone();
    let (mut t, mut beta) = (1.0f64, 0.0);
    let mut steps = 0;
    let (y, grad_norm) = loop {
        let y: Vec<f64> = x.iter().zip(&x_prev).map(|(a, p)| a + beta * (a - p)).collect();
        let (w, b) = split(&y);
        let (loss, gw, gb) = lr_loss_and_gradient(&w, &b, embeddings, labels, hyper.l2);
        if !loss.is_finite() {
            return Err(Error::FitFailure(format!("lr loss became {loss} after {steps} steps")));
        }
        let grad: Vec<f64> = gw.data().iter().chain(&gb).copied().collect();
        let grad_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_norm < hyper.tol || steps >= hyper.max_steps {
            break (y, grad_norm);
        }
        let next: Vec<f64> = y
            .iter()
            .zip(&grad)
            .enumerate()
            .map(|(i, (v, g))| v - step_of(i) * g)
            .collect();
        // Restart the momentum once it points uphill.
        let uphill: f64 = grad
            .iter()
            .zip(next.iter().zip(&x))
            .map(|(g, (n, o))| g * (n - o))
            .sum();
        if !hyper.accelerated || uphill > 0.0 {
            (t, beta) = (1.0, 0.0);
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            beta = (t - 1.0) / t_next;
            t = t_next;
        }
        x_prev = std::mem::replace(&mut x, next);
        steps += 1;
    };
    let (weights, biases) = split(&y);
    LinearProbe::new(
        ProbeKind::Lr,
        weights,
        biases,
        FitRecord::GradientDescent {
            hyper,
            steps,
            weight_step,
            bias_step,
            final_grad_inf_norm: grad_norm,
            converged: grad_norm < hyper.tol,
        },
    )
    .map_err(|e| Error::FitFailure(e.to_string()))
}

/// Mean hinge loss `max(0, 1 - y·(w·x + b))` plus `(l2/2)·‖w‖²`, for `y ∈ {-1, +1}`.
pub fn svm_objective(w: &[f64], b: f64, x: &DenseMatrix, y: &[f64], l2: f64) -> f64 {
    let hinge: f64 = x
        .row_iter()
        .zip(y)
        .map(|(row, yi)| (1.0 - yi * (dot(w, row) + b)).max(0.0))
        .sum();
    hinge / x.rows() as f64 + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>()
}

/// Subgradient of [`svm_objective`]; margins exactly at 1 take the zero branch.
pub fn svm_subgradient(w: &[f64], b: f64, x: &DenseMatrix, y: &[f64], l2: f64) -> (Vec<f64>, f64) {
    let n = x.rows() as f64;
    let mut gw: Vec<f64> = w.iter().map(|v| l2 * v).collect();
    let mut gb = 0.0;
    for (row, yi) in x.row_iter().zip(y) {
        if yi * (dot(w, row) + b) < 1.0 {
            for (g, xi) in gw.iter_mut().zip(row) {
                *g -= yi * xi / n;
            }
            gb -= yi / n;
        }
    }
    (gw, gb)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One-vs-rest linear SVM by epoch-shuffled stochastic subgradient descent.
///
/// Each epoch visits a seeded permutation; the step after `t` updates is
/// `lr / (1 + lr·l2·t)`. All binary problems share the visiting order.
pub fn fit_svm(embeddings: &DenseMatrix, labels: &[usize], num_classes: usize, hyper: SvmHyper) -> Result<LinearProbe> {
    check_fit_inputs(embeddings, labels, num_classes)?;
    require_two_classes(labels)?;
    if !(hyper.l2 > 0.0) || !(hyper.lr > 0.0) {
        return Err(Error::invalid(format!(
            "svm probe needs l2 > 0 and lr > 0, got {hyper:?}"
        )));
    }
    let (n, d) = embeddings.shape();
    let mut weights = DenseMatrix::zeros(num_classes, d);
    let mut biases = vec![0.0; num_classes];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(hyper.seed, 20);
    let mut t = 0usize;
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let eta = hyper.lr / (1.0 + hyper.lr * hyper.l2 * t as f64);
            let shrink = 1.0 - eta * hyper.l2;
            let x = embeddings.row(i);
            for (c, bias) in biases.iter_mut().enumerate() {
                let y = if labels[i] == c { 1.0 } else { -1.0 };
                let w = weights.row_mut(c);
                let margin = y * (dot(w, x) + *bias);
                if margin < 1.0 {
                    for (wj, xj) in w.iter_mut().zip(x) {
                        *wj = shrink * *wj + eta * y * xj;
                    }
                    *bias += eta * y;
                } else {
                    w.iter_mut().for_each(|wj| *wj *= shrink);
                }
            }
            t += 1;
        }
    }
    if !weights.is_finite() || biases.iter().any(|b| !b.is_finite()) {
        return Err(Error::FitFailure("svm parameters became non-finite".into()));
    }
    LinearProbe::new(
        ProbeKind::Svm,
        weights,
        biases,
        FitRecord::Subgradient { hyper, updates: t },
    )
    .map_err(|e| Error::FitFailure(e.to_string()))
}

/// Any fitted probe.
#[derive(Debug, Clone, PartialEq)]
pub enum Probe {
    Knn(KnnProbe),
    Linear(LinearProbe),
}

impl Probe {
    pub fn kind(&self) -> ProbeKind {
        match self {
            Probe::Knn(_) => ProbeKind::Knn,
            Probe::Linear(l) => l.kind(),
        }
    }

    pub fn predict_proba(&self, query: &[f64]) -> Result<ProbabilityDistribution> {
        match self {
            Probe::Knn(p) => p.predict_proba(query),
            Probe::Linear(p) => p.predict_proba(query),
        }
    }

    pub fn predict_proba_batch(&self, queries: &DenseMatrix) -> Result<Vec<ProbabilityDistribution>> {
        match self {
            Probe::Knn(p) => p.predict_proba_batch(queries),
            Probe::Linear(p) => p.predict_proba_batch(queries),
        }
    }

    pub fn predict_label(&self, query: &[f64]) -> Result<usize> {
        Ok(predict_label(&self.predict_proba(query)?))
    }
}

/// `argmax_tiebreak` of a probe distribution.
pub fn predict_label(dist: &ProbabilityDistribution) -> usize {
    argmax_unchecked(dist.probs())
}

/// Probe kinds and hyperparameters for a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSettings {
    pub kinds: Vec<ProbeKind>,
    pub k: usize,
    pub lr: LrHyper,
    pub svm: SvmHyper,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            kinds: ProbeKind::ALL.to_vec(),
            k: DEFAULT_K,
            lr: LrHyper::default(),
            svm: SvmHyper::default(),
        }
    }
}

impl ProbeSettings {
    pub fn fit(
        &self,
        kind: ProbeKind,
        embeddings: &DenseMatrix,
        labels: &[usize],
        num_classes: usize,
    ) -> Result<Probe> {
        Ok(match kind {
            ProbeKind::Knn => Probe::Knn(fit_knn(embeddings, labels, self.k, num_classes)?),
            ProbeKind::Lr => Probe::Linear(fit_lr(embeddings, labels, num_classes, self.lr)?),
            ProbeKind::Svm => Probe::Linear(fit_svm(embeddings, labels, num_classes, self.svm)?),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ProbeManifest {
    kind: ProbeKind,
    num_classes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fit: Option<FitRecord>,
    tensors: Vec<String>,
}

/// Writes `{stem}.json` plus its tensors (`{stem}.*.emb1` / `.lbl1`) into `dir`.
pub fn save_probe(probe: &Probe, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
    let dir = dir.as_ref();
    let manifest = match probe {
        Probe::Knn(p) => {
            let (r, l) = (format!("{stem}.reference.emb1"), format!("{stem}.labels.lbl1"));
            container::write_emb1_f64(dir.join(&r), &p.reference)?;
            container::write_lbl1(dir.join(&l), &p.labels)?;
            ProbeManifest {
                kind: ProbeKind::Knn,
                num_classes: p.num_classes,
                k: Some(p.k),
                fit: None,
                tensors: vec![r, l],
            }
        }
        Probe::Linear(p) => {
            let (w, b) = (format!("{stem}.weights.emb1"), format!("{stem}.biases.emb1"));
            container::write_emb1_f64(dir.join(&w), &p.weights)?;
            container::write_emb1_f64(
                dir.join(&b),
                &DenseMatrix::from_raw(1, p.biases.len(), p.biases.clone()),
            )?;
            ProbeManifest {
                kind: p.kind,
                num_classes: p.num_classes(),
                k: None,
                fit: Some(p.fit.clone()),
                tensors: vec![w, b],
            }
        }
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    let path = dir.join(format!("{stem}.json"));
    container::write_atomic(&path, |w| std::io::Write::write_all(w, &json))
}

pub fn load_probe(dir: impl AsRef<Path>, stem: &str) -> Result<Probe> {
    let dir = dir.as_ref();
    let path = dir.join(format!("{stem}.json"));
    let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: ProbeManifest = serde_json::from_slice(&text)?;
    let tensor = |i: usize| -> Result<std::path::PathBuf> {
        m.tensors
            .get(i)
            .map(|t| dir.join(t))
            .ok_or_else(|| Error::format(&path, 0, "probe manifest lists too few tensors"))
    };
    match m.kind {
        ProbeKind::Knn => {
            let reference = container::read_emb1_any(tensor(0)?)?;
            let labels = container::read_lbl1(tensor(1)?)?;
            let k = m.k.ok_or_else(|| Error::format(&path, 0, "knn manifest without k"))?;
            Ok(Probe::Knn(fit_knn(&reference, &labels, k, m.num_classes)?))
        }
        kind => {
            let weights = container::read_emb1_any(tensor(0)?)?;
            let biases = container::read_emb1_any(tensor(1)?)?.into_data();
            let fit = m
                .fit
                .ok_or_else(|| Error::format(&path, 0, "linear manifest without fit record"))?;
            Ok(Probe::Linear(LinearProbe::new(kind, weights, biases, fit)?))
        }
    }
}

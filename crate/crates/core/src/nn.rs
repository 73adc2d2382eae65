//! Desk-scale multilayer perceptron with hand-coded backpropagation.
//!
//! Hidden layers use a rectifier, the output layer is affine, and the loss is
//! softmax cross-entropy. Training is plain minibatch SGD.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{seeded_rng, LabeledDataset};
use crate::error::{Error, Result};
use crate::math::{argmax_unchecked, DenseMatrix};

/// Hidden width of the two-affine-layer preset.
pub const MLP640_HIDDEN: usize = 640;

/// One affine map `z = W·a + b`, with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl AffineLayer {
    fn zeros_like(&self) -> Self {
        Self {
            weights: DenseMatrix::zeros(self.weights.rows(), self.weights.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn num_params(&self) -> usize {
        self.weights.data().len() + self.bias.len()
    }

    fn param_mut(&mut self, idx: usize) -> &mut f64 {
        let nw = self.weights.data().len();
        if idx < nw {
            &mut self.weights.data_mut()[idx]
        } else {
            &mut self.bias[idx - nw]
        }
    }

    fn param(&self, idx: usize) -> f64 {
        let nw = self.weights.data().len();
        if idx < nw {
            self.weights.data()[idx]
        } else {
            self.bias[idx - nw]
        }
    }

    /// `a·Wᵀ + b` for a batch `a` of row vectors.
    fn apply(&self, a: &DenseMatrix) -> DenseMatrix {
        let mut z = a.matmul_transposed(&self.weights);
        let width = z.cols();
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        debug_assert_eq!(width, self.bias.len());
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_sizes: Vec<usize>,
    layers: Vec<AffineLayer>,
}

/// Gradients laid out exactly like the model's parameters.
pub type Gradients = Vec<AffineLayer>;

/// Validates `layer_sizes` and draws He-normal weights with zero biases.
pub fn init_mlp(layer_sizes: &[usize], seed: u64) -> Result<MlpModel> {
    validate_sizes(layer_sizes)?;
    let mut rng = seeded_rng(seed, 10);
    let layers = layer_sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = (2.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            AffineLayer {
                weights: DenseMatrix::from_raw(fan_out, fan_in, data),
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    Ok(MlpModel {
        layer_sizes: layer_sizes.to_vec(),
        layers,
    })
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::invalid(format!(
            "an MLP needs input and output sizes, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::invalid(format!(
            "layer sizes must be positive, got {layer_sizes:?}"
        )));
    }
    Ok(())
}

/// Activations captured at one named position in the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Tap {
    pub name: String,
    pub activations: DenseMatrix,
}

/// All taps of one forward pass, in canonical order: input, hidden..., logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub taps: Vec<Tap>,
}

impl ForwardPass {
    /// The last tap before the output affine layer.
    pub fn embedding(&self) -> &Tap {
        &self.taps[self.taps.len() - 2]
    }

    pub fn logits(&self) -> &DenseMatrix {
        &self.taps[self.taps.len() - 1].activations
    }

    pub fn into_taps(self) -> Vec<Tap> {
        self.taps
    }
}

/// Canonical tap names for a network with `num_hidden` hidden layers.
pub fn tap_names(num_hidden: usize) -> Vec<String> {
    std::iter::once("input".to_string())
        .chain((1..=num_hidden).map(|i| format!("hidden{i}")))
        .chain(std::iter::once("logits".to_string()))
        .collect()
}

impl MlpModel {
    /// Builds a model from explicit parameters (e.g. a loaded checkpoint).
    pub fn from_layers(layers: Vec<AffineLayer>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::invalid("model has no layers"))?;
        let mut sizes = vec![first.weights.cols()];
        for (i, layer) in layers.iter().enumerate() {
            if layer.weights.cols() != *sizes.last().unwrap() {
                return Err(Error::invalid(format!(
                    "layer {i} input width does not match the previous output"
                )));
            }
            if layer.bias.len() != layer.weights.rows() {
                return Err(Error::invalid(format!(
                    "layer {i} bias length does not match its output width"
                )));
            }
            if !layer.weights.is_finite() || layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::invalid(format!("layer {i} has non-finite parameters")));
            }
            sizes.push(layer.weights.rows());
        }
        validate_sizes(&sizes)?;
        Ok(Self {
            layer_sizes: sizes,
            layers,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn layers(&self) -> &[AffineLayer] {
        &self.layers
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_hidden(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(AffineLayer::num_params).sum()
    }

    /// Parameter by flat index (layer by layer, weights row-major then biases).
    pub fn param(&self, idx: usize) -> f64 {
        let (layer, local) = self.locate(idx);
        self.layers[layer].param(local)
    }

    pub fn set_param(&mut self, idx: usize, value: f64) {
        let (layer, local) = self.locate(idx);
        *self.layers[layer].param_mut(local) = value;
    }

    fn locate(&self, mut idx: usize) -> (usize, usize) {
        for (l, layer) in self.layers.iter().enumerate() {
            if idx < layer.num_params() {
                return (l, idx);
            }
            idx -= layer.num_params();
        }
        panic!("parameter index out of range");
    }

    fn check_batch(&self, batch: &DenseMatrix) -> Result<()> {
        if batch.cols() != self.input_size() {
            return Err(Error::invalid(format!(
                "batch has {} columns, model expects {}",
                batch.cols(),
                self.input_size()
            )));
        }
        Ok(())
    }

    /// Forward pass keeping every tap point.
    pub fn forward_all(&self, batch: &DenseMatrix) -> Result<ForwardPass> {
        self.check_batch(batch)?;
        let names = tap_names(self.num_hidden());
        let activations = self.forward_activations(batch);
        Ok(ForwardPass {
            taps: names
                .into_iter()
                .zip(activations)
                .map(|(name, activations)| Tap { name, activations })
                .collect(),
        })
    }

    /// Output-layer scores only.
    pub fn logits(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_batch(batch)?;
        let mut a = batch.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            a = layer.apply(&a);
            if l + 1 < self.layers.len() {
                relu_in_place(&mut a);
            }
        }
        Ok(a)
    }

    fn forward_activations(&self, batch: &DenseMatrix) -> Vec<DenseMatrix> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(batch.clone());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.apply(acts.last().unwrap());
            if l + 1 < self.layers.len() {
                relu_in_place(&mut z);
            }
            acts.push(z);
        }
        acts
    }

    /// Hard predictions (lowest index on ties).
    pub fn predict(&self, batch: &DenseMatrix) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        Ok(logits.row_iter().map(argmax_unchecked).collect())
    }

    /// Fraction of rows whose prediction equals the label.
    pub fn accuracy(&self, ds: &LabeledDataset) -> Result<f64> {
        let pred = self.predict(&ds.features)?;
        Ok(accuracy(&pred, &ds.labels))
    }

    /// Mean softmax cross-entropy plus `(weight_decay/2)·Σ‖W‖²`.
    pub fn loss(&self, batch: &DenseMatrix, labels: &[usize], weight_decay: f64) -> Result<f64> {
        let logits = self.logits(batch)?;
        check_labels(labels, batch.rows(), self.num_classes())?;
        Ok(mean_cross_entropy(&logits, labels) + self.decay_penalty(weight_decay))
    }

    fn decay_penalty(&self, weight_decay: f64) -> f64 {
        if weight_decay == 0.0 {
            return 0.0;
        }
        0.5 * weight_decay * self.layers.iter().map(|l| l.weights.norm_sq()).sum::<f64>()
    }

    /// Loss and its exact gradient with respect to every parameter.
    pub fn loss_and_gradients(
        &self,
        batch: &DenseMatrix,
        labels: &[usize],
        weight_decay: f64,
    ) -> Result<(f64, Gradients)> {
        self.check_batch(batch)?;
        check_labels(labels, batch.rows(), self.num_classes())?;
        let acts = self.forward_activations(batch);
        let logits = acts.last().unwrap();
        let n = batch.rows().max(1) as f64;
        let loss = mean_cross_entropy(logits, labels) + self.decay_penalty(weight_decay);

        // dL/dz at the output: (softmax - onehot) / n
        let mut delta = logits.clone();
        for (r, &label) in labels.iter().enumerate() {
            let row = delta.row_mut(r);
            crate::math::softmax_in_place(row);
            row[label] -= 1.0;
            row.iter_mut().for_each(|v| *v /= n);
        }

        let mut grads: Gradients = self.layers.iter().map(AffineLayer::zeros_like).collect();
        for l in (0..self.layers.len()).rev() {
            let input = &acts[l];
            let mut gw = delta.transpose_matmul(input);
            if weight_decay != 0.0 {
                for (g, w) in gw.data_mut().iter_mut().zip(self.layers[l].weights.data()) {
                    *g += weight_decay * w;
                }
            }
            let mut gb = vec![0.0; delta.cols()];
            for row in delta.row_iter() {
                for (g, v) in gb.iter_mut().zip(row) {
                    *g += v;
                }
            }
            grads[l] = AffineLayer { weights: gw, bias: gb };
            if l > 0 {
                let mut upstream = delta.matmul(&self.layers[l].weights);
                for (u, a) in upstream.data_mut().iter_mut().zip(input.data()) {
                    if *a <= 0.0 {
                        *u = 0.0;
                    }
                }
                delta = upstream;
            }
        }
        Ok((loss, grads))
    }

    fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (layer, grad) in self.layers.iter_mut().zip(grads) {
            for (w, g) in layer.weights.data_mut().iter_mut().zip(grad.weights.data()) {
                *w -= lr * g;
            }
            for (b, g) in layer.bias.iter_mut().zip(&grad.bias) {
                *b -= lr * g;
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

fn relu_in_place(m: &mut DenseMatrix) {
    for v in m.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn check_labels(labels: &[usize], rows: usize, num_classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::invalid(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|l| **l >= num_classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {num_classes} outputs"
        )));
    }
    Ok(())
}

/// Mean of `logsumexp(z) - z[label]` over rows, zero for an empty batch.
fn mean_cross_entropy(logits: &DenseMatrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let total: f64 = logits
        .row_iter()
        .zip(labels)
        .map(|(z, &y)| {
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - z[y]
        })
        .sum();
    total / labels.len() as f64
}

pub(crate) fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub lr: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub checkpoint_every: u64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            lr: 0.05,
            batch_size: 64,
            total_steps: 10_000,
            checkpoint_every: 250,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self, n_train: usize) -> Result<()> {
        self.problem(n_train)
            .map_or(Ok(()), |(_, message)| Err(Error::invalid(message)))
    }

    /// First offending field name and a message naming it.
    pub fn problem(&self, n_train: usize) -> Option<(&'static str, String)> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Some(("lr", format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.batch_size > n_train {
            return Some((
                "batch_size",
                format!("batch_size {} must be in 1..={n_train}", self.batch_size),
            ));
        }
        if self.checkpoint_every == 0 || (self.total_steps > 0 && self.checkpoint_every > self.total_steps) {
            return Some((
                "checkpoint_every",
                format!(
                    "checkpoint_every {} must be in 1..=total_steps ({})",
                    self.checkpoint_every, self.total_steps
                ),
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return Some(("weight_decay", "weight_decay must be nonnegative".to_string()));
        }
        None
    }

    /// Step 0, every multiple of `checkpoint_every`, and the final step.
    pub fn checkpoint_steps(&self) -> Vec<u64> {
        let mut steps: Vec<u64> = (0..=self.total_steps)
            .step_by(self.checkpoint_every.max(1) as usize)
            .collect();
        if *steps.last().unwrap() != self.total_steps {
            steps.push(self.total_steps);
        }
        steps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub step: u64,
    pub params: MlpModel,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Full-split training loss (including any weight decay term).
    pub train_loss: f64,
}

/// Outcome of [`train_until_failure`]: the checkpoints written, and the
/// divergence that stopped training early, if any.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoints: Vec<CheckpointRecord>,
    pub failure: Option<Divergence>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub step: u64,
    pub loss: f64,
}

impl From<Divergence> for Error {
    fn from(d: Divergence) -> Self {
        Error::TrainingFailure {
            step: d.step,
            loss: d.loss,
        }
    }
}

/// Minibatch SGD on softmax cross-entropy; divergence is an error.
pub fn train(
    model: &MlpModel,
    train: &LabeledDataset,
    test: &LabeledDataset,
    schedule: &TrainSchedule,
) -> Result<Vec<CheckpointRecord>> {
    let run = train_until_failure(model, train, test, schedule)?;
    match run.failure {
        Some(d) => Err(d.into()),
        None => Ok(run.checkpoints),
    }
}

/// Like [`train`], but a non-finite loss ends the run and keeps the
/// checkpoints already taken.
///
/// Batches walk a seeded permutation of the training set, which is reshuffled
/// whenever fewer than `batch_size` rows remain.
pub fn train_until_failure(
    model: &MlpModel,
    train: &LabeledDataset,
    test: &LabeledDataset,
    schedule: &TrainSchedule,
) -> Result<TrainRun> {
    schedule.validate(train.len())?;
    for split in [train, test] {
        if split.num_features() != model.input_size() {
            return Err(Error::invalid(format!(
                "dataset {} has {} features, model expects {}",
                split.name,
                split.num_features(),
                model.input_size()
            )));
        }
        check_labels(&split.labels, split.len(), model.num_classes())?;
    }

    let checkpoint = |model: &MlpModel, step: u64| -> std::result::Result<CheckpointRecord, Divergence> {
        let train_loss = model
            .loss(&train.features, &train.labels, schedule.weight_decay)
            .expect("shapes validated above");
        if !train_loss.is_finite() {
            return Err(Divergence { step, loss: train_loss });
        }
        Ok(CheckpointRecord {
            step,
            params: model.clone(),
            train_accuracy: model.accuracy(train).expect("shapes validated above"),
            test_accuracy: model.accuracy(test).expect("shapes validated above"),
            train_loss,
        })
    };

    let mut model = model.clone();
    let mut checkpoints = Vec::new();
    let stop = |checkpoints, d| {
        Ok(TrainRun {
            checkpoints,
            failure: Some(d),
        })
    };
    match checkpoint(&model, 0) {
        Ok(r) => checkpoints.push(r),
        Err(d) => return stop(checkpoints, d),
    }

    let mut rng = seeded_rng(schedule.seed, 11);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    for step in 1..=schedule.total_steps {
        if cursor + schedule.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + schedule.batch_size];
        cursor += schedule.batch_size;
        let batch = train.features.select_rows(idx);
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let (loss, grads) = model
            .loss_and_gradients(&batch, &labels, schedule.weight_decay)
            .expect("shapes validated above");
        if !loss.is_finite() {
            return stop(checkpoints, Divergence { step, loss });
        }
        model.sgd_step(&grads, schedule.lr);
        if !model.all_finite() {
            return stop(checkpoints, Divergence { step, loss: f64::NAN });
        }
        if step % schedule.checkpoint_every == 0 || step == schedule.total_steps {
            match checkpoint(&model, step) {
                Ok(r) => checkpoints.push(r),
                Err(d) => return stop(checkpoints, d),
            }
        }
    }
    Ok(TrainRun {
        checkpoints,
        failure: None,
    })
}

/// Central-difference check of analytic gradients on a random parameter sample.
///
/// Returns the largest `|analytic - numeric| / |numeric|` (zero when both are
/// zero, and `|analytic|`-relative when only the numeric value is zero).
pub fn gradient_check(model: &MlpModel, batch: &DenseMatrix, labels: &[usize], epsilon: f64) -> Result<f64> {
    let (_, grads) = model.loss_and_gradients(batch, labels, 0.0)?;
    compare_gradients(model, batch, labels, epsilon, &grads, 0)
}

/// Parameter count sampled by [`gradient_check`] (or every parameter if fewer).
pub const GRADIENT_CHECK_SAMPLES: usize = 128;

/// Compares supplied gradients to central differences of [`MlpModel::loss`].
pub fn compare_gradients(
    model: &MlpModel,
    batch: &DenseMatrix,
    labels: &[usize],
    epsilon: f64,
    grads: &Gradients,
    seed: u64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let total = model.num_params();
    let indices: Vec<usize> = if total <= GRADIENT_CHECK_SAMPLES {
        (0..total).collect()
    } else {
        let mut rng = seeded_rng(seed, 12);
        (0..GRADIENT_CHECK_SAMPLES)
            .map(|_| rng.random_range(0..total))
            .collect()
    };
    let flat = |idx: usize| {
        let mut rest = idx;
        for g in grads {
            if rest < g.num_params() {
                return g.param(rest);
            }
            rest -= g.num_params();
        }
        panic!("gradient index out of range");
    };
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for idx in indices {
        let original = model.param(idx);
        probe.set_param(idx, original + epsilon);
        let plus = probe.loss(batch, labels, 0.0)?;
        probe.set_param(idx, original - epsilon);
        let minus = probe.loss(batch, labels, 0.0)?;
        probe.set_param(idx, original);
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max(relative_error(flat(idx), numeric));
    }
    Ok(worst)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        0.0
    } else if numeric != 0.0 {
        diff / numeric.abs()
    } else {
        diff / analytic.abs()
    }
}

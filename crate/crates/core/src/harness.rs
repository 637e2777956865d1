//! Synthetic Gaussian-blob data and a small fully connected network trained
//! with mini-batch SGD, emitting per-layer activations while it trains.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::{ActivationBatch, BatchError};
use crate::io::INPUT_LAYER_ID;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    DivergedTraining { iteration: u32, loss: f64 },
    #[error(transparent)]
    Batch(#[from] BatchError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Class means are drawn i.i.d. from `N(0, separation² I)`; samples add
/// isotropic `N(0, noise² I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticDataset {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 16,
            samples_per_class: 200,
            separation: 1.5,
            noise: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticDataset {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(HarnessError::InvalidSpec(format!("{} classes", self.num_classes)));
        }
        if self.dim < 2 {
            return Err(HarnessError::InvalidSpec(format!("dimension {}", self.dim)));
        }
        if self.samples_per_class == 0 {
            return Err(HarnessError::InvalidSpec("no samples per class".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(HarnessError::InvalidSpec(format!("noise {}", self.noise)));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(HarnessError::InvalidSpec(format!("separation {}", self.separation)));
        }
        Ok(())
    }
}

/// Generated samples, ordered by class.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub means: Vec<Vec<f64>>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    /// Sample indices of each class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }
}

pub fn generate_dataset(spec: &SyntheticDataset) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut gauss = |scale: f64| -> f64 {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    };
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..spec.dim).map(|_| gauss(spec.separation)).collect())
        .collect();
    let mut inputs = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    let mut labels = Vec::with_capacity(inputs.capacity());
    for (k, mean) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            inputs.push(mean.iter().map(|&m| m + gauss(spec.noise)).collect());
            labels.push(k);
        }
    }
    Ok(Dataset {
        inputs,
        labels,
        means,
        num_classes: spec.num_classes,
    })
}

/// Predicts the class whose mean is closest in Euclidean distance.
pub fn nearest_mean_predict(means: &[Vec<f64>], x: &[f64]) -> usize {
    let d2 = |m: &Vec<f64>| m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    means
        .iter()
        .enumerate()
        .min_by(|a, b| d2(a.1).total_cmp(&d2(b.1)))
        .map(|(k, _)| k)
        .expect("at least one class")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `h`.
    fn derivative(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - h * h,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(format!("unknown activation {other:?} (expected relu or tanh)")),
        }
    }
}

/// Fully connected layer: `z = W x + b` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.nrows()
    }
}

/// Hidden layers use `activation`; the last layer is a softmax classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyMlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

/// Forward pass results; matrices hold one sample per row.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub pre: Vec<DMatrix<f64>>,
    /// Post-activation output of every layer; the last entry is the softmax.
    pub post: Vec<DMatrix<f64>>,
}

impl ForwardPass {
    pub fn probabilities(&self) -> &DMatrix<f64> {
        self.post.last().expect("at least one layer")
    }
}

/// Parameter gradients, shaped like [`ToyMlp::layers`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

pub fn default_widths(dim: usize, num_classes: usize) -> Vec<usize> {
    vec![dim, 32, 16, 16, num_classes]
}

impl ToyMlp {
    /// Uniform initialization: `±sqrt(6 / fan_in)` for relu and
    /// `±sqrt(6 / (fan_in + fan_out))` for tanh. Biases start at zero.
    pub fn new(widths: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(HarnessError::InvalidSpec(format!("layer widths {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = match activation {
                    Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                    Activation::Tanh => (6.0 / (fan_in + fan_out) as f64).sqrt(),
                };
                let weights = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-limit..=limit));
                Dense {
                    weights,
                    bias: DVector::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].fan_in()];
        w.extend(self.layers.iter().map(Dense::fan_out));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("at least one layer").fan_out()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<ForwardPass> {
        if x.ncols() != self.input_dim() {
            return Err(HarnessError::ShapeMismatch(format!(
                "input has {} features, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<DMatrix<f64>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let prev = if l == 0 { x } else { &post[l - 1] };
            let mut z = prev * layer.weights.transpose();
            for mut row in z.row_iter_mut() {
                row += layer.bias.transpose();
            }
            let h = if l == last {
                softmax_rows(&z)
            } else {
                z.map(|v| self.activation.apply(v))
            };
            pre.push(z);
            post.push(h);
        }
        Ok(ForwardPass { pre, post })
    }

    /// Mean cross-entropy (nats) of the batch and its parameter gradients.
    pub fn loss_and_gradients(&self, x: &DMatrix<f64>, labels: &[usize]) -> Result<(f64, Gradients, ForwardPass)> {
        let pass = self.forward(x)?;
        let loss = cross_entropy(pass.probabilities(), labels)?;
        let n = labels.len() as f64;

        // dL/dz for the softmax layer is (p - onehot) / n
        let mut delta = pass.probabilities().clone();
        for (i, &y) in labels.iter().enumerate() {
            delta[(i, y)] -= 1.0;
        }
        delta /= n;

        let mut grads = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let prev = if l == 0 { x } else { &pass.post[l - 1] };
            let dw = delta.transpose() * prev;
            let db = DVector::from_iterator(delta.ncols(), delta.column_iter().map(|c| c.sum()));
            grads.push(Dense { weights: dw, bias: db });
            if l > 0 {
                let mut back = &delta * &self.layers[l].weights;
                let z = &pass.pre[l - 1];
                let h = &pass.post[l - 1];
                for ((b, &zv), &hv) in back.iter_mut().zip(z.iter()).zip(h.iter()) {
                    *b *= self.activation.derivative(zv, hv);
                }
                delta = back;
            }
        }
        grads.reverse();
        Ok((loss, Gradients { layers: grads }, pass))
    }

    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weights -= &g.weights * lr;
            layer.bias -= &g.bias * lr;
        }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<usize>> {
        let pass = self.forward(x)?;
        Ok(pass
            .probabilities()
            .row_iter()
            .map(|r| r.transpose().argmax().0)
            .collect())
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let x = rows_to_matrix(&data.inputs.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
        let pred = self.predict(&x)?;
        Ok(accuracy(&pred, &data.labels))
    }
}

pub fn softmax_rows(z: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = z.clone();
    for mut row in p.row_iter_mut() {
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

/// Mean negative log-likelihood in nats.
pub fn cross_entropy(probs: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    if probs.nrows() != labels.len() {
        return Err(HarnessError::ShapeMismatch(format!(
            "{} probability rows, {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= probs.ncols() {
            return Err(HarnessError::ShapeMismatch(format!("label {y} with {} outputs", probs.ncols())));
        }
        let p = probs[(i, y)];
        // clamp underflow to zero, but let NaN through
        total -= if p.is_nan() { p } else { p.max(f64::MIN_POSITIVE).ln() };
    }
    Ok(total / labels.len() as f64)
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}

pub fn rows_to_matrix(rows: &[&[f64]]) -> Result<DMatrix<f64>> {
    let d = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != d) {
        return Err(HarnessError::ShapeMismatch("ragged rows".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

fn matrix_to_batch(m: &DMatrix<f64>, layer_id: u16, iteration: u32) -> Result<ActivationBatch> {
    let values: Vec<f64> = m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
    Ok(ActivationBatch::new(layer_id, iteration, vec![m.ncols()], values)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub capture_every: u32,
    pub seed: u64,
    /// Draw every mini-batch with an equal number of samples per class.
    pub stratified: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.09,
            batch_size: 100,
            epochs: 60,
            capture_every: 1,
            seed: 0,
            stratified: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(HarnessError::InvalidConfig(format!("learning rate {}", self.learning_rate)));
        }
        if self.batch_size < 2 || self.batch_size > data.len() {
            return Err(HarnessError::InvalidConfig(format!(
                "batch size {} with {} samples",
                self.batch_size,
                data.len()
            )));
        }
        if self.capture_every == 0 {
            return Err(HarnessError::InvalidConfig("capture interval 0".into()));
        }
        if self.stratified {
            if self.batch_size % data.num_classes != 0 {
                return Err(HarnessError::InvalidConfig(format!(
                    "stratified batch size {} is not a multiple of {} classes",
                    self.batch_size, data.num_classes
                )));
            }
            let per_class = self.batch_size / data.num_classes;
            if data.class_indices().iter().any(|c| c.len() < per_class) {
                return Err(HarnessError::InvalidConfig(format!(
                    "a class has fewer than {per_class} samples"
                )));
            }
        }
        Ok(())
    }
}

/// Mini-batch order for one epoch. Incomplete trailing batches are dropped.
fn epoch_batches(data: &Dataset, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    if config.stratified {
        let per_class = config.batch_size / data.num_classes;
        let mut classes = data.class_indices();
        for c in &mut classes {
            c.shuffle(rng);
        }
        let count = classes.iter().map(|c| c.len() / per_class).min().unwrap_or(0);
        (0..count)
            .map(|b| {
                let mut batch: Vec<usize> = classes
                    .iter()
                    .flat_map(|c| c[b * per_class..(b + 1) * per_class].iter().copied())
                    .collect();
                batch.shuffle(rng);
                batch
            })
            .collect()
    } else {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);
        order
            .chunks_exact(config.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }
}

/// Network state seen by one mini-batch, taken before its update.
/// Layer ids run from 1 (first hidden layer) to the softmax output.
#[derive(Debug, Clone)]
pub struct Capture {
    pub iteration: u32,
    pub input: ActivationBatch,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<ActivationBatch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: u32,
    pub epoch: usize,
    /// Mean cross-entropy of the mini-batch, in nats.
    pub loss: f64,
    /// Accuracy on the mini-batch before the update.
    pub batch_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
    /// Accuracy on the full training set after each epoch.
    pub epoch_accuracy: Vec<f64>,
    pub captured_iterations: Vec<u32>,
}

impl TrainingLog {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epoch_accuracy.last().copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,epoch,loss,batch_accuracy,train_accuracy\n");
        // train accuracy is only known at the end of an epoch
        for (i, e) in self.entries.iter().enumerate() {
            let epoch_end = self.entries.get(i + 1).is_none_or(|next| next.epoch != e.epoch);
            let train = match self.epoch_accuracy.get(e.epoch) {
                Some(a) if epoch_end => crate::io::format_significant(*a, 9),
                _ => String::new(),
            };
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.iteration,
                e.epoch,
                crate::io::format_significant(e.loss, 9),
                crate::io::format_significant(e.batch_accuracy, 9),
                train
            ));
        }
        out
    }

    /// Mean loss over the last `window` iterations up to the end of each epoch.
    pub fn trailing_epoch_losses(&self, window: usize) -> Vec<f64> {
        let epochs = self.epoch_accuracy.len();
        (0..epochs)
            .filter_map(|ep| {
                let end = self.entries.iter().rposition(|e| e.epoch == ep)? + 1;
                let start = end.saturating_sub(window);
                let slice = &self.entries[start..end];
                Some(slice.iter().map(|e| e.loss).sum::<f64>() / slice.len() as f64)
            })
            .collect()
    }
}

/// Trains `model` in place. Every `capture_every` iterations (counting from
/// 0) the forward pass of the current mini-batch is handed to `on_capture`
/// before the SGD step.
pub fn train_epochs<E, F>(
    model: &mut ToyMlp,
    data: &Dataset,
    config: &TrainConfig,
    mut on_capture: F,
) -> std::result::Result<TrainingLog, E>
where
    E: From<HarnessError>,
    F: FnMut(Capture) -> std::result::Result<(), E>,
{
    config.validate(data)?;
    if data.dim() != model.input_dim() || data.num_classes != model.num_classes() {
        return Err(HarnessError::ShapeMismatch(format!(
            "data is {}-d with {} classes, network is {:?}",
            data.dim(),
            data.num_classes,
            model.widths()
        ))
        .into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainingLog::default();
    let mut iteration: u32 = 0;
    for epoch in 0..config.epochs {
        for batch in epoch_batches(data, config, &mut rng) {
            let rows: Vec<&[f64]> = batch.iter().map(|&i| data.inputs[i].as_slice()).collect();
            let x = rows_to_matrix(&rows)?;
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let (loss, grads, pass) = model.loss_and_gradients(&x, &labels)?;
            if !loss.is_finite() {
                return Err(HarnessError::DivergedTraining { iteration, loss }.into());
            }
            let pred: Vec<usize> = pass
                .probabilities()
                .row_iter()
                .map(|r| r.transpose().argmax().0)
                .collect();
            log.entries.push(LogEntry {
                iteration,
                epoch,
                loss,
                batch_accuracy: accuracy(&pred, &labels),
            });
            if iteration % config.capture_every == 0 {
                let input = matrix_to_batch(&x, INPUT_LAYER_ID, iteration)?;
                let layers = pass
                    .post
                    .iter()
                    .enumerate()
                    .map(|(l, m)| matrix_to_batch(m, l as u16 + 1, iteration))
                    .collect::<Result<Vec<_>>>()?;
                on_capture(Capture {
                    iteration,
                    input,
                    labels,
                    num_classes: data.num_classes,
                    layers,
                })?;
                log.captured_iterations.push(iteration);
            }
            model.sgd_step(&grads, config.learning_rate);
            iteration += 1;
        }
        log.epoch_accuracy.push(model.accuracy(data)?);
    }
    Ok(log)
}

/// Smallest |pre-activation| of any hidden unit over the batch. Central
/// differences with step `h` are only valid for relu when this clearly
/// exceeds `h` times the input scale.
pub fn kink_margin(model: &ToyMlp, x: &DMatrix<f64>) -> Result<f64> {
    let pass = model.forward(x)?;
    let hidden = &pass.pre[..pass.pre.len() - 1];
    Ok(hidden
        .iter()
        .flat_map(|z| z.iter())
        .fold(f64::INFINITY, |m, v| m.min(v.abs())))
}

/// Largest per-tensor relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` between the
/// analytic gradient `g` and central differences `ĝ` with step `h`. A pair
/// of zero tensors counts as exact.
pub fn gradient_check(model: &ToyMlp, x: &DMatrix<f64>, labels: &[usize], h: f64) -> Result<f64> {
    let (_, grads, _) = model.loss_and_gradients(x, labels)?;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let loss_at = |m: &ToyMlp| -> Result<f64> { cross_entropy(m.forward(x)?.probabilities(), labels) };
    for l in 0..model.layers.len() {
        let mut fd_w = DMatrix::zeros(model.layers[l].fan_out(), model.layers[l].fan_in());
        for idx in 0..fd_w.len() {
            let orig = probe.layers[l].weights[idx];
            probe.layers[l].weights[idx] = orig + h;
            let up = loss_at(&probe)?;
            probe.layers[l].weights[idx] = orig - h;
            let down = loss_at(&probe)?;
            probe.layers[l].weights[idx] = orig;
            fd_w[idx] = (up - down) / (2.0 * h);
        }
        let mut fd_b = DVector::zeros(model.layers[l].fan_out());
        for idx in 0..fd_b.len() {
            let orig = probe.layers[l].bias[idx];
            probe.layers[l].bias[idx] = orig + h;
            let up = loss_at(&probe)?;
            probe.layers[l].bias[idx] = orig - h;
            let down = loss_at(&probe)?;
            probe.layers[l].bias[idx] = orig;
            fd_b[idx] = (up - down) / (2.0 * h);
        }
        let g = &grads.layers[l];
        worst = worst
            .max(relative_error(g.weights.as_slice(), fd_w.as_slice()))
            .max(relative_error(g.bias.as_slice(), fd_b.as_slice()));
    }
    Ok(worst)
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

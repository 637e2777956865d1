//! Information plane estimation over a stream of mini-batches.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::ActivationBatch;
use crate::entropy::{self, Alpha, DensityMatrix, EntropyError};
use crate::kernel_width::{self, GridSchedule, LabelKernelSpec, WidthError, WidthState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Width(#[from] WidthError),
    #[error("batch mismatch: {0}")]
    BatchMismatch(String),
    #[error("DPI report needs at least 2 layers, got {0}")]
    TooFewLayers(usize),
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("need at least one class")]
    NoClasses,
    #[error("layer {layer}: iteration {next} does not follow {prev}")]
    NonIncreasingIteration { layer: u16, prev: u32, next: u32 },
    #[error("smoothing window must be at least 1")]
    InvalidWindow,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Estimation settings. Defaults follow the small-network protocol: von
/// Neumann entropy, input width 8, label width 0.1, 75→50 grid candidates,
/// β = 0.9, smoothing over 10 mini-batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub alpha: Alpha,
    pub input_sigma: f64,
    pub label_kernel: LabelKernelSpec,
    pub schedule: GridSchedule,
    pub beta: f64,
    pub smoothing_window: usize,
    /// Fixed width for every layer instead of alignment selection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_sigma: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            alpha: Alpha::VON_NEUMANN,
            input_sigma: 8.0,
            label_kernel: LabelKernelSpec::default(),
            schedule: GridSchedule::small_network(),
            beta: 0.9,
            smoothing_window: 10,
            layer_sigma: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.input_sigma) {
            return Err(PipelineError::InvalidConfig(format!(
                "input sigma {}",
                self.input_sigma
            )));
        }
        if !positive(self.label_kernel.sigma_y) {
            return Err(PipelineError::InvalidConfig(format!(
                "label sigma {}",
                self.label_kernel.sigma_y
            )));
        }
        if let Some(s) = self.layer_sigma {
            if !positive(s) {
                return Err(PipelineError::InvalidConfig(format!("layer sigma {s}")));
            }
        }
        if self.smoothing_window == 0 {
            return Err(PipelineError::InvalidWindow);
        }
        self.schedule.validate()?;
        WidthState::new(0, self.beta)?;
        Ok(())
    }
}

/// Class labels of one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelBatch {
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// One (iteration, layer) point of the information plane, in bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IPPoint {
    pub iteration: u32,
    pub layer_id: u16,
    /// I(X;T)
    pub mi_input: f64,
    /// I(T;Y)
    pub mi_label: f64,
    pub sigma: f64,
    pub s_t: f64,
    pub s_x: f64,
    pub s_y: f64,
    pub s_joint_xt: f64,
    pub s_joint_ty: f64,
}

/// IP points ordered by `(iteration, layer_id)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    points: Vec<IPPoint>,
    window: usize,
}

impl Trajectory {
    /// Sorts the points and checks that each layer's iterations strictly
    /// increase.
    pub fn new(mut points: Vec<IPPoint>) -> Result<Self> {
        points.sort_by_key(|p| (p.iteration, p.layer_id));
        let mut last: BTreeMap<u16, u32> = BTreeMap::new();
        for p in &points {
            if let Some(prev) = last.insert(p.layer_id, p.iteration) {
                if prev >= p.iteration {
                    return Err(PipelineError::NonIncreasingIteration {
                        layer: p.layer_id,
                        prev,
                        next: p.iteration,
                    });
                }
            }
        }
        Ok(Self { points, window: 1 })
    }

    pub fn points(&self) -> &[IPPoint] {
        &self.points
    }

    pub fn into_points(self) -> Vec<IPPoint> {
        self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Smoothing window applied to this trajectory (1 for raw estimates).
    pub fn window(&self) -> usize {
        self.window
    }

    pub fn layers(&self) -> Vec<u16> {
        self.points
            .iter()
            .map(|p| p.layer_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Points of one layer in iteration order.
    pub fn layer(&self, layer_id: u16) -> Vec<IPPoint> {
        self.points
            .iter()
            .filter(|p| p.layer_id == layer_id)
            .copied()
            .collect()
    }
}

fn check_alignment(
    input: &ActivationBatch,
    labels: &LabelBatch,
    layers: &[ActivationBatch],
) -> Result<()> {
    let n = input.n();
    let iteration = input.iteration();
    if labels.labels.len() != n {
        return Err(PipelineError::BatchMismatch(format!(
            "{} labels for {} input samples",
            labels.labels.len(),
            n
        )));
    }
    let mut seen = BTreeSet::new();
    for b in layers {
        if b.n() != n {
            return Err(PipelineError::BatchMismatch(format!(
                "layer {} has {} samples, input has {}",
                b.layer_id(),
                b.n(),
                n
            )));
        }
        if b.iteration() != iteration {
            return Err(PipelineError::BatchMismatch(format!(
                "layer {} is stamped iteration {}, input is {}",
                b.layer_id(),
                b.iteration(),
                iteration
            )));
        }
        if !seen.insert(b.layer_id()) {
            return Err(PipelineError::BatchMismatch(format!(
                "layer {} appears twice",
                b.layer_id()
            )));
        }
    }
    Ok(())
}

/// Width used when a layer's activations are all identical and no EMA history
/// exists. Any width gives the same all-ones kernel in that case.
const DEGENERATE_LAYER_SIGMA: f64 = 1.0;

/// Estimates I(X;T) and I(T;Y) for every layer of one mini-batch.
///
/// The input density matrix is built once at `config.input_sigma`. Each
/// layer's width is chosen by label alignment (or fixed by
/// `config.layer_sigma`), folded into that layer's EMA state, and the tensor
/// kernel at the smoothed width gives the layer's density matrix. Layers whose
/// activations are all identical keep their previous width.
pub fn process_iteration(
    input: &ActivationBatch,
    labels: &LabelBatch,
    layers: &[ActivationBatch],
    width_states: &mut BTreeMap<u16, WidthState>,
    config: &PipelineConfig,
) -> Result<Vec<IPPoint>> {
    config.validate()?;
    check_alignment(input, labels, layers)?;
    let iteration = input.iteration();
    let alpha = config.alpha;

    let label_gram = kernel_width::label_gram(&labels.labels, &config.label_kernel, labels.num_classes)?;
    let a_y = entropy::normalize_gram(&label_gram)?;
    let a_x = entropy::tensor_gram(input, config.input_sigma)?;
    let (s_x, s_y) = rayon::join(
        || entropy::renyi_entropy(&a_x, alpha),
        || entropy::renyi_entropy(&a_y, alpha),
    );
    let (s_x, s_y) = (s_x?, s_y?);

    let grid = config.schedule.grid_at(iteration)?;
    let candidates: Vec<Option<f64>> = layers
        .par_iter()
        .map(|b| {
            if let Some(fixed) = config.layer_sigma {
                return Ok(Some(fixed));
            }
            let samples: Vec<&[f64]> = b.samples().collect();
            match kernel_width::select_sigma(&samples, &label_gram, &grid) {
                Ok(s) => Ok(Some(s)),
                Err(WidthError::DegenerateDistances) => Ok(None),
                Err(e) => Err(PipelineError::from(e)),
            }
        })
        .collect::<Result<_>>()?;

    let mut sigmas = Vec::with_capacity(layers.len());
    for (b, candidate) in layers.iter().zip(candidates) {
        let state = match width_states.entry(b.layer_id()) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(WidthState::new(b.layer_id(), config.beta)?)
            }
        };
        let sigma = match candidate {
            Some(star) => state.update(star)?,
            None => state.current_sigma.unwrap_or(DEGENERATE_LAYER_SIGMA),
        };
        sigmas.push(sigma);
    }

    layers
        .par_iter()
        .zip(sigmas)
        .map(|(b, sigma)| layer_point(b, sigma, &a_x, s_x, &a_y, s_y, alpha))
        .collect()
}

fn layer_point(
    batch: &ActivationBatch,
    sigma: f64,
    a_x: &DensityMatrix,
    s_x: f64,
    a_y: &DensityMatrix,
    s_y: f64,
    alpha: Alpha,
) -> Result<IPPoint> {
    let a_t = entropy::tensor_gram(batch, sigma)?;
    let s_t = entropy::renyi_entropy(&a_t, alpha)?;
    let xt = entropy::mutual_information_with_marginals(a_x, s_x, &a_t, s_t, alpha)?;
    let ty = entropy::mutual_information_with_marginals(&a_t, s_t, a_y, s_y, alpha)?;
    Ok(IPPoint {
        iteration: batch.iteration(),
        layer_id: batch.layer_id(),
        mi_input: xt.value(),
        mi_label: ty.value(),
        sigma,
        s_t,
        s_x,
        s_y,
        s_joint_xt: xt.s_joint,
        s_joint_ty: ty.s_joint,
    })
}

/// Stateful driver: keeps per-layer width history and accumulates points.
#[derive(Debug, Clone)]
pub struct IpEstimator {
    config: PipelineConfig,
    states: BTreeMap<u16, WidthState>,
    points: Vec<IPPoint>,
    last_iteration: Option<u32>,
}

impl IpEstimator {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            states: BTreeMap::new(),
            points: Vec::new(),
            last_iteration: None,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn width_states(&self) -> &BTreeMap<u16, WidthState> {
        &self.states
    }

    /// Iterations must arrive in increasing order.
    pub fn process(
        &mut self,
        input: &ActivationBatch,
        labels: &LabelBatch,
        layers: &[ActivationBatch],
    ) -> Result<&[IPPoint]> {
        if let Some(prev) = self.last_iteration {
            if input.iteration() <= prev {
                return Err(PipelineError::BatchMismatch(format!(
                    "iteration {} arrived after {}",
                    input.iteration(),
                    prev
                )));
            }
        }
        let new = process_iteration(input, labels, layers, &mut self.states, &self.config)?;
        self.last_iteration = Some(input.iteration());
        let start = self.points.len();
        self.points.extend(new);
        Ok(&self.points[start..])
    }

    pub fn trajectory(&self) -> Result<Trajectory> {
        Trajectory::new(self.points.clone())
    }
}

/// Trailing moving average over up to `k` points of the same layer.
///
/// Mutual information and all entropy components are averaged, so the
/// smoothed points still satisfy `mi = marginals - joint`. Widths are kept
/// raw.
pub fn smooth_trajectory(traj: &Trajectory, k: usize) -> Result<Trajectory> {
    if k == 0 {
        return Err(PipelineError::InvalidWindow);
    }
    let mut out = traj.points.clone();
    let mut by_layer: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, p) in traj.points.iter().enumerate() {
        by_layer.entry(p.layer_id).or_default().push(i);
    }
    for idx in by_layer.values() {
        for (pos, &target) in idx.iter().enumerate() {
            let window = &idx[pos.saturating_sub(k - 1)..=pos];
            let m = window.len() as f64;
            let mean = |f: fn(&IPPoint) -> f64| window.iter().map(|&i| f(&traj.points[i])).sum::<f64>() / m;
            let p = &mut out[target];
            p.mi_input = mean(|p| p.mi_input);
            p.mi_label = mean(|p| p.mi_label);
            p.s_t = mean(|p| p.s_t);
            p.s_x = mean(|p| p.s_x);
            p.s_y = mean(|p| p.s_y);
            p.s_joint_xt = mean(|p| p.s_joint_xt);
            p.s_joint_ty = mean(|p| p.s_joint_ty);
        }
    }
    Ok(Trajectory {
        points: out,
        window: k,
    })
}

/// Mean of `I(X;T_upper) - I(X;T_lower)` for one adjacent layer pair.
/// Nonnegative values agree with the data processing inequality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpiPair {
    pub upper: u16,
    pub lower: u16,
    pub mean_difference: f64,
    pub iterations: usize,
}

/// Adjacent-layer DPI differences, layers ordered by id.
pub fn dpi_report(traj: &Trajectory) -> Result<Vec<DpiPair>> {
    let layers = traj.layers();
    if layers.len() < 2 {
        return Err(PipelineError::TooFewLayers(layers.len()));
    }
    let by_key: BTreeMap<(u16, u32), f64> = traj
        .points
        .iter()
        .map(|p| ((p.layer_id, p.iteration), p.mi_input))
        .collect();
    Ok(layers
        .windows(2)
        .map(|w| {
            let (upper, lower) = (w[0], w[1]);
            let diffs: Vec<f64> = traj
                .points
                .iter()
                .filter(|p| p.layer_id == upper)
                .filter_map(|p| by_key.get(&(lower, p.iteration)).map(|l| p.mi_input - l))
                .collect();
            let mean_difference = if diffs.is_empty() {
                f64::NAN
            } else {
                diffs.iter().sum::<f64>() / diffs.len() as f64
            };
            DpiPair {
                upper,
                lower,
                mean_difference,
                iterations: diffs.len(),
            }
        })
        .collect())
}

/// Number of pairs with mean difference at least `-tolerance`.
pub fn dpi_compliant_pairs(pairs: &[DpiPair], tolerance: f64) -> usize {
    pairs
        .iter()
        .filter(|p| p.mean_difference >= -tolerance)
        .count()
}

/// Entropy of the ideal label kernel: `-Σ (n_k/N) log2(n_k/N)`.
pub fn expected_label_entropy(class_counts: &[usize]) -> Result<f64> {
    if class_counts.is_empty() {
        return Err(PipelineError::NoClasses);
    }
    if let Some(k) = class_counts.iter().position(|&c| c == 0) {
        return Err(PipelineError::EmptyClass(k));
    }
    let total: usize = class_counts.iter().sum();
    let total = total as f64;
    let h: f64 = class_counts
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum();
    Ok(h.max(0.0))
}

pub fn class_counts(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for &l in labels {
        if l < num_classes {
            counts[l] += 1;
        }
    }
    counts
}

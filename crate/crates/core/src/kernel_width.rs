//! Per-layer kernel width selection.
//!
//! Candidate widths are spread linearly over `[lo, hi] × mean pairwise
//! distance`; the one whose Gram matrix best aligns with the label kernel
//! wins, and an exponential moving average smooths the choice across
//! iterations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::{self, EntropyError, GramMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WidthError {
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error("Gram matrices differ in size: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },
    #[error("Gram matrix has zero Frobenius norm")]
    ZeroNorm,
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("all activations are identical (mean pairwise distance is 0)")]
    DegenerateDistances,
    #[error("invalid width grid: lo={lo}, hi={hi}, samples={n_samples}")]
    InvalidGrid { lo: f64, hi: f64, n_samples: usize },
    #[error("kernel width must be positive and finite, got {0}")]
    NonPositiveSigma(f64),
    #[error("EMA coefficient must lie in [0, 1], got {0}")]
    InvalidBeta(f64),
    #[error("label {label} at position {index} is outside [0, {num_classes})")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
}

pub type Result<T> = std::result::Result<T, WidthError>;

/// Linear grid of width multipliers relative to the mean pairwise distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WidthGrid {
    pub multiplier_lo: f64,
    pub multiplier_hi: f64,
    pub n_samples: usize,
}

impl WidthGrid {
    pub fn new(multiplier_lo: f64, multiplier_hi: f64, n_samples: usize) -> Result<Self> {
        let grid = Self {
            multiplier_lo,
            multiplier_hi,
            n_samples,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.multiplier_lo.is_finite()
            && self.multiplier_hi.is_finite()
            && self.multiplier_lo > 0.0
            && self.multiplier_lo < self.multiplier_hi
            && self.n_samples >= 2;
        if ok {
            Ok(())
        } else {
            Err(WidthError::InvalidGrid {
                lo: self.multiplier_lo,
                hi: self.multiplier_hi,
                n_samples: self.n_samples,
            })
        }
    }

    /// Candidate widths, ascending, for a batch whose mean pairwise distance
    /// is `scale`.
    pub fn sigmas(&self, scale: f64) -> Vec<f64> {
        let steps = (self.n_samples - 1) as f64;
        let span = self.multiplier_hi - self.multiplier_lo;
        (0..self.n_samples)
            .map(|i| scale * (self.multiplier_lo + span * i as f64 / steps))
            .collect()
    }
}

impl Default for WidthGrid {
    fn default() -> Self {
        Self {
            multiplier_lo: 0.1,
            multiplier_hi: 10.0,
            n_samples: 75,
        }
    }
}

/// Grid resolution that drops from `stage1` to `stage2` samples once training
/// reaches `switch_iteration`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSchedule {
    pub multiplier_lo: f64,
    pub multiplier_hi: f64,
    pub stage1_samples: usize,
    pub stage2_samples: usize,
    pub switch_iteration: u32,
}

impl GridSchedule {
    /// 75 then 50 candidates, for small networks.
    pub fn small_network() -> Self {
        Self {
            multiplier_lo: 0.1,
            multiplier_hi: 10.0,
            stage1_samples: 75,
            stage2_samples: 50,
            switch_iteration: 500,
        }
    }

    /// 300 then 100 candidates, for large networks.
    pub fn large_network() -> Self {
        Self {
            stage1_samples: 300,
            stage2_samples: 100,
            ..Self::small_network()
        }
    }

    pub fn grid_at(&self, iteration: u32) -> Result<WidthGrid> {
        let n_samples = if iteration < self.switch_iteration {
            self.stage1_samples
        } else {
            self.stage2_samples
        };
        WidthGrid::new(self.multiplier_lo, self.multiplier_hi, n_samples)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid_at(0)?;
        self.grid_at(self.switch_iteration).map(|_| ())
    }
}

impl Default for GridSchedule {
    fn default() -> Self {
        Self::small_network()
    }
}

/// EMA state of one layer's kernel width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WidthState {
    pub layer_id: u16,
    pub current_sigma: Option<f64>,
    pub beta: f64,
    /// Number of updates applied so far.
    pub iteration: u32,
}

impl WidthState {
    pub fn new(layer_id: u16, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(WidthError::InvalidBeta(beta));
        }
        Ok(Self {
            layer_id,
            current_sigma: None,
            beta,
            iteration: 0,
        })
    }

    /// Applies one EMA step in place and returns the new width.
    pub fn update(&mut self, sigma_star: f64) -> Result<f64> {
        *self = ema_update(self, sigma_star)?;
        Ok(self.current_sigma.expect("set by ema_update"))
    }
}

/// `σ_t = β σ_{t-1} + (1 - β) σ*_t`, with `σ_1 = σ*_1`.
pub fn ema_update(state: &WidthState, sigma_star: f64) -> Result<WidthState> {
    if !(sigma_star.is_finite() && sigma_star > 0.0) {
        return Err(WidthError::NonPositiveSigma(sigma_star));
    }
    let current = match state.current_sigma {
        None => sigma_star,
        Some(prev) => state.beta * prev + (1.0 - state.beta) * sigma_star,
    };
    Ok(WidthState {
        current_sigma: Some(current),
        iteration: state.iteration + 1,
        ..*state
    })
}

/// Label kernel configuration: RBF over one-hot class encodings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelKernelSpec {
    pub sigma_y: f64,
}

impl Default for LabelKernelSpec {
    fn default() -> Self {
        Self { sigma_y: 0.1 }
    }
}

/// `⟨A, B⟩_F / (‖A‖_F ‖B‖_F)`.
pub fn kernel_alignment(a: &GramMatrix, b: &GramMatrix) -> Result<f64> {
    if a.n() != b.n() {
        return Err(WidthError::SizeMismatch {
            left: a.n(),
            right: b.n(),
        });
    }
    let (a, b) = (a.values(), b.values());
    let inner = a.dot(b);
    let norms = a.norm() * b.norm();
    if norms == 0.0 {
        return Err(WidthError::ZeroNorm);
    }
    Ok(inner / norms)
}

/// Mean Euclidean distance over all pairs `i < j`.
pub fn mean_pairwise_distance<S: AsRef<[f64]>>(points: &[S]) -> Result<f64> {
    if points.len() < 2 {
        return Err(WidthError::TooFewSamples(points.len()));
    }
    let d2 = entropy::squared_distances(points)?;
    Ok(mean_distance_from_squared(&d2))
}

fn mean_distance_from_squared(d2: &nalgebra::DMatrix<f64>) -> f64 {
    let n = d2.nrows();
    let mut total = 0.0;
    for j in 0..n {
        for i in (j + 1)..n {
            total += d2[(i, j)].sqrt();
        }
    }
    total / (n * (n - 1) / 2) as f64
}

/// Alignment of each candidate width against the label kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentCurve {
    pub mean_distance: f64,
    /// `(σ, alignment)` in ascending σ.
    pub points: Vec<(f64, f64)>,
    /// Index of the maximum; ties resolve to the smallest σ.
    pub best: usize,
}

impl AlignmentCurve {
    pub fn best_sigma(&self) -> f64 {
        self.points[self.best].0
    }

    pub fn best_alignment(&self) -> f64 {
        self.points[self.best].1
    }
}

/// First index of the maximum value, so equal scores favour smaller widths.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if v <= values[b] => {}
            _ if v.is_nan() => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn alignment_curve<S: AsRef<[f64]> + Sync>(
    activations: &[S],
    label_gram: &GramMatrix,
    grid: &WidthGrid,
) -> Result<AlignmentCurve> {
    grid.validate()?;
    if activations.len() < 2 {
        return Err(WidthError::TooFewSamples(activations.len()));
    }
    if activations.len() != label_gram.n() {
        return Err(WidthError::SizeMismatch {
            left: activations.len(),
            right: label_gram.n(),
        });
    }
    let d2 = entropy::squared_distances(activations)?;
    let mean_distance = mean_distance_from_squared(&d2);
    if !(mean_distance > 0.0) {
        return Err(WidthError::DegenerateDistances);
    }
    let points = grid
        .sigmas(mean_distance)
        .into_par_iter()
        .map(|sigma| {
            let k = entropy::rbf_from_squared_distances(&d2, sigma)?;
            Ok((sigma, kernel_alignment(&k, label_gram)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = points.iter().map(|p| p.1).collect();
    let best = argmax_first(&scores).ok_or(WidthError::ZeroNorm)?;
    Ok(AlignmentCurve {
        mean_distance,
        points,
        best,
    })
}

/// `σ* = argmax_σ A(K_σ, K_y)` over the grid.
pub fn select_sigma<S: AsRef<[f64]> + Sync>(
    activations: &[S],
    label_gram: &GramMatrix,
    grid: &WidthGrid,
) -> Result<f64> {
    Ok(alignment_curve(activations, label_gram, grid)?.best_sigma())
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Vec<Vec<f64>>> {
    labels
        .iter()
        .enumerate()
        .map(|(index, &label)| {
            if label >= num_classes {
                return Err(WidthError::LabelOutOfRange {
                    index,
                    label,
                    num_classes,
                });
            }
            let mut row = vec![0.0; num_classes];
            row[label] = 1.0;
            Ok(row)
        })
        .collect()
}

/// RBF kernel over one-hot labels: 1 within a class, `exp(-2/σ_y²)` across.
pub fn label_gram(labels: &[usize], spec: &LabelKernelSpec, num_classes: usize) -> Result<GramMatrix> {
    if labels.len() < 2 {
        return Err(WidthError::TooFewSamples(labels.len()));
    }
    let encoded = one_hot(labels, num_classes)?;
    Ok(entropy::rbf_gram(&encoded, spec.sigma_y)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::{normalize_gram, von_neumann_entropy};
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gram(rows: usize, data: &[f64]) -> GramMatrix {
        GramMatrix::from_matrix(DMatrix::from_row_slice(rows, rows, data)).unwrap()
    }

    #[test]
    fn self_alignment_is_one() {
        let k = gram(3, &[1.0, 0.2, 0.5, 0.2, 1.0, 0.3, 0.5, 0.3, 1.0]);
        assert!((kernel_alignment(&k, &k).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn alignment_is_scale_invariant() {
        let a = gram(3, &[1.0, 0.2, 0.5, 0.2, 1.0, 0.3, 0.5, 0.3, 1.0]);
        let b = gram(3, &[1.0, 0.9, 0.1, 0.9, 1.0, 0.4, 0.1, 0.4, 1.0]);
        let scaled = GramMatrix::from_matrix(a.values() * 3.7).unwrap();
        let x = kernel_alignment(&a, &b).unwrap();
        let y = kernel_alignment(&scaled, &b).unwrap();
        assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn alignment_matches_double_loop() {
        let a = [1.0, 0.2, 0.5, 0.2, 1.0, 0.3, 0.5, 0.3, 1.0];
        let b = [1.0, 0.9, 0.1, 0.9, 1.0, 0.4, 0.1, 0.4, 1.0];
        let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..3 {
            for j in 0..3 {
                ab += a[i * 3 + j] * b[i * 3 + j];
                aa += a[i * 3 + j] * a[i * 3 + j];
                bb += b[i * 3 + j] * b[i * 3 + j];
            }
        }
        let oracle = ab / (aa.sqrt() * bb.sqrt());
        let got = kernel_alignment(&gram(3, &a), &gram(3, &b)).unwrap();
        assert!((got - oracle).abs() < 1e-14);
    }

    #[test]
    fn alignment_errors() {
        let z = GramMatrix::from_matrix(DMatrix::zeros(2, 2)).unwrap();
        let i = GramMatrix::from_matrix(DMatrix::identity(2, 2)).unwrap();
        let i3 = GramMatrix::from_matrix(DMatrix::identity(3, 3)).unwrap();
        assert_eq!(kernel_alignment(&z, &i), Err(WidthError::ZeroNorm));
        assert_eq!(
            kernel_alignment(&i, &i3),
            Err(WidthError::SizeMismatch { left: 2, right: 3 })
        );
    }

    #[test]
    fn mean_distance_small_cases() {
        assert_eq!(mean_pairwise_distance(&[vec![0.0, 0.0], vec![3.0, 0.0]]).unwrap(), 3.0);
        let m = mean_pairwise_distance(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        assert!((m - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            mean_pairwise_distance(&[vec![1.0]]),
            Err(WidthError::TooFewSamples(1))
        );
    }

    #[test]
    fn mean_distance_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let pts: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..4).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..50 {
            for j in (i + 1)..50 {
                let d: f64 = (0..4).map(|t| (pts[i][t] - pts[j][t]).powi(2)).sum();
                total += d.sqrt();
                count += 1;
            }
        }
        let got = mean_pairwise_distance(&pts).unwrap();
        assert!((got - total / count as f64).abs() < 1e-12);
    }

    #[test]
    fn grid_is_linear_and_inclusive() {
        let g = WidthGrid::default();
        let s = g.sigmas(2.0);
        assert_eq!(s.len(), 75);
        assert!((s[0] - 0.2).abs() < 1e-15);
        assert!((s[74] - 20.0).abs() < 1e-12);
        let step = s[1] - s[0];
        assert!(s.windows(2).all(|w| ((w[1] - w[0]) - step).abs() < 1e-12));
        assert!(WidthGrid::new(1.0, 1.0, 5).is_err());
        assert!(WidthGrid::new(0.1, 10.0, 1).is_err());
        assert!(WidthGrid::new(0.0, 10.0, 5).is_err());
    }

    #[test]
    fn schedule_switches_grid_size() {
        let s = GridSchedule::small_network();
        assert_eq!(s.grid_at(0).unwrap().n_samples, 75);
        assert_eq!(s.grid_at(499).unwrap().n_samples, 75);
        assert_eq!(s.grid_at(500).unwrap().n_samples, 50);
        let l = GridSchedule::large_network();
        assert_eq!(l.grid_at(0).unwrap().n_samples, 300);
        assert_eq!(l.grid_at(10_000).unwrap().n_samples, 100);
    }

    #[test]
    fn ema_cases() {
        let s = WidthState::new(1, 0.9).unwrap();
        let s = ema_update(&s, 2.0).unwrap();
        assert_eq!(s.current_sigma, Some(2.0));
        assert_eq!(s.iteration, 1);

        let mut s = WidthState::new(1, 0.0).unwrap();
        s.update(3.0).unwrap();
        s.update(1.0).unwrap();
        assert_eq!(s.update(5.0).unwrap(), 5.0);

        let s = WidthState {
            current_sigma: Some(1.0),
            ..WidthState::new(1, 0.9).unwrap()
        };
        let s = ema_update(&s, 2.0).unwrap();
        assert!((s.current_sigma.unwrap() - 1.1).abs() < 1e-15);

        assert_eq!(ema_update(&s, 0.0), Err(WidthError::NonPositiveSigma(0.0)));
        assert_eq!(WidthState::new(0, 1.5), Err(WidthError::InvalidBeta(1.5)));
    }

    #[test]
    fn argmax_prefers_first_of_ties() {
        assert_eq!(argmax_first(&[0.5, 0.9, 0.9, 0.1]), Some(1));
        assert_eq!(argmax_first(&[0.3, 0.3, 0.3]), Some(0));
        assert_eq!(argmax_first(&[f64::NAN, 0.2]), Some(1));
        assert_eq!(argmax_first(&[]), None);
    }

    #[test]
    fn saturated_kernel_ties_resolve_to_smallest_sigma() {
        // Two far-apart pairs of coincident points. Within a pair the kernel is
        // exactly 1; across pairs exp(-d²/σ²) underflows to 0 for every σ in
        // the grid, so every candidate scores the same.
        let pts = vec![vec![0.0], vec![0.0], vec![1e4], vec![1e4]];
        let labels = label_gram(&[0, 0, 1, 1], &LabelKernelSpec::default(), 2).unwrap();
        let grid = WidthGrid::new(0.001, 0.002, 5).unwrap();
        let curve = alignment_curve(&pts, &labels, &grid).unwrap();
        assert!(curve.points.iter().all(|p| p.1 == curve.points[0].1));
        assert_eq!(curve.best, 0);
        assert_eq!(select_sigma(&pts, &labels, &grid).unwrap(), curve.points[0].0);
    }

    #[test]
    fn all_ones_label_kernel_favours_widest_sigma() {
        let pts = vec![vec![0.0], vec![1.0], vec![2.0]];
        let ones = GramMatrix::from_matrix(DMatrix::from_element(3, 3, 1.0)).unwrap();
        let curve = alignment_curve(&pts, &ones, &WidthGrid::default()).unwrap();
        assert!(curve.points.windows(2).all(|w| w[1].1 >= w[0].1));
        assert_eq!(curve.best, curve.points.len() - 1);
    }

    #[test]
    fn near_singleton_grid() {
        let pts = vec![vec![0.0], vec![2.0]];
        let labels = label_gram(&[0, 1], &LabelKernelSpec::default(), 2).unwrap();
        let grid = WidthGrid::new(1.0, 1.0 + 1e-12, 2).unwrap();
        let s = select_sigma(&pts, &labels, &grid).unwrap();
        assert!((s - 2.0).abs() < 1e-10);
    }

    #[test]
    fn separated_blobs_align_well() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let labels: Vec<usize> = (0..60).map(|i| i % 2).collect();
        let pts: Vec<Vec<f64>> = labels
            .iter()
            .map(|&y| {
                let c = if y == 0 { -5.0 } else { 5.0 };
                (0..3).map(|_| c + noise.sample(&mut rng)).collect()
            })
            .collect();
        let ky = label_gram(&labels, &LabelKernelSpec::default(), 2).unwrap();
        let curve = alignment_curve(&pts, &ky, &WidthGrid::default()).unwrap();
        assert!(curve.best_alignment() > 0.9, "{}", curve.best_alignment());
    }

    #[test]
    fn identical_activations_are_degenerate() {
        let pts = vec![vec![1.0, 1.0]; 4];
        let ky = label_gram(&[0, 1, 0, 1], &LabelKernelSpec::default(), 2).unwrap();
        assert_eq!(
            select_sigma(&pts, &ky, &WidthGrid::default()),
            Err(WidthError::DegenerateDistances)
        );
    }

    #[test]
    fn label_gram_entries() {
        let g = label_gram(&[2, 2, 2], &LabelKernelSpec::default(), 3).unwrap();
        assert!(g.values().iter().all(|&v| v == 1.0));

        let g = label_gram(&[0, 1, 0], &LabelKernelSpec::default(), 2).unwrap();
        assert_eq!(g.get(0, 2), 1.0);
        let off = g.get(0, 1);
        assert!((off - (-200f64).exp()).abs() <= 1e-12 * off);
        assert!(off < 1e-86);

        assert_eq!(
            label_gram(&[0, 3], &LabelKernelSpec::default(), 3),
            Err(WidthError::LabelOutOfRange {
                index: 1,
                label: 3,
                num_classes: 3
            })
        );
    }

    #[test]
    fn balanced_label_kernel_entropy_is_log_k() {
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let g = label_gram(&labels, &LabelKernelSpec::default(), 10).unwrap();
        let s = von_neumann_entropy(&normalize_gram(&g).unwrap()).unwrap();
        assert!((s - 10f64.log2()).abs() < 1e-6);
    }
}

//! Matrix-based Rényi entropy and mutual information.
//!
//! Samples are mapped through an RBF kernel into a Gram matrix `K`, which is
//! normalized to a unit-trace density matrix
//!
//! ```text
//! A_ij = K_ij / (N * sqrt(K_ii * K_jj))
//! ```
//!
//! and every functional is evaluated on the eigenvalues of `A`:
//!
//! ```text
//! S_α(A) = log2(Σ λ_i^α) / (1 - α)          α ≠ 1
//! S_1(A) = -Σ λ_i log2 λ_i                   (von Neumann limit)
//! S_α(A, B) = S_α(A ∘ B / tr(A ∘ B))         (Hadamard joint)
//! I_α(A; B) = S_α(A) + S_α(B) - S_α(A, B)
//! ```
//!
//! Multi-channel activations use the tensor kernel, which is the RBF kernel
//! on the flattened sample. With one shared width it coincides with the
//! Hadamard product of per-channel kernels, but never forms the vanishing
//! product of `C` factors bounded by `1/N`.
//!
//! All arithmetic is `f64`. Entropies are in bits.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::ActivationBatch;

/// Eigenvalues in `[-NEGATIVE_EIGENVALUE_TOLERANCE, 0)` are rounding noise and
/// are clamped to zero; anything more negative is rejected.
pub const NEGATIVE_EIGENVALUE_TOLERANCE: f64 = 1e-8;

/// Hadamard products whose trace falls below this are reported as collapsed.
pub const DEGENERATE_TRACE_THRESHOLD: f64 = 1e-300;

const TRACE_TOLERANCE: f64 = 1e-12;
const SYMMETRY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EntropyError {
    #[error("kernel width must be positive and finite, got {0}")]
    NonPositiveSigma(f64),
    #[error("sample {index} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample dimension must be at least 1")]
    EmptySample,
    #[error("Gram diagonal entry {index} is {value}, must be positive")]
    ZeroDiagonal { index: usize, value: f64 },
    #[error("symmetric eigensolver produced non-finite eigenvalues")]
    SpectrumFailure,
    #[error("eigenvalue {0} is below the -1e-8 tolerance")]
    NegativeEigenvalue(f64),
    #[error("matrix sizes differ: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },
    #[error("trace of the Hadamard product is {0:e}, below 1e-300 (numerical collapse)")]
    DegenerateTrace(f64),
    #[error("Rényi order must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("density matrix trace is {0}, expected 1")]
    NotUnitTrace(f64),
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("need at least one density matrix")]
    NoMatrices,
}

pub type Result<T> = std::result::Result<T, EntropyError>;

/// Raw N×N kernel evaluations for one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    values: DMatrix<f64>,
}

impl GramMatrix {
    /// Wraps an arbitrary symmetric kernel matrix (e.g. an ideal block kernel).
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        check_square_symmetric(&values)?;
        Ok(Self { values })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.values
    }
}

/// Unit-trace, symmetric positive semidefinite matrix built from a Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    values: DMatrix<f64>,
}

impl DensityMatrix {
    /// Validates a hand-built matrix: square, symmetric, finite, trace one.
    /// Positive semidefiniteness is checked lazily when the spectrum is taken.
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        check_square_symmetric(&values)?;
        let trace = values.trace();
        if (trace - 1.0).abs() > TRACE_TOLERANCE {
            return Err(EntropyError::NotUnitTrace(trace));
        }
        Ok(Self { values })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn trace(&self) -> f64 {
        self.values.trace()
    }

    /// Eigenvalues of the explicitly symmetrized matrix, sorted descending.
    /// Negatives down to `-1e-8` and positives below `N ε λ_max` are set to 0.
    pub fn spectrum(&self) -> Result<EigenSpectrum> {
        let sym = (&self.values + self.values.transpose()) * 0.5;
        let mut eigenvalues: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
        if eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(EntropyError::SpectrumFailure);
        }
        eigenvalues.sort_by(|a, b| b.total_cmp(a));
        if let Some(&min) = eigenvalues.last() {
            if min < -NEGATIVE_EIGENVALUE_TOLERANCE {
                return Err(EntropyError::NegativeEigenvalue(min));
            }
        }
        // Eigenvalues within the solver's rounding floor are numerically zero;
        // left in place they dominate Σ λ^α for α < 1.
        let floor = eigenvalues.len() as f64 * f64::EPSILON * eigenvalues.first().map_or(0.0, |v| v.abs());
        for v in &mut eigenvalues {
            if *v < 0.0 || *v <= floor {
                *v = 0.0;
            }
        }
        Ok(EigenSpectrum { eigenvalues })
    }
}

/// Eigenvalues of a density matrix, descending and nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSpectrum {
    eigenvalues: Vec<f64>,
}

impl EigenSpectrum {
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn sum(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    /// Positive eigenvalues rescaled to sum to exactly one.
    fn unit_eigenvalues(&self) -> impl Iterator<Item = f64> + '_ {
        let total = self.sum();
        self.eigenvalues.iter().filter(|&&l| l > 0.0).map(move |&l| l / total)
    }

    /// `S_α` in bits; `α = 1` takes the von Neumann limit.
    pub fn entropy(&self, alpha: Alpha) -> f64 {
        if alpha.is_von_neumann() {
            return self.von_neumann();
        }
        let a = alpha.value();
        let d = a - 1.0;
        // Σλ^α = 1 + Σλ(λ^(α-1) - 1). Near α = 1 the excess is tiny and
        // ln_1p keeps it exact where log(Σλ^α) / (1 - α) would cancel; far
        // from 1, Σλ^α itself is the better-conditioned quantity.
        let excess: f64 = self.unit_eigenvalues().map(|l| l * (d * l.ln()).exp_m1()).sum();
        let log_sum = if excess.abs() < 0.5 {
            excess.ln_1p()
        } else {
            self.unit_eigenvalues().map(|l| l.powf(a)).sum::<f64>().ln()
        };
        (-log_sum / (d * std::f64::consts::LN_2)).max(0.0)
    }

    /// `-Σ λ log2 λ` with `0 log 0 = 0`.
    pub fn von_neumann(&self) -> f64 {
        let h: f64 = self.unit_eigenvalues().map(|l| -l * l.log2()).sum();
        h.max(0.0)
    }
}

/// Rényi order α > 0. The value 1 selects the von Neumann limit.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Alpha(f64);

impl Alpha {
    pub const VON_NEUMANN: Alpha = Alpha(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(Self(value))
        } else {
            Err(EntropyError::InvalidAlpha(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_von_neumann(self) -> bool {
        self.0 == 1.0
    }
}

impl TryFrom<f64> for Alpha {
    type Error = EntropyError;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<Alpha> for f64 {
    fn from(alpha: Alpha) -> f64 {
        alpha.0
    }
}

impl Default for Alpha {
    fn default() -> Self {
        Self::VON_NEUMANN
    }
}

fn check_square_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(EntropyError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(EntropyError::NonFinite);
    }
    let n = m.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if worst > SYMMETRY_TOLERANCE {
        return Err(EntropyError::NotSymmetric(worst));
    }
    Ok(())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma > 0.0 {
        Ok(())
    } else {
        Err(EntropyError::NonPositiveSigma(sigma))
    }
}

/// Pairwise squared Euclidean distances, each pair computed once.
pub fn squared_distances<S: AsRef<[f64]>>(points: &[S]) -> Result<DMatrix<f64>> {
    let n = points.len();
    if n < 2 {
        return Err(EntropyError::TooFewSamples(n));
    }
    let dim = points[0].as_ref().len();
    if dim == 0 {
        return Err(EntropyError::EmptySample);
    }
    for (index, p) in points.iter().enumerate() {
        if p.as_ref().len() != dim {
            return Err(EntropyError::DimensionMismatch {
                index,
                expected: dim,
                got: p.as_ref().len(),
            });
        }
    }
    let mut d2 = DMatrix::zeros(n, n);
    for i in 0..n {
        let xi = points[i].as_ref();
        for j in (i + 1)..n {
            let xj = points[j].as_ref();
            let s: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
            d2[(i, j)] = s;
            d2[(j, i)] = s;
        }
    }
    Ok(d2)
}

/// RBF Gram matrix from precomputed squared distances.
pub fn rbf_from_squared_distances(d2: &DMatrix<f64>, sigma: f64) -> Result<GramMatrix> {
    check_sigma(sigma)?;
    let inv = 1.0 / (sigma * sigma);
    let n = d2.nrows();
    let mut k = DMatrix::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (-d2[(i, j)] * inv).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(GramMatrix { values: k })
}

/// `K_ij = exp(-‖x_i - x_j‖² / σ²)` over flattened samples.
///
/// For tensor-valued samples the Frobenius norm of the difference equals the
/// Euclidean norm of the flattened difference, so this is also the tensor
/// kernel.
pub fn rbf_gram<S: AsRef<[f64]>>(points: &[S], sigma: f64) -> Result<GramMatrix> {
    check_sigma(sigma)?;
    let d2 = squared_distances(points)?;
    rbf_from_squared_distances(&d2, sigma)
}

pub fn normalize_gram(gram: &GramMatrix) -> Result<DensityMatrix> {
    let k = &gram.values;
    let n = k.nrows();
    let diag: Vec<f64> = (0..n).map(|i| k[(i, i)]).collect();
    if let Some((index, &value)) = diag.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
        return Err(EntropyError::ZeroDiagonal { index, value });
    }
    let nf = n as f64;
    let values = DMatrix::from_fn(n, n, |i, j| k[(i, j)] / (nf * (diag[i] * diag[j]).sqrt()));
    Ok(DensityMatrix { values })
}

pub fn spectrum(density: &DensityMatrix) -> Result<EigenSpectrum> {
    density.spectrum()
}

/// `S_α(A)` in bits. `α = 1` is dispatched to [`von_neumann_entropy`].
pub fn renyi_entropy(density: &DensityMatrix, alpha: Alpha) -> Result<f64> {
    Ok(density.spectrum()?.entropy(alpha))
}

pub fn von_neumann_entropy(density: &DensityMatrix) -> Result<f64> {
    Ok(density.spectrum()?.von_neumann())
}

/// Trace-normalized Hadamard product of one or more density matrices.
pub fn hadamard_density(densities: &[&DensityMatrix]) -> Result<DensityMatrix> {
    let (first, rest) = densities.split_first().ok_or(EntropyError::NoMatrices)?;
    let n = first.n();
    let mut product = first.values.clone();
    for d in rest {
        if d.n() != n {
            return Err(EntropyError::SizeMismatch {
                left: n,
                right: d.n(),
            });
        }
        product.component_mul_assign(&d.values);
    }
    let trace = product.trace();
    if !(trace >= DEGENERATE_TRACE_THRESHOLD) {
        return Err(EntropyError::DegenerateTrace(trace));
    }
    product /= trace;
    Ok(DensityMatrix { values: product })
}

/// `S_α(A, B) = S_α(A ∘ B / tr(A ∘ B))`.
pub fn joint_entropy(a: &DensityMatrix, b: &DensityMatrix, alpha: Alpha) -> Result<f64> {
    if a.n() != b.n() {
        return Err(EntropyError::SizeMismatch {
            left: a.n(),
            right: b.n(),
        });
    }
    renyi_entropy(&hadamard_density(&[a, b])?, alpha)
}

/// Joint entropy of `C` variables from the trace-normalized `C`-fold Hadamard
/// product.
///
/// Each factor's entries lie in `[0, 1/N]`, so for many channels the product
/// underflows and this returns [`EntropyError::DegenerateTrace`]. Use
/// [`tensor_gram`] for multi-channel activations.
pub fn multivariate_joint_entropy(densities: &[DensityMatrix], alpha: Alpha) -> Result<f64> {
    match densities {
        [] => Err(EntropyError::NoMatrices),
        [single] => renyi_entropy(single, alpha),
        _ => {
            let refs: Vec<&DensityMatrix> = densities.iter().collect();
            renyi_entropy(&hadamard_density(&refs)?, alpha)
        }
    }
}

/// Mutual information with its entropy components kept for bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MutualInformation {
    pub s_a: f64,
    pub s_b: f64,
    pub s_joint: f64,
}

impl MutualInformation {
    pub fn value(&self) -> f64 {
        self.s_a + self.s_b - self.s_joint
    }
}

/// Mutual information from precomputed marginal entropies, forming only the
/// joint term.
pub fn mutual_information_with_marginals(
    a: &DensityMatrix,
    s_a: f64,
    b: &DensityMatrix,
    s_b: f64,
    alpha: Alpha,
) -> Result<MutualInformation> {
    let s_joint = joint_entropy(a, b, alpha)?;
    Ok(MutualInformation { s_a, s_b, s_joint })
}

pub fn mutual_information_components(
    a: &DensityMatrix,
    b: &DensityMatrix,
    alpha: Alpha,
) -> Result<MutualInformation> {
    if a.n() != b.n() {
        return Err(EntropyError::SizeMismatch {
            left: a.n(),
            right: b.n(),
        });
    }
    let s_a = renyi_entropy(a, alpha)?;
    let s_b = renyi_entropy(b, alpha)?;
    mutual_information_with_marginals(a, s_a, b, s_b, alpha)
}

/// `I_α(A; B) = S_α(A) + S_α(B) - S_α(A, B)` in bits.
pub fn mutual_information(a: &DensityMatrix, b: &DensityMatrix, alpha: Alpha) -> Result<f64> {
    Ok(mutual_information_components(a, b, alpha)?.value())
}

/// Normalized tensor-kernel Gram matrix of a batch: `(1/N) κ_ten(X_i, X_j)`.
pub fn tensor_gram(batch: &ActivationBatch, sigma: f64) -> Result<DensityMatrix> {
    check_sigma(sigma)?;
    let samples: Vec<&[f64]> = batch.samples().collect();
    normalize_gram(&rbf_gram(&samples, sigma)?)
}

/// One normalized RBF density matrix per channel, all at the same width.
pub fn channel_densities(batch: &ActivationBatch, sigma: f64) -> Result<Vec<DensityMatrix>> {
    check_sigma(sigma)?;
    (0..batch.channels())
        .map(|c| normalize_gram(&rbf_gram(&batch.channel(c), sigma)?))
        .collect()
}

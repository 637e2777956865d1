//! Information plane analysis of neural networks with matrix-based Rényi
//! entropy and tensor kernels.
//!
//! - [`entropy`]: Gram matrices, density matrices, entropy and mutual information.
//! - [`kernel_width`]: kernel-alignment width selection with EMA smoothing.
//! - [`pipeline`]: per-iteration information plane points, smoothing, DPI report.
//! - [`io`]: IPD1 activation dumps, run manifests, trajectory export.
//! - [`harness`]: synthetic blobs and a small MLP trainer that emits activations.
//! - [`workflow`]: end-to-end runs shared by the command line and tests.
//! - [`cli`]: the `infoplane` command line.

pub mod batch;
pub mod cli;
pub mod entropy;
pub mod harness;
pub mod io;
pub mod kernel_width;
pub mod pipeline;
pub mod workflow;

pub use batch::{ActivationBatch, BatchError};
pub use entropy::{Alpha, DensityMatrix, EigenSpectrum, EntropyError, GramMatrix};

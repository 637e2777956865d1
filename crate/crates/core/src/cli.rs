//! Command-line interface.
//!
//! Exit codes: 0 on success, 1 for numerical or internal failures, 2 for bad
//! input, bad configuration or unparsable files. Failures print one line to
//! standard error of the form `error module=<module> kind=<Variant> detail="<message>"`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::entropy::Alpha;
use crate::harness::{Activation, SyntheticDataset, TrainConfig};
use crate::io::{self, DType};
use crate::kernel_width::{GridSchedule, LabelKernelSpec, WidthGrid};
use crate::pipeline::{PipelineConfig, PipelineError};
use crate::workflow::{self, DpiSource, TrainDemoConfig, WorkflowError};

#[derive(Debug, Parser)]
#[command(name = "infoplane", version, about = "Matrix-based Renyi entropy information plane estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the information plane of a captured run described by a manifest.
    Estimate(EstimateArgs),
    /// Train the toy network on synthetic blobs, dump activations and estimate.
    TrainDemo(TrainDemoArgs),
    /// Print the kernel alignment curve of one activation dump.
    SigmaScan(SigmaScanArgs),
    /// Report adjacent-layer data processing inequality differences.
    Dpi(DpiArgs),
}

/// Estimation settings. Unset flags keep the manifest's values for
/// `estimate` and the protocol defaults for `train-demo`.
#[derive(Debug, Clone, Default, Args)]
pub struct EstimationArgs {
    /// Entropy order alpha; 1 is von Neumann [default: 1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Kernel width for the network input [default: 8]
    #[arg(long)]
    pub input_sigma: Option<f64>,
    /// Kernel width for one-hot labels [default: 0.1]
    #[arg(long)]
    pub label_sigma: Option<f64>,
    /// Moving-average weight on the previous layer width [default: 0.9]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Smallest grid multiplier of the mean pairwise distance [default: 0.1]
    #[arg(long)]
    pub grid_lo: Option<f64>,
    /// Largest grid multiplier of the mean pairwise distance [default: 10]
    #[arg(long)]
    pub grid_hi: Option<f64>,
    /// Grid candidates before the switch iteration [default: 75]
    #[arg(long)]
    pub grid_stage1: Option<usize>,
    /// Grid candidates from the switch iteration on [default: 50]
    #[arg(long)]
    pub grid_stage2: Option<usize>,
    /// Iteration at which the grid coarsens [default: 500]
    #[arg(long)]
    pub grid_switch: Option<u32>,
    /// Moving-average window in mini-batches for the smoothed output [default: 10]
    #[arg(long)]
    pub smoothing: Option<usize>,
    /// Use this width for every layer instead of alignment selection
    #[arg(long)]
    pub layer_sigma: Option<f64>,
    /// Compute the DPI report on the raw rather than the smoothed trajectory
    #[arg(long)]
    pub raw: bool,
}

impl EstimationArgs {
    /// Applies every flag that was given on top of `base`.
    pub fn apply(&self, mut base: PipelineConfig) -> Result<PipelineConfig, WorkflowError> {
        if let Some(a) = self.alpha {
            base.alpha = Alpha::new(a).map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        }
        if let Some(s) = self.input_sigma {
            base.input_sigma = s;
        }
        if let Some(s) = self.label_sigma {
            base.label_kernel = LabelKernelSpec { sigma_y: s };
        }
        if let Some(b) = self.beta {
            base.beta = b;
        }
        let s: &mut GridSchedule = &mut base.schedule;
        if let Some(v) = self.grid_lo {
            s.multiplier_lo = v;
        }
        if let Some(v) = self.grid_hi {
            s.multiplier_hi = v;
        }
        if let Some(v) = self.grid_stage1 {
            s.stage1_samples = v;
        }
        if let Some(v) = self.grid_stage2 {
            s.stage2_samples = v;
        }
        if let Some(v) = self.grid_switch {
            s.switch_iteration = v;
        }
        if let Some(k) = self.smoothing {
            base.smoothing_window = k;
        }
        if self.layer_sigma.is_some() {
            base.layer_sigma = self.layer_sigma;
        }
        base.validate()?;
        Ok(base)
    }

    fn any_set(&self) -> bool {
        self.alpha.is_some()
            || self.input_sigma.is_some()
            || self.label_sigma.is_some()
            || self.beta.is_some()
            || self.grid_lo.is_some()
            || self.grid_hi.is_some()
            || self.grid_stage1.is_some()
            || self.grid_stage2.is_some()
            || self.grid_switch.is_some()
            || self.smoothing.is_some()
            || self.layer_sigma.is_some()
    }

    fn dpi_source(&self) -> DpiSource {
        if self.raw {
            DpiSource::Raw
        } else {
            DpiSource::Smoothed
        }
    }
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Run manifest (JSON)
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for trajectories and the DPI report
    #[arg(long, default_value = "ip-out")]
    pub out: PathBuf,
    #[command(flatten)]
    pub estimation: EstimationArgs,
}

#[derive(Debug, Args)]
pub struct TrainDemoArgs {
    /// Output directory for dumps, manifest, log and trajectories
    #[arg(long, default_value = "train-demo-out")]
    pub out: PathBuf,
    /// Seed for data generation, initialization and batch order
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.09)]
    pub lr: f64,
    /// Capture activations every this many iterations
    #[arg(long, default_value_t = 1)]
    pub capture_every: u32,
    /// relu or tanh
    #[arg(long, default_value_t = Activation::Relu)]
    pub activation: Activation,
    /// Draw mini-batches uniformly instead of class-balanced
    #[arg(long)]
    pub unstratified: bool,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 200)]
    pub samples_per_class: usize,
    /// Standard deviation of the class means
    #[arg(long, default_value_t = 1.5)]
    pub separation: f64,
    /// Standard deviation of the per-sample noise
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    /// Dump precision: f32 or f64
    #[arg(long, default_value = "f64")]
    pub dtype: DType,
    #[command(flatten)]
    pub estimation: EstimationArgs,
}

#[derive(Debug, Args)]
pub struct SigmaScanArgs {
    /// Activation dump (IPD1)
    #[arg(long)]
    pub dump: PathBuf,
    /// Labels: a one-hot IPD1 dump or whitespace/comma separated integers
    #[arg(long)]
    pub labels: PathBuf,
    /// Class count; inferred from the labels when omitted
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub label_sigma: f64,
    #[arg(long, default_value_t = 0.1)]
    pub grid_lo: f64,
    #[arg(long, default_value_t = 10.0)]
    pub grid_hi: f64,
    #[arg(long, default_value_t = 75)]
    pub grid_samples: usize,
    /// Write the curve here instead of standard output
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DpiArgs {
    /// Trajectory file (CSV or JSON lines)
    #[arg(long)]
    pub trajectory: PathBuf,
    /// Smooth the trajectory over this many mini-batches first
    #[arg(long)]
    pub smooth: Option<usize>,
    /// A pair is compliant when its mean difference is at least -tolerance
    #[arg(long, default_value_t = 0.0)]
    pub tolerance: f64,
}

pub fn run(cli: Cli) -> Result<(), WorkflowError> {
    match cli.command {
        Command::Estimate(a) => {
            let config = if a.estimation.any_set() {
                let manifest = io::RunManifest::load(&a.manifest)?;
                Some(a.estimation.apply(manifest.config)?)
            } else {
                None
            };
            let out = workflow::run_estimate(&a.manifest, config, a.estimation.dpi_source(), &a.out)?;
            println!(
                "estimated {} points over {} layers into {}",
                out.raw.len(),
                out.raw.layers().len(),
                a.out.display()
            );
        }
        Command::TrainDemo(a) => {
            let config = TrainDemoConfig {
                dataset: SyntheticDataset {
                    num_classes: a.classes,
                    dim: a.dim,
                    samples_per_class: a.samples_per_class,
                    separation: a.separation,
                    noise: a.noise,
                    seed: a.seed,
                },
                activation: a.activation,
                widths: None,
                train: TrainConfig {
                    learning_rate: a.lr,
                    batch_size: a.batch_size,
                    epochs: a.epochs,
                    capture_every: a.capture_every,
                    seed: a.seed,
                    stratified: !a.unstratified,
                },
                pipeline: a.estimation.apply(PipelineConfig::default())?,
                dtype: a.dtype,
                dpi_source: a.estimation.dpi_source(),
            };
            let out = workflow::run_train_demo(&config, &a.out)?;
            let last = out.estimate.smoothed.layers().last().copied();
            let final_mi = last
                .and_then(|l| out.estimate.smoothed.layer(l).last().copied())
                .map_or(f64::NAN, |p| p.mi_label);
            println!(
                "train accuracy {} after {} iterations; final-layer smoothed I(T;Y) = {} bits",
                io::format_significant(out.log.final_accuracy().unwrap_or(f64::NAN), 6),
                out.log.entries.len(),
                io::format_significant(final_mi, 6)
            );
            println!("wrote {}", a.out.display());
        }
        Command::SigmaScan(a) => {
            let grid = WidthGrid::new(a.grid_lo, a.grid_hi, a.grid_samples)?;
            let curve = workflow::run_sigma_scan(
                &a.dump,
                &a.labels,
                a.num_classes,
                &LabelKernelSpec { sigma_y: a.label_sigma },
                &grid,
            )?;
            let text = workflow::render_alignment_curve(&curve);
            match &a.out {
                Some(path) => io::write_text(path, &text)?,
                None => print!("{text}"),
            }
        }
        Command::Dpi(a) => {
            let summary = workflow::run_dpi(&a.trajectory, a.smooth, a.tolerance)?;
            print!("{}", workflow::render_dpi_summary(&summary));
        }
    }
    Ok(())
}

/// Parses the process arguments, runs the command and maps failures to the
/// exit code contract.
pub fn main_exit() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.structured_line());
            ExitCode::from(e.exit_code())
        }
    }
}

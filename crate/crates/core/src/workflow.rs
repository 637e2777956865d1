//! End-to-end runs: train the toy network, capture dumps, estimate the
//! information plane and write the results.

use std::fmt::Debug;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::ActivationBatch;
use crate::entropy::EntropyError;
use crate::harness::{self, Activation, HarnessError, SyntheticDataset, ToyMlp, TrainConfig, TrainingLog};
use crate::io::{
    self, DType, DataError, ExportFormat, LayerDump, LayerInfo, ManifestStep, RunManifest, INPUT_LAYER_ID,
};
use crate::kernel_width::{self, AlignmentCurve, LabelKernelSpec, WidthError, WidthGrid};
use crate::pipeline::{self, DpiPair, IpEstimator, LabelBatch, PipelineConfig, PipelineError, Trajectory};

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

impl From<WidthError> for WorkflowError {
    fn from(e: WidthError) -> Self {
        WorkflowError::Pipeline(e.into())
    }
}

impl From<EntropyError> for WorkflowError {
    fn from(e: EntropyError) -> Self {
        WorkflowError::Pipeline(e.into())
    }
}

/// First identifier of a derived `Debug` rendering, i.e. the variant name.
fn variant_name(e: &impl Debug) -> String {
    format!("{e:?}")
        .split(|c: char| !c.is_alphanumeric() && c != '_')
        .next()
        .unwrap_or_default()
        .to_string()
}

impl WorkflowError {
    /// Module that raised the error.
    pub fn module(&self) -> &'static str {
        match self {
            WorkflowError::Data(_) => "data-io",
            WorkflowError::Harness(_) => "toy-harness",
            WorkflowError::Pipeline(PipelineError::Entropy(_)) => "entropy-core",
            WorkflowError::Pipeline(PipelineError::Width(WidthError::Entropy(_))) => "entropy-core",
            WorkflowError::Pipeline(PipelineError::Width(_)) => "kernel-width",
            WorkflowError::Pipeline(_) => "ip-pipeline",
        }
    }

    /// Name of the innermost error variant.
    pub fn kind(&self) -> String {
        match self {
            WorkflowError::Data(e) => variant_name(e),
            WorkflowError::Harness(e) => variant_name(e),
            WorkflowError::Pipeline(PipelineError::Entropy(e)) => variant_name(e),
            WorkflowError::Pipeline(PipelineError::Width(WidthError::Entropy(e))) => variant_name(e),
            WorkflowError::Pipeline(PipelineError::Width(e)) => variant_name(e),
            WorkflowError::Pipeline(e) => variant_name(e),
        }
    }

    /// 2 for bad input or configuration, 1 for numerical or internal failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            WorkflowError::Data(DataError::IoFailure { .. }) => 1,
            WorkflowError::Data(_) => 2,
            WorkflowError::Harness(HarnessError::DivergedTraining { .. }) => 1,
            WorkflowError::Harness(_) => 2,
            WorkflowError::Pipeline(e) => match e {
                PipelineError::Entropy(_) | PipelineError::Width(WidthError::Entropy(_)) => 1,
                PipelineError::Width(WidthError::ZeroNorm) => 1,
                PipelineError::Width(_) => 2,
                PipelineError::BatchMismatch(_)
                | PipelineError::TooFewLayers(_)
                | PipelineError::EmptyClass(_)
                | PipelineError::NoClasses
                | PipelineError::NonIncreasingIteration { .. }
                | PipelineError::InvalidWindow
                | PipelineError::InvalidConfig(_) => 2,
            },
        }
    }

    /// One machine-readable line: `error module=… kind=… detail="…"`.
    pub fn structured_line(&self) -> String {
        format!(
            "error module={} kind={} detail={:?}",
            self.module(),
            self.kind(),
            self.to_string()
        )
    }
}

pub type Result<T> = std::result::Result<T, WorkflowError>;

/// Runs the estimator over every step of a manifest, loading each referenced
/// file exactly once through `loader`.
pub fn process_manifest<L>(manifest: &RunManifest, base: &Path, mut loader: L) -> Result<Trajectory>
where
    L: FnMut(&Path) -> std::result::Result<ActivationBatch, DataError>,
{
    manifest.validate()?;
    let mut estimator = IpEstimator::new(manifest.config.clone())?;
    for step in &manifest.steps {
        let input = loader(&RunManifest::resolve(base, &step.input))?;
        io::check_stamp(&input, INPUT_LAYER_ID, step.iteration, &step.input)?;
        let label_path = RunManifest::resolve(base, &step.labels);
        let label_batch = loader(&label_path)?;
        let (labels, k) = io::labels_from_batch(&label_batch, &label_path)?;
        if k != manifest.num_classes {
            return Err(DataError::InvalidManifest(format!(
                "{} has {k} classes, manifest declares {}",
                step.labels.display(),
                manifest.num_classes
            ))
            .into());
        }
        // estimate layers in network order
        let mut layers = Vec::with_capacity(step.layers.len());
        for info in &manifest.layers {
            let dump = step
                .layers
                .iter()
                .find(|l| l.layer_id == info.id)
                .expect("validated manifest lists every layer");
            let batch = loader(&RunManifest::resolve(base, &dump.path))?;
            io::check_stamp(&batch, info.id, step.iteration, &dump.path)?;
            layers.push(batch);
        }
        estimator.process(&input, &LabelBatch { labels, num_classes: k }, &layers)?;
    }
    Ok(estimator.trajectory()?)
}

/// Which trajectory the DPI report is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DpiSource {
    #[default]
    Smoothed,
    Raw,
}

#[derive(Debug, Clone)]
pub struct EstimateOutput {
    pub raw: Trajectory,
    pub smoothed: Trajectory,
    pub dpi: Vec<DpiPair>,
    pub files: Vec<PathBuf>,
}

pub const RAW_STEM: &str = "trajectory_raw";
pub const SMOOTHED_STEM: &str = "trajectory_smoothed";
pub const DPI_REPORT: &str = "dpi_report.csv";

/// Smooths `raw`, writes both trajectories as CSV and JSON lines plus the
/// DPI report into `out_dir`. A single-layer run gets no DPI report.
pub fn write_estimate(raw: Trajectory, window: usize, dpi_source: DpiSource, out_dir: &Path) -> Result<EstimateOutput> {
    if raw.is_empty() {
        return Err(DataError::EmptyTrajectory.into());
    }
    create_dir(out_dir)?;
    let smoothed = pipeline::smooth_trajectory(&raw, window)?;
    let mut files = Vec::new();
    for (stem, traj) in [(RAW_STEM, &raw), (SMOOTHED_STEM, &smoothed)] {
        for (ext, format) in [("csv", ExportFormat::Csv), ("jsonl", ExportFormat::JsonLines)] {
            let path = out_dir.join(format!("{stem}.{ext}"));
            io::export_trajectory(traj, format, &path)?;
            files.push(path);
        }
    }
    let source = match dpi_source {
        DpiSource::Smoothed => &smoothed,
        DpiSource::Raw => &raw,
    };
    let dpi = if source.layers().len() >= 2 {
        let pairs = pipeline::dpi_report(source)?;
        let path = out_dir.join(DPI_REPORT);
        io::write_text(&path, &io::render_dpi_report(&pairs))?;
        files.push(path);
        pairs
    } else {
        Vec::new()
    };
    Ok(EstimateOutput {
        raw,
        smoothed,
        dpi,
        files,
    })
}

/// Estimates a manifest's run. `config` replaces the manifest's own
/// estimation settings when given.
pub fn run_estimate(
    manifest_path: &Path,
    config: Option<PipelineConfig>,
    dpi_source: DpiSource,
    out_dir: &Path,
) -> Result<EstimateOutput> {
    let mut manifest = RunManifest::load(manifest_path)?;
    if let Some(c) = config {
        manifest.config = c;
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let raw = process_manifest(&manifest, base, io::read_dump)?;
    write_estimate(raw, manifest.config.smoothing_window, dpi_source, out_dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainDemoConfig {
    pub dataset: SyntheticDataset,
    pub activation: Activation,
    /// Defaults to `dim → 32 → 16 → 16 → K`.
    pub widths: Option<Vec<usize>>,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub dtype: DType,
    pub dpi_source: DpiSource,
}

impl Default for TrainDemoConfig {
    fn default() -> Self {
        Self {
            dataset: SyntheticDataset::default(),
            activation: Activation::Relu,
            widths: None,
            train: TrainConfig::default(),
            pipeline: PipelineConfig::default(),
            dtype: DType::F64,
            dpi_source: DpiSource::Smoothed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainDemoOutput {
    pub log: TrainingLog,
    pub manifest_path: PathBuf,
    pub estimate: EstimateOutput,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAINING_LOG: &str = "training_log.csv";
pub const DUMP_DIR: &str = "dumps";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| {
        DataError::IoFailure {
            path: dir.to_path_buf(),
            source,
        }
        .into()
    })
}

/// Generates blobs, trains the toy network while dumping every capture,
/// writes the manifest and training log, then estimates the run from the
/// dumps on disk.
pub fn run_train_demo(config: &TrainDemoConfig, out_dir: &Path) -> Result<TrainDemoOutput> {
    config.pipeline.validate()?;
    let data = harness::generate_dataset(&config.dataset)?;
    let widths = config
        .widths
        .clone()
        .unwrap_or_else(|| harness::default_widths(config.dataset.dim, config.dataset.num_classes));
    let mut model = ToyMlp::new(&widths, config.activation, config.train.seed)?;

    let dump_dir = out_dir.join(DUMP_DIR);
    create_dir(&dump_dir)?;
    let mut steps = Vec::new();
    let log = harness::train_epochs::<WorkflowError, _>(&mut model, &data, &config.train, |cap| {
        let it = cap.iteration;
        let rel = |tag: String| PathBuf::from(DUMP_DIR).join(format!("it{it:07}_{tag}.ipd"));
        let input = rel("input".into());
        io::write_dump(&cap.input, &out_dir.join(&input), config.dtype)?;
        let labels = rel("labels".into());
        io::write_labels(&cap.labels, cap.num_classes, it, &out_dir.join(&labels))?;
        let mut layers = Vec::with_capacity(cap.layers.len());
        for b in &cap.layers {
            let path = rel(format!("layer{}", b.layer_id()));
            io::write_dump(b, &out_dir.join(&path), config.dtype)?;
            layers.push(LayerDump {
                layer_id: b.layer_id(),
                path,
            });
        }
        steps.push(ManifestStep {
            iteration: it,
            input,
            labels,
            layers,
        });
        Ok(())
    })?;

    let last = widths.len() - 1;
    let manifest = RunManifest {
        run_id: format!("train-demo-seed{}", config.train.seed),
        layers: (1..=last)
            .map(|l| LayerInfo {
                id: l as u16,
                name: if l == last {
                    "softmax".into()
                } else {
                    format!("hidden{l}_{}", config.activation)
                },
            })
            .collect(),
        num_classes: config.dataset.num_classes,
        batch_size: config.train.batch_size,
        config: config.pipeline.clone(),
        steps,
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    manifest.save(&manifest_path)?;
    io::write_text(&out_dir.join(TRAINING_LOG), &log.to_csv())?;

    let raw = process_manifest(&manifest, out_dir, io::read_dump)?;
    let estimate = write_estimate(raw, config.pipeline.smoothing_window, config.dpi_source, out_dir)?;
    Ok(TrainDemoOutput {
        log,
        manifest_path,
        estimate,
    })
}

/// Alignment of one dump against its labels over a width grid.
pub fn run_sigma_scan(
    dump: &Path,
    labels: &Path,
    num_classes: Option<usize>,
    label_kernel: &LabelKernelSpec,
    grid: &WidthGrid,
) -> Result<AlignmentCurve> {
    let batch = io::read_dump(dump)?;
    let (labels, k) = io::read_labels_any(labels, num_classes)?;
    if labels.len() != batch.n() {
        return Err(PipelineError::BatchMismatch(format!(
            "{} labels for {} samples",
            labels.len(),
            batch.n()
        ))
        .into());
    }
    let gram = kernel_width::label_gram(&labels, label_kernel, k)?;
    let samples: Vec<&[f64]> = batch.samples().collect();
    Ok(kernel_width::alignment_curve(&samples, &gram, grid)?)
}

pub fn render_alignment_curve(curve: &AlignmentCurve) -> String {
    let mut out = String::from("sigma,alignment,is_argmax\n");
    for (i, (s, a)) in curve.points.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{}\n",
            io::format_significant(*s, 9),
            io::format_significant(*a, 9),
            u8::from(i == curve.best)
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpiSummary {
    pub pairs: Vec<DpiPair>,
    pub compliant: usize,
    pub tolerance: f64,
}

/// DPI pairs of a trajectory file, optionally smoothing it first.
pub fn run_dpi(path: &Path, smoothing: Option<usize>, tolerance: f64) -> Result<DpiSummary> {
    let mut traj = io::import_trajectory(path)?;
    if let Some(k) = smoothing {
        traj = pipeline::smooth_trajectory(&traj, k)?;
    }
    let pairs = pipeline::dpi_report(&traj)?;
    let compliant = pipeline::dpi_compliant_pairs(&pairs, tolerance);
    Ok(DpiSummary {
        pairs,
        compliant,
        tolerance,
    })
}

pub fn render_dpi_summary(summary: &DpiSummary) -> String {
    let mut out = io::render_dpi_report(&summary.pairs);
    out.push_str(&format!(
        "# compliant_pairs={} total_pairs={} tolerance={}\n",
        summary.compliant,
        summary.pairs.len(),
        summary.tolerance
    ));
    out
}

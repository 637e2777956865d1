//! Activation dumps, run manifests and trajectory export.
//!
//! # IPD1 dump format
//!
//! Little-endian, no padding:
//!
//! | offset | size      | field                                   |
//! |--------|-----------|-----------------------------------------|
//! | 0      | 4         | magic `b"IPD1"`                         |
//! | 4      | 2         | version (`u16`, currently 1)            |
//! | 6      | 1         | dtype (`u8`: 4 = f32, 8 = f64)          |
//! | 7      | 2         | layer id (`u16`)                        |
//! | 9      | 4         | iteration (`u32`)                       |
//! | 13     | 4         | sample count `n` (`u32`)                |
//! | 17     | 1         | `ndim` (`u8`)                           |
//! | 18     | 4 × ndim  | per-sample dims (`u32` each)            |
//! | ...    | payload   | `n × Π dims` values, sample-major       |
//!
//! Labels are stored as a one-hot dump with layer id [`LABEL_LAYER_ID`] and
//! shape `[K]`; network inputs use [`INPUT_LAYER_ID`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::{ActivationBatch, BatchError};
use crate::pipeline::{DpiPair, IPPoint, PipelineConfig, Trajectory};

pub const MAGIC: [u8; 4] = *b"IPD1";
pub const VERSION: u16 = 1;
pub const INPUT_LAYER_ID: u16 = 0;
pub const LABEL_LAYER_ID: u16 = u16::MAX;

const FIXED_HEADER_LEN: usize = 18;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {detail}")]
    ParseError { path: PathBuf, detail: String },
    #[error("non-finite value in {path} at sample {sample}, offset {offset}")]
    NonFiniteData {
        path: PathBuf,
        sample: usize,
        offset: usize,
    },
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, detail: impl Into<String>) -> DataError {
    DataError::ParseError {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| parse_err(path, format!("cannot read: {e}")))
}

fn read_input_text(path: &Path) -> Result<String> {
    String::from_utf8(read_input(path)?).map_err(|_| parse_err(path, "not valid UTF-8"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            4 => Some(DType::F32),
            8 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        self.code() as usize
    }
}

impl std::str::FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(format!("unknown dtype {other:?} (expected f32 or f64)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DumpHeader {
    pub version: u16,
    pub dtype: DType,
    pub layer_id: u16,
    pub iteration: u32,
    pub n: u32,
    pub dims: Vec<u32>,
}

impl DumpHeader {
    pub fn encoded_len(&self) -> usize {
        FIXED_HEADER_LEN + 4 * self.dims.len()
    }

    pub fn payload_len(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product::<usize>() * self.n as usize * self.dtype.size()
    }

    fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.dtype.code());
        out.extend_from_slice(&self.layer_id.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.n.to_le_bytes());
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
    }

    fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < FIXED_HEADER_LEN {
            return Err(parse_err(path, format!("file is {} bytes, shorter than the header", bytes.len())));
        }
        if bytes[0..4] != MAGIC {
            return Err(parse_err(path, format!("bad magic {:?}", &bytes[0..4])));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        let version = u16_at(4);
        if version != VERSION {
            return Err(parse_err(path, format!("unsupported version {version}")));
        }
        let dtype = DType::from_code(bytes[6])
            .ok_or_else(|| parse_err(path, format!("unknown dtype code {}", bytes[6])))?;
        let ndim = bytes[17] as usize;
        if bytes.len() < FIXED_HEADER_LEN + 4 * ndim {
            return Err(parse_err(path, "truncated dims"));
        }
        let dims = (0..ndim).map(|i| u32_at(FIXED_HEADER_LEN + 4 * i)).collect();
        Ok(Self {
            version,
            dtype,
            layer_id: u16_at(7),
            iteration: u32_at(9),
            n: u32_at(13),
            dims,
        })
    }
}

fn header_for(batch: &ActivationBatch, dtype: DType) -> DumpHeader {
    DumpHeader {
        version: VERSION,
        dtype,
        layer_id: batch.layer_id(),
        iteration: batch.iteration(),
        n: batch.n() as u32,
        dims: batch.shape().iter().map(|&d| d as u32).collect(),
    }
}

/// Serializes a batch. Writing as `F32` rounds each value to nearest.
pub fn encode_dump(batch: &ActivationBatch, dtype: DType) -> Vec<u8> {
    let header = header_for(batch, dtype);
    let mut out = Vec::with_capacity(header.encoded_len() + header.payload_len());
    header.write_to(&mut out);
    match dtype {
        DType::F64 => batch.values().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => batch
            .values()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
    }
    out
}

/// Parses a dump; `path` is only used in error messages.
pub fn decode_dump(bytes: &[u8], path: &Path) -> Result<ActivationBatch> {
    let header = DumpHeader::parse(bytes, path)?;
    let start = header.encoded_len();
    let payload = &bytes[start..];
    if payload.len() != header.payload_len() {
        return Err(parse_err(
            path,
            format!("payload is {} bytes, header implies {}", payload.len(), header.payload_len()),
        ));
    }
    let values: Vec<f64> = match header.dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
            .collect(),
    };
    let shape = header.dims.iter().map(|&d| d as usize).collect();
    ActivationBatch::new(header.layer_id, header.iteration, shape, values).map_err(|e| match e {
        BatchError::NonFinite { sample, offset } => DataError::NonFiniteData {
            path: path.to_path_buf(),
            sample,
            offset,
        },
        other => parse_err(path, other.to_string()),
    })
}

pub fn write_dump(batch: &ActivationBatch, path: &Path, dtype: DType) -> Result<()> {
    let bytes = encode_dump(batch, dtype);
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))
}

/// A missing or unreadable file is a `ParseError`: on the read side every
/// failure is an input problem.
pub fn read_dump(path: &Path) -> Result<ActivationBatch> {
    let bytes = read_input(path)?;
    decode_dump(&bytes, path)
}

pub fn labels_batch(labels: &[usize], num_classes: usize, iteration: u32) -> std::result::Result<ActivationBatch, BatchError> {
    let mut values = vec![0.0; labels.len() * num_classes];
    for (i, &y) in labels.iter().enumerate() {
        values[i * num_classes + y] = 1.0;
    }
    ActivationBatch::new(LABEL_LAYER_ID, iteration, vec![num_classes], values)
}

/// Writes labels as a one-hot dump.
pub fn write_labels(labels: &[usize], num_classes: usize, iteration: u32, path: &Path) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(parse_err(path, format!("label {bad} outside [0, {num_classes})")));
    }
    let batch = labels_batch(labels, num_classes, iteration).map_err(|e| parse_err(path, e.to_string()))?;
    write_dump(&batch, path, DType::F32)
}

/// Reads a one-hot label dump, returning the class indices and class count.
pub fn read_labels(path: &Path) -> Result<(Vec<usize>, usize)> {
    labels_from_batch(&read_dump(path)?, path)
}

/// Decodes a one-hot label batch; `path` is only used in error messages.
pub fn labels_from_batch(batch: &ActivationBatch, path: &Path) -> Result<(Vec<usize>, usize)> {
    if batch.shape().len() != 1 {
        return Err(parse_err(path, format!("label dump shape {:?} is not [K]", batch.shape())));
    }
    let k = batch.shape()[0];
    let labels = batch
        .samples()
        .enumerate()
        .map(|(i, row)| {
            let hot: Vec<usize> = row.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(c, _)| c).collect();
            match hot.as_slice() {
                [c] if row[*c] == 1.0 => Ok(*c),
                _ => Err(parse_err(path, format!("row {i} is not one-hot"))),
            }
        })
        .collect::<Result<_>>()?;
    Ok((labels, k))
}

/// Reads class labels from either a one-hot IPD1 dump or a text file of
/// integers separated by whitespace or commas.
pub fn read_labels_any(path: &Path, num_classes: Option<usize>) -> Result<(Vec<usize>, usize)> {
    let bytes = read_input(path)?;
    if bytes.starts_with(&MAGIC) {
        return read_labels(path);
    }
    let text = String::from_utf8(bytes).map_err(|_| parse_err(path, "labels file is neither IPD1 nor text"))?;
    let labels: Vec<usize> = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| parse_err(path, format!("bad label {t:?}"))))
        .collect::<Result<_>>()?;
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Ok((labels, k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub id: u16,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDump {
    pub layer_id: u16,
    pub path: PathBuf,
}

/// Files captured at one training iteration. Paths are relative to the
/// manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestStep {
    pub iteration: u32,
    pub input: PathBuf,
    pub labels: PathBuf,
    pub layers: Vec<LayerDump>,
}

/// Description of one captured run, stored as pretty-printed JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    /// Layers in network order, input side first.
    pub layers: Vec<LayerInfo>,
    pub num_classes: usize,
    pub batch_size: usize,
    pub config: PipelineConfig,
    pub steps: Vec<ManifestStep>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_input_text(path)?;
        serde_json::from_str(&text).map_err(|e| parse_err(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(io_err(path))
    }

    /// Every referenced file, in processing order.
    pub fn files(&self) -> Vec<&Path> {
        self.steps
            .iter()
            .flat_map(|s| {
                [s.input.as_path(), s.labels.as_path()]
                    .into_iter()
                    .chain(s.layers.iter().map(|l| l.path.as_path()))
            })
            .collect()
    }

    pub fn resolve(base: &Path, file: &Path) -> PathBuf {
        if file.is_absolute() {
            file.to_path_buf()
        } else {
            base.join(file)
        }
    }

    /// Structural checks that need no file access: layer ids declared once,
    /// every step lists exactly the declared layers, iterations increase.
    pub fn validate(&self) -> Result<()> {
        let declared: Vec<u16> = self.layers.iter().map(|l| l.id).collect();
        let mut sorted = declared.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != declared.len() {
            return Err(DataError::InvalidManifest("duplicate layer id".into()));
        }
        if declared.iter().any(|&id| id == INPUT_LAYER_ID || id == LABEL_LAYER_ID) {
            return Err(DataError::InvalidManifest(format!(
                "layer ids {INPUT_LAYER_ID} and {LABEL_LAYER_ID} are reserved"
            )));
        }
        let mut prev: Option<u32> = None;
        for step in &self.steps {
            if prev.is_some_and(|p| p >= step.iteration) {
                return Err(DataError::InvalidManifest(format!(
                    "iteration {} is not after {}",
                    step.iteration,
                    prev.unwrap_or_default()
                )));
            }
            prev = Some(step.iteration);
            let mut ids: Vec<u16> = step.layers.iter().map(|l| l.layer_id).collect();
            ids.sort_unstable();
            if ids != sorted {
                return Err(DataError::InvalidManifest(format!(
                    "iteration {} lists layers {:?}, manifest declares {:?}",
                    step.iteration, ids, sorted
                )));
            }
        }
        Ok(())
    }

    /// Parses every referenced dump and checks its stamp against the manifest.
    pub fn validate_files(&self, base: &Path) -> Result<()> {
        self.validate()?;
        for step in &self.steps {
            let input = read_dump(&Self::resolve(base, &step.input))?;
            check_stamp(&input, INPUT_LAYER_ID, step.iteration, &step.input)?;
            read_labels(&Self::resolve(base, &step.labels))?;
            for l in &step.layers {
                let b = read_dump(&Self::resolve(base, &l.path))?;
                check_stamp(&b, l.layer_id, step.iteration, &l.path)?;
            }
        }
        Ok(())
    }
}

pub fn check_stamp(batch: &ActivationBatch, layer_id: u16, iteration: u32, path: &Path) -> Result<()> {
    if batch.layer_id() != layer_id || batch.iteration() != iteration {
        return Err(parse_err(
            path,
            format!(
                "dump is stamped layer {} iteration {}, manifest expects layer {} iteration {}",
                batch.layer_id(),
                batch.iteration(),
                layer_id,
                iteration
            ),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExportFormat {
    Csv,
    JsonLines,
}

impl ExportFormat {
    /// `.csv` is CSV; `.jsonl`, `.ndjson` and `.json` are JSON lines.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(Self::Csv),
            "jsonl" | "ndjson" | "json" => Some(Self::JsonLines),
            _ => None,
        }
    }
}

pub const CSV_COLUMNS: [&str; 10] = [
    "iteration",
    "layer_id",
    "mi_input_bits",
    "mi_label_bits",
    "sigma",
    "s_t",
    "s_x",
    "s_y",
    "s_joint_xt",
    "s_joint_ty",
];

/// Formats `x` with `digits` significant digits, like C's `%.{digits}g`.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { format!("{x}") };
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        let m = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_fraction(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn sig9(x: f64) -> String {
    format_significant(x, 9)
}

fn point_fields(p: &IPPoint) -> [String; 10] {
    [
        p.iteration.to_string(),
        p.layer_id.to_string(),
        sig9(p.mi_input),
        sig9(p.mi_label),
        sig9(p.sigma),
        sig9(p.s_t),
        sig9(p.s_x),
        sig9(p.s_y),
        sig9(p.s_joint_xt),
        sig9(p.s_joint_ty),
    ]
}

/// Trajectory as text, one record per `(iteration, layer_id)` in that order.
pub fn render_trajectory(traj: &Trajectory, format: ExportFormat) -> Result<String> {
    if traj.is_empty() {
        return Err(DataError::EmptyTrajectory);
    }
    let mut out = String::new();
    match format {
        ExportFormat::Csv => {
            out.push_str(&CSV_COLUMNS.join(","));
            out.push('\n');
            for p in traj.points() {
                out.push_str(&point_fields(p).join(","));
                out.push('\n');
            }
        }
        ExportFormat::JsonLines => {
            for p in traj.points() {
                let fields = point_fields(p);
                let body: Vec<String> = CSV_COLUMNS
                    .iter()
                    .zip(&fields)
                    .map(|(k, v)| {
                        let v = if v.parse::<f64>().is_ok_and(f64::is_finite) { v.as_str() } else { "null" };
                        format!("\"{k}\":{v}")
                    })
                    .collect();
                out.push('{');
                out.push_str(&body.join(","));
                out.push_str("}\n");
            }
        }
    }
    Ok(out)
}

pub fn export_trajectory(traj: &Trajectory, format: ExportFormat, path: &Path) -> Result<()> {
    let text = render_trajectory(traj, format)?;
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Debug, Deserialize)]
struct TrajectoryRecord {
    iteration: u32,
    layer_id: u16,
    mi_input_bits: f64,
    mi_label_bits: f64,
    sigma: f64,
    s_t: f64,
    s_x: f64,
    s_y: f64,
    s_joint_xt: f64,
    s_joint_ty: f64,
}

impl From<TrajectoryRecord> for IPPoint {
    fn from(r: TrajectoryRecord) -> Self {
        IPPoint {
            iteration: r.iteration,
            layer_id: r.layer_id,
            mi_input: r.mi_input_bits,
            mi_label: r.mi_label_bits,
            sigma: r.sigma,
            s_t: r.s_t,
            s_x: r.s_x,
            s_y: r.s_y,
            s_joint_xt: r.s_joint_xt,
            s_joint_ty: r.s_joint_ty,
        }
    }
}

/// Reads a trajectory written by [`export_trajectory`]; the format follows
/// the file extension, falling back to sniffing the first byte.
pub fn import_trajectory(path: &Path) -> Result<Trajectory> {
    let text = read_input_text(path)?;
    let format = ExportFormat::from_path(path).unwrap_or(if text.trim_start().starts_with('{') {
        ExportFormat::JsonLines
    } else {
        ExportFormat::Csv
    });
    let points: Vec<IPPoint> = match format {
        ExportFormat::Csv => csv::Reader::from_reader(text.as_bytes())
            .deserialize::<TrajectoryRecord>()
            .map(|r| r.map(IPPoint::from).map_err(|e| parse_err(path, e.to_string())))
            .collect::<Result<_>>()?,
        ExportFormat::JsonLines => text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str::<TrajectoryRecord>(l)
                    .map(IPPoint::from)
                    .map_err(|e| parse_err(path, e.to_string()))
            })
            .collect::<Result<_>>()?,
    };
    if points.is_empty() {
        return Err(DataError::EmptyTrajectory);
    }
    Trajectory::new(points).map_err(|e| parse_err(path, e.to_string()))
}

pub fn render_dpi_report(pairs: &[DpiPair]) -> String {
    let mut out = String::from("upper_layer,lower_layer,mean_difference_bits,iterations\n");
    for p in pairs {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.upper,
            p.lower,
            sig9(p.mean_difference),
            p.iterations
        ));
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_point(iteration: u32, layer_id: u16, v: f64) -> IPPoint {
        IPPoint {
            iteration,
            layer_id,
            mi_input: v,
            mi_label: v / 3.0,
            sigma: 1.234_567_890_123,
            s_t: 2.0 * v,
            s_x: 1e-7 * v,
            s_y: 3.321_928_094_887_362,
            s_joint_xt: v + 1e-7 * v,
            s_joint_ty: 123_456.789_012_3,
        }
    }

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(format_significant(3.321_928_094_887_362, 9), "3.32192809");
        assert_eq!(format_significant(0.0, 9), "0");
        assert_eq!(format_significant(2.5, 9), "2.5");
        assert_eq!(format_significant(-0.000_012_345_678_91, 9), "-1.23456789e-05");
        assert_eq!(format_significant(1.0e12, 9), "1e+12");
        assert_eq!(format_significant(9.999_999_999_9, 9), "10");
        assert_eq!(format_significant(123_456_789.4, 9), "123456789");
        assert_eq!(format_significant(0.000_123_456_789_1, 9), "0.000123456789");
    }

    #[test]
    fn header_layout_is_fixed() {
        let b = ActivationBatch::new(3, 0x0102_0304, vec![2, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_dump(&b, DType::F64);
        assert_eq!(&bytes[0..4], b"IPD1");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 8);
        assert_eq!(&bytes[7..9], &[3, 0]);
        assert_eq!(&bytes[9..13], &[4, 3, 2, 1]);
        assert_eq!(&bytes[13..17], &[2, 0, 0, 0]);
        assert_eq!(bytes[17], 3);
        assert_eq!(&bytes[18..22], &[2, 0, 0, 0]);
        assert_eq!(bytes.len(), 18 + 12 + 4 * 8);
        assert_eq!(&bytes[30..38], &1.0f64.to_le_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let b = ActivationBatch::new(1, 0, vec![2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let good = encode_dump(&b, DType::F64);
        let p = Path::new("mem");

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dump(&bad, p), Err(DataError::ParseError { .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_dump(&bad, p), Err(DataError::ParseError { .. })));

        let mut bad = good.clone();
        bad[6] = 3;
        assert!(matches!(decode_dump(&bad, p), Err(DataError::ParseError { .. })));

        assert!(matches!(decode_dump(&good[..good.len() - 1], p), Err(DataError::ParseError { .. })));
        assert!(matches!(decode_dump(&good[..10], p), Err(DataError::ParseError { .. })));

        let mut bad = good.clone();
        let off = bad.len() - 8;
        bad[off..].copy_from_slice(&f64::INFINITY.to_le_bytes());
        assert!(matches!(
            decode_dump(&bad, p),
            Err(DataError::NonFiniteData { sample: 1, offset: 1, .. })
        ));
    }

    #[test]
    fn f32_dump_widens_exactly() {
        let vals = vec![0.1, -2.5, 1e-3, 7.0];
        let b = ActivationBatch::new(2, 9, vec![2], vals.clone()).unwrap();
        let back = decode_dump(&encode_dump(&b, DType::F32), Path::new("mem")).unwrap();
        for (got, orig) in back.values().iter().zip(&vals) {
            assert_eq!(*got, f64::from(*orig as f32));
        }
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.ipd");
        write_labels(&[0, 3, 1, 3], 4, 12, &path).unwrap();
        assert_eq!(read_labels(&path).unwrap(), (vec![0, 3, 1, 3], 4));
        assert_eq!(read_labels_any(&path, None).unwrap(), (vec![0, 3, 1, 3], 4));

        let txt = dir.path().join("labels.txt");
        fs::write(&txt, "0, 2\n1 1\n").unwrap();
        assert_eq!(read_labels_any(&txt, None).unwrap(), (vec![0, 2, 1, 1], 3));
        assert_eq!(read_labels_any(&txt, Some(5)).unwrap().1, 5);
    }

    #[test]
    fn single_point_csv() {
        let t = Trajectory::new(vec![sample_point(4, 2, 1.5)]).unwrap();
        let text = render_trajectory(&t, ExportFormat::Csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], CSV_COLUMNS.join(","));
        assert!(lines[1].starts_with("4,2,1.5,0.5,1.23456789,3,"));
    }

    #[test]
    fn export_orders_by_iteration_then_layer() {
        let mut pts = Vec::new();
        for layer in [2u16, 1] {
            for it in [30u32, 10, 20] {
                pts.push(sample_point(it, layer, it as f64 + layer as f64));
            }
        }
        let t = Trajectory::new(pts).unwrap();
        let text = render_trajectory(&t, ExportFormat::Csv).unwrap();
        let keys: Vec<(u32, u16)> = text
            .lines()
            .skip(1)
            .map(|l| {
                let mut f = l.split(',');
                (f.next().unwrap().parse().unwrap(), f.next().unwrap().parse().unwrap())
            })
            .collect();
        assert_eq!(keys, vec![(10, 1), (10, 2), (20, 1), (20, 2), (30, 1), (30, 2)]);
    }

    #[test]
    fn export_round_trips_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let pts: Vec<IPPoint> = (0..5).map(|i| sample_point(i, 1, 0.123_456_789_123 * (i + 1) as f64)).collect();
        let t = Trajectory::new(pts).unwrap();
        for name in ["t.csv", "t.jsonl"] {
            let path = dir.path().join(name);
            export_trajectory(&t, ExportFormat::from_path(&path).unwrap(), &path).unwrap();
            let back = import_trajectory(&path).unwrap();
            assert_eq!(back.len(), t.len());
            for (a, b) in t.points().iter().zip(back.points()) {
                assert_eq!((a.iteration, a.layer_id), (b.iteration, b.layer_id));
                let pairs = [
                    (a.mi_input, b.mi_input),
                    (a.mi_label, b.mi_label),
                    (a.sigma, b.sigma),
                    (a.s_t, b.s_t),
                    (a.s_x, b.s_x),
                    (a.s_y, b.s_y),
                    (a.s_joint_xt, b.s_joint_xt),
                    (a.s_joint_ty, b.s_joint_ty),
                ];
                for (x, y) in pairs {
                    // 9 significant digits: at most half a unit in the 9th digit
                    assert!((x - y).abs() <= 5e-9 * x.abs(), "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn empty_trajectory_is_rejected() {
        let t = Trajectory::new(vec![]).unwrap();
        assert!(matches!(
            render_trajectory(&t, ExportFormat::Csv),
            Err(DataError::EmptyTrajectory)
        ));
    }

    #[test]
    fn jsonl_lines_are_valid_json() {
        let t = Trajectory::new(vec![sample_point(1, 1, 2.0), sample_point(2, 1, 1e-9)]).unwrap();
        let text = render_trajectory(&t, ExportFormat::JsonLines).unwrap();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["mi_input_bits"].is_number());
            assert_eq!(v.as_object().unwrap().len(), 10);
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use infoplane::io::{self, RunManifest};

fn infoplane(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_infoplane")).args(args).output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_DEMO: [&str; 16] = [
    "--classes",
    "3",
    "--dim",
    "4",
    "--samples-per-class",
    "20",
    "--batch-size",
    "30",
    "--epochs",
    "4",
    "--capture-every",
    "2",
    "--smoothing",
    "3",
    "--seed",
    "5",
];

fn small_demo(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train-demo", "--out", path_str(out)];
    // flags given in `extra` replace the small defaults
    for pair in SMALL_DEMO.chunks(2) {
        if !extra.contains(&pair[0]) {
            args.extend_from_slice(pair);
        }
    }
    args.extend_from_slice(extra);
    infoplane(&args)
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn train_demo_then_estimate_counts_rows() {
    let dir = tempfile::tempdir().unwrap();
    let demo = dir.path().join("demo");
    let out = small_demo(&demo, &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest = RunManifest::load(&demo.join("manifest.json")).unwrap();
    // 60 samples in batches of 30: 2 iterations per epoch, captures at 0, 2, 4, 6
    assert_eq!(manifest.steps.len(), 4);
    assert_eq!(manifest.layers.len(), 4);
    let demo_rows = csv_rows(&demo.join("trajectory_raw.csv"));
    assert_eq!(demo_rows.len(), manifest.layers.len() * manifest.steps.len());

    let est = dir.path().join("est");
    let out = infoplane(&[
        "estimate",
        "--manifest",
        path_str(&demo.join("manifest.json")),
        "--out",
        path_str(&est),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for name in [
        "trajectory_raw.csv",
        "trajectory_raw.jsonl",
        "trajectory_smoothed.csv",
        "trajectory_smoothed.jsonl",
        "dpi_report.csv",
    ] {
        assert!(est.join(name).exists(), "{name}");
    }
    assert_eq!(
        fs::read(est.join("trajectory_smoothed.csv")).unwrap(),
        fs::read(demo.join("trajectory_smoothed.csv")).unwrap()
    );
    let jsonl = fs::read_to_string(est.join("trajectory_raw.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), demo_rows.len());
}

#[test]
fn fixed_seed_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(small_demo(&a, &[]).status.success());
    assert!(small_demo(&b, &[]).status.success());
    for name in ["trajectory_raw.csv", "trajectory_smoothed.csv", "training_log.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn zero_epochs_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_demo(&dir.path().join("d"), &["--epochs", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("module=data-io kind=EmptyTrajectory"), "{}", stderr(&out));
}

#[test]
fn missing_dump_is_reported_as_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let demo = dir.path().join("demo");
    assert!(small_demo(&demo, &[]).status.success());
    let manifest = RunManifest::load(&demo.join("manifest.json")).unwrap();
    fs::remove_file(demo.join(&manifest.steps[2].layers[0].path)).unwrap();
    let out = infoplane(&[
        "estimate",
        "--manifest",
        path_str(&demo.join("manifest.json")),
        "--out",
        path_str(&dir.path().join("est")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.starts_with("error module=data-io kind=ParseError detail="), "{err}");
}

/// Order-2 entropy from the Frobenius norm: Σλ² = ‖A‖_F² for symmetric A.
fn s2_oracle(a: &[Vec<f64>]) -> f64 {
    let tr: f64 = (0..a.len()).map(|i| a[i][i]).sum();
    let fro: f64 = a.iter().flatten().map(|v| (v / tr) * (v / tr)).sum();
    -fro.log2()
}

fn rbf_density_oracle(rows: &[&[f64]], sigma: f64) -> Vec<Vec<f64>> {
    let n = rows.len() as f64;
    rows.iter()
        .map(|x| {
            rows.iter()
                .map(|y| {
                    let d2: f64 = x.iter().zip(*y).map(|(a, b)| (a - b) * (a - b)).sum();
                    (-d2 / (sigma * sigma)).exp() / n
                })
                .collect()
        })
        .collect()
}

fn hadamard(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x * y).collect())
        .collect()
}

#[test]
fn alpha_two_differs_and_matches_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let demo = dir.path().join("demo");
    assert!(small_demo(&demo, &[]).status.success());
    let manifest_path = demo.join("manifest.json");
    let (one, two) = (dir.path().join("one"), dir.path().join("two"));
    for (out_dir, alpha) in [(&one, "1"), (&two, "2")] {
        let out = infoplane(&[
            "estimate",
            "--manifest",
            path_str(&manifest_path),
            "--out",
            path_str(out_dir),
            "--alpha",
            alpha,
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let r1 = csv_rows(&one.join("trajectory_raw.csv"));
    let r2 = csv_rows(&two.join("trajectory_raw.csv"));
    assert_eq!(r1.len(), r2.len());
    assert!(r1.iter().zip(&r2).any(|(a, b)| a[2] != b[2] && a[3] != b[3]));

    // spot-check the first point of layer 2 against a brute-force computation
    let manifest = RunManifest::load(&manifest_path).unwrap();
    let step = &manifest.steps[0];
    let row = r2.iter().find(|r| r[0] == step.iteration.to_string() && r[1] == "2").unwrap();
    let value = |i: usize| row[i].parse::<f64>().unwrap();
    let (mi_input, mi_label, sigma) = (value(2), value(3), value(4));
    let base: PathBuf = demo.clone();
    let input = io::read_dump(&base.join(&step.input)).unwrap();
    let layer_path = &step.layers.iter().find(|l| l.layer_id == 2).unwrap().path;
    let layer = io::read_dump(&base.join(layer_path)).unwrap();
    let label_batch = io::read_dump(&base.join(&step.labels)).unwrap();
    let a_x = rbf_density_oracle(&input.samples().collect::<Vec<_>>(), 8.0);
    let a_t = rbf_density_oracle(&layer.samples().collect::<Vec<_>>(), sigma);
    let a_y = rbf_density_oracle(&label_batch.samples().collect::<Vec<_>>(), 0.1);
    let mi_xt = s2_oracle(&a_x) + s2_oracle(&a_t) - s2_oracle(&hadamard(&a_x, &a_t));
    let mi_ty = s2_oracle(&a_t) + s2_oracle(&a_y) - s2_oracle(&hadamard(&a_t, &a_y));
    // sigma is read back from 9 significant digits
    assert!((mi_xt - mi_input).abs() < 1e-6, "{mi_xt} vs {mi_input}");
    assert!((mi_ty - mi_label).abs() < 1e-6, "{mi_ty} vs {mi_label}");
}

#[test]
fn sigma_scan_reports_full_curve() {
    let dir = tempfile::tempdir().unwrap();
    let demo = dir.path().join("demo");
    assert!(small_demo(&demo, &[]).status.success());
    let manifest = RunManifest::load(&demo.join("manifest.json")).unwrap();
    let step = manifest.steps.last().unwrap();
    let dump = demo.join(&step.layers.last().unwrap().path);
    let out = infoplane(&[
        "sigma-scan",
        "--dump",
        path_str(&dump),
        "--labels",
        path_str(&demo.join(&step.labels)),
        "--grid-samples",
        "33",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "sigma,alignment,is_argmax");
    assert_eq!(lines.len(), 34);
    let flagged: Vec<&str> = lines.iter().filter(|l| l.ends_with(",1")).copied().collect();
    assert_eq!(flagged.len(), 1);
    let best: f64 = flagged[0].split(',').nth(1).unwrap().parse().unwrap();
    assert!(best > 0.9, "{best}");
}

#[test]
fn sigma_scan_of_identical_activations_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let batch = infoplane::ActivationBatch::from_rows(1, 0, &vec![vec![0.5, -1.0]; 6]).unwrap();
    let dump = dir.path().join("same.ipd");
    io::write_dump(&batch, &dump, io::DType::F32).unwrap();
    let labels = dir.path().join("labels.txt");
    fs::write(&labels, "0,1,0,1,0,1").unwrap();
    let out = infoplane(&["sigma-scan", "--dump", path_str(&dump), "--labels", path_str(&labels)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("module=kernel-width kind=DegenerateDistances"), "{}", stderr(&out));
}

fn write_trajectory(path: &Path, layers: &[(u16, [f64; 3])]) {
    let mut text = String::from(&io::CSV_COLUMNS.join(","));
    text.push('\n');
    for it in 0..3u32 {
        for (layer, mi) in layers {
            let m = mi[it as usize];
            text.push_str(&format!("{it},{layer},{m},{m},1,{m},{m},{m},{m},{m}\n"));
        }
    }
    fs::write(path, text).unwrap();
}

#[test]
fn dpi_on_decreasing_layers_is_fully_compliant() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    write_trajectory(&path, &[(1, [3.0, 3.1, 3.2]), (2, [2.0, 2.5, 2.9]), (3, [1.0, 1.0, 1.0])]);
    let out = infoplane(&["dpi", "--trajectory", path_str(&path)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let pairs: Vec<f64> = text
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(pairs.len(), 2);
    assert!(pairs.iter().all(|&d| d > 0.0));
    assert!(text.contains("# compliant_pairs=2 total_pairs=2"), "{text}");
}

#[test]
fn dpi_needs_two_layers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    write_trajectory(&path, &[(1, [3.0, 3.1, 3.2])]);
    let out = infoplane(&["dpi", "--trajectory", path_str(&path)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("module=ip-pipeline kind=TooFewLayers"), "{}", stderr(&out));
}

#[test]
fn dpi_reads_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let demo = dir.path().join("demo");
    assert!(small_demo(&demo, &[]).status.success());
    let out = infoplane(&[
        "dpi",
        "--trajectory",
        path_str(&demo.join("trajectory_raw.jsonl")),
        "--smooth",
        "3",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let report = fs::read_to_string(demo.join("dpi_report.csv")).unwrap();
    // smoothing the raw export reproduces the smoothed-series report up to
    // the 9-digit rounding of the export
    for (a, b) in text.lines().skip(1).zip(report.lines().skip(1)) {
        let x: f64 = a.split(',').nth(2).unwrap().parse().unwrap();
        let y: f64 = b.split(',').nth(2).unwrap().parse().unwrap();
        assert!((x - y).abs() < 1e-7, "{x} vs {y}");
    }
}

#[test]
fn bad_arguments_exit_with_two() {
    let out = infoplane(&["estimate"]);
    assert_eq!(out.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = small_demo(dir.path(), &["--alpha=-1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("kind=InvalidConfig"), "{}", stderr(&out));
    let out = infoplane(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn help_documents_defaults() {
    let out = infoplane(&["train-demo", "--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for flag in [
        "--alpha",
        "--input-sigma",
        "--label-sigma",
        "--beta",
        "--grid-lo",
        "--grid-hi",
        "--grid-stage1",
        "--grid-stage2",
        "--grid-switch",
        "--smoothing",
        "--batch-size",
        "--seed",
        "--lr",
    ] {
        let lines: Vec<&str> = text.lines().collect();
        let at = lines.iter().position(|l| l.trim_start().starts_with(flag)).unwrap_or_else(|| panic!("{flag}"));
        let block = lines[at..(at + 3).min(lines.len())].join(" ");
        assert!(block.contains("default"), "{flag} has no documented default");
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use seglrp::{io, toy, Tensor};

fn seglrp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seglrp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path) -> (PathBuf, PathBuf) {
    let o = seglrp(&["gen-toy", "--out", path(dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    (dir.join("model/model.toml"), dir.join("volume.tnsr"))
}

#[test]
fn gen_toy_writes_model_volume_and_mask() {
    let dir = tempfile::tempdir().unwrap();
    let (model, volume) = gen(dir.path());
    assert_eq!(io::load_tensor(&volume).unwrap().shape(), &[6, 64, 64]);
    assert_eq!(
        io::load_tensor(dir.path().join("mask.tnsr"))
            .unwrap()
            .shape(),
        &[1, 64, 64]
    );
    assert_eq!(
        io::read_manifest(&model).unwrap().channel_labels,
        toy::sequence_labels()
    );
}

#[test]
fn segment_writes_labels_and_logits() {
    let dir = tempfile::tempdir().unwrap();
    let (model, volume) = gen(dir.path());
    let out = dir.path().join("seg");
    let o = seglrp(&[
        "segment",
        "--model",
        path(&model),
        "--input",
        path(&volume),
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let labels = io::load_tensor(out.join("labels.tnsr")).unwrap();
    assert_eq!(labels.shape(), &[1, 64, 64]);
    assert!(labels.data().iter().all(|&l| l == 0.0 || l == 1.0));
    assert_eq!(
        io::load_tensor(out.join("logits.tnsr")).unwrap().shape(),
        &[2, 64, 64]
    );

    let stdout = String::from_utf8_lossy(&o.stdout);
    let counted: usize = stdout
        .lines()
        .filter_map(|l| l.strip_prefix("class "))
        .map(|l| {
            l.split_whitespace()
                .nth(1)
                .unwrap()
                .parse::<usize>()
                .unwrap()
        })
        .sum();
    assert_eq!(counted, 64 * 64);
}

#[test]
fn explain_writes_map_heatmaps_and_channel_sums() {
    let dir = tempfile::tempdir().unwrap();
    let (model, volume) = gen(dir.path());
    let out = dir.path().join("exp");
    let o = seglrp(&[
        "explain",
        "--model",
        path(&model),
        "--input",
        path(&volume),
        "--class",
        "0",
        "--max-locations",
        "20",
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let map = io::load_tensor(out.join("relevance_map.tnsr")).unwrap();
    assert_eq!(map.shape(), &[6, 64, 64]);
    for c in 0..6 {
        let pgm = fs::read(out.join(format!("heatmap_ch{c}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n64 64\n255\n"));
        assert_eq!(pgm.len(), 13 + 64 * 64);
    }
    let csv = fs::read_to_string(out.join("channel_sums.csv")).unwrap();
    let total: f64 = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((total - 20.0).abs() < 1e-6, "{total}");
}

#[test]
fn single_channel_model_reports_one_and_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let (_, volume) = gen(dir.path());
    let g = toy::restrict_to_channel(&toy::toy_unet(7, 6), 3).unwrap();
    let model = io::save_model(&g, dir.path().join("restricted"), &[]).unwrap();
    let out = dir.path().join("imp");
    let o = seglrp(&[
        "channel-importance",
        "--model",
        path(&model),
        "--input",
        path(&volume),
        "--mask",
        path(&dir.path().join("mask.tnsr")),
        "--max-locations",
        "16",
        "--labels",
        "a,b,c,d,e,f",
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("importance.csv")).unwrap();
    let rows: Vec<(String, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap())
        })
        .collect();
    assert_eq!(
        rows.iter().map(|r| r.0.as_str()).collect::<Vec<_>>(),
        ["a", "b", "c", "d", "e", "f"]
    );
    for (i, (_, v)) in rows.iter().enumerate() {
        let expected = if i == 3 { 1.0 } else { 0.0 };
        assert!((v - expected).abs() < 1e-9, "{rows:?}");
    }
    let meta = fs::read_to_string(out.join("importance_meta.toml")).unwrap();
    assert!(meta.contains("tumor_locations = 16"), "{meta}");
}

#[test]
fn several_inputs_produce_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let model = io::save_model(
        &toy::threshold_model(6, 3).unwrap(),
        dir.path().join("m"),
        &toy::sequence_labels(),
    )
    .unwrap();
    let mut args = vec![
        "channel-importance".to_string(),
        "--model".into(),
        path(&model).into(),
    ];
    for seed in 0..3 {
        let v = toy::synthetic_volume(seed, 6, 32, 3).unwrap();
        let p = dir.path().join(format!("v{seed}.tnsr"));
        io::save_tensor(&p, &v.volume).unwrap();
        args.extend(["--input".to_string(), path(&p).to_string()]);
    }
    let out = dir.path().join("imp");
    args.extend([
        "--max-locations".into(),
        "8".into(),
        "--out".into(),
        path(&out).into(),
    ]);
    let o = seglrp(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(o.status.success(), "{}", stderr(&o));
    for k in 0..3 {
        assert!(out.join(format!("importance_{k}.csv")).exists());
        assert!(out.join(format!("importance_{k}_meta.toml")).exists());
    }
    let summary = fs::read_to_string(out.join("importance_summary.csv")).unwrap();
    assert_eq!(summary.lines().next().unwrap(), io::REPORT_CSV_HEADER);
    let mean: f64 = summary
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((mean - 1.0).abs() < 1e-9);
}

#[test]
fn missing_model_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = seglrp(&[
        "segment",
        "--model",
        "no/such/model.toml",
        "--input",
        "x.tnsr",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no/such/model.toml"));
}

#[test]
fn label_count_mismatch_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (model, volume) = gen(dir.path());
    let o = seglrp(&[
        "channel-importance",
        "--model",
        path(&model),
        "--input",
        path(&volume),
        "--labels",
        "T1,T2",
        "--out",
        path(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_seeds_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (model, volume) = gen(dir.path());
    let o = seglrp(&[
        "verify",
        "--model",
        path(&model),
        "--input",
        path(&volume),
        "--n-seeds",
        "0",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_rule_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (model, volume) = gen(dir.path());
    for rule in ["eps:0.1", "alphabeta:2,2", "epsilon:-1", "zplus:1"] {
        let o = seglrp(&[
            "verify",
            "--model",
            path(&model),
            "--input",
            path(&volume),
            "--rule",
            rule,
            "--out",
            path(dir.path()),
        ]);
        assert_eq!(o.status.code(), Some(2), "{rule}");
    }
}

#[test]
fn biased_net_fails_zero_tolerance_audit() {
    let dir = tempfile::tempdir().unwrap();
    let (model, volume) = gen(dir.path());
    let out = dir.path().join("audit");
    let o = seglrp(&[
        "verify",
        "--model",
        path(&model),
        "--input",
        path(&volume),
        "--rule",
        "epsilon:0",
        "--n-seeds",
        "5",
        "--tol",
        "0",
        "--out",
        path(&out),
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
    assert_eq!(
        fs::read_to_string(out.join("audit.csv"))
            .unwrap()
            .lines()
            .count(),
        6
    );
}

#[test]
fn empty_region_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let (model, volume) = gen(dir.path());
    let empty = dir.path().join("empty.tnsr");
    io::save_tensor(&empty, &Tensor::zeros(&[1, 64, 64])).unwrap();
    let o = seglrp(&[
        "explain",
        "--model",
        path(&model),
        "--input",
        path(&volume),
        "--mask",
        path(&empty),
        "--out",
        path(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("region"), "{}", stderr(&o));

    let o = seglrp(&[
        "channel-importance",
        "--model",
        path(&model),
        "--input",
        path(&volume),
        "--mask",
        path(&empty),
        "--out",
        path(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn class_out_of_range_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (model, volume) = gen(dir.path());
    let o = seglrp(&[
        "explain",
        "--model",
        path(&model),
        "--input",
        path(&volume),
        "--class",
        "2",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

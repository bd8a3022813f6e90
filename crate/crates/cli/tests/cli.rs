//! End-to-end tests of the `ifa` binary: exit codes, artifacts, and the
//! decode path, all with training runs kept to a handful of iterations.

use std::path::{Path, PathBuf};
use std::process::Command;

fn ifa_bin() -> PathBuf {
    let mut p = PathBuf::from(env!("CARGO_BIN_EXE_ifa"));
    assert!(p.exists(), "{p:?}");
    p = p.canonicalize().unwrap();
    p
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(ifa_bin()).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn train_tiny(dir: &Path, extra: &[&str]) -> (i32, String, String) {
    let mut args = vec![
        "train",
        "--out",
        dir.to_str().unwrap(),
        "--set",
        "train.max_iter=4",
        "--set",
        "train.val_size=2",
        "--set",
        "train.log_interval=2",
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn train_writes_all_artifacts_and_manifest_lists_them() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = train_tiny(dir.path(), &[]);
    assert_eq!(code, 0, "{err}");
    for f in ["checkpoint.json", "checkpoint.bin", "metrics.csv", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    let artifacts: Vec<&str> = manifest["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(artifacts.len(), 3);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.starts_with("iter,lr,loss_main,loss_aux,val_miou,wall_ms\n"));
}

#[test]
fn invalid_config_exits_one_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = train_tiny(dir.path(), &["--set", "train.lr0=-1"]);
    assert_eq!(code, 1);
    assert!(err.contains("lr0"), "{err}");
}

#[test]
fn divergent_training_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    // an absurd learning rate reliably overflows within a few steps
    let (code, _, err) = train_tiny(dir.path(), &["--set", "train.lr0=1000", "--set", "train.max_iter=50"]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("non-finite"), "{err}");
}

#[test]
fn decode_any_resolution_for_ifa_but_native_only_for_baselines() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = train_tiny(dir.path(), &[]);
    assert_eq!(code, 0, "{err}");

    // build an input image from the synthetic generator
    let sample = ifa_core::synth::gen_synth(9, 0, 5, 64, 64);
    let img = dir.path().join("in.ppm");
    ifa_core::pnm::write_ppm(&img, &sample.image).unwrap();

    let mask = dir.path().join("out.pgm");
    let (code, _, err) = run(&[
        "decode",
        "--checkpoint", dir.path().to_str().unwrap(),
        "--image", img.to_str().unwrap(),
        "--height", "97",
        "--width", "113",
        "--out", mask.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let (labels, h, w) = ifa_core::pnm::read_pgm(&mask).unwrap();
    assert_eq!((h, w), (97, 113));
    assert!(labels.iter().all(|&l| l < 5));
    assert!(mask.with_extension("palette.txt").exists());

    // a baseline checkpoint must reject non-native sizes with exit 3
    let bdir = tempfile::tempdir().unwrap();
    let (code, _, err) = train_tiny(bdir.path(), &["--set", "align.kind=bilinear"]);
    assert_eq!(code, 0, "{err}");
    let (code, _, err) = run(&[
        "decode",
        "--checkpoint", bdir.path().to_str().unwrap(),
        "--image", img.to_str().unwrap(),
        "--height", "97",
        "--width", "113",
        "--out", bdir.path().join("out.pgm").to_str().unwrap(),
    ]);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("native"), "{err}");
    // but the native size is fine
    let (code, _, err) = run(&[
        "decode",
        "--checkpoint", bdir.path().to_str().unwrap(),
        "--image", img.to_str().unwrap(),
        "--height", "64",
        "--width", "64",
        "--out", bdir.path().join("out.pgm").to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
}

#[test]
fn decode_io_errors_exit_four() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, _) = run(&[
        "decode",
        "--checkpoint", dir.path().join("nope").to_str().unwrap(),
        "--image", dir.path().join("nope.ppm").to_str().unwrap(),
        "--height", "8",
        "--width", "8",
        "--out", dir.path().join("o.pgm").to_str().unwrap(),
    ]);
    assert_eq!(code, 4);
}

#[test]
fn bench_csv_shape_and_idempotence() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let args = [
        "bench",
        "--kinds", "bilinear,ifa",
        "--seeds", "0,1",
        "--extra-pool", "0",
        "--out", out.to_str().unwrap(),
        "--set", "train.max_iter=3",
        "--set", "train.val_size=2",
        "--set", "train.log_interval=10",
    ];
    let (code, _, err) = run(&args);
    assert_eq!(code, 0, "{err}");
    let csv = std::fs::read_to_string(out.join("bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "kind,extra_pool,seed,miou,params,flops");
    assert_eq!(lines.len(), 1 + 2 * 2, "{csv}");
    // identical rerun rewrites the identical file
    let (code, _, _) = run(&args);
    assert_eq!(code, 0);
    assert_eq!(std::fs::read_to_string(out.join("bench.csv")).unwrap(), csv);
}

#[test]
fn flops_json_scales_as_documented() {
    let (code, out, err) = run(&["flops", "--set", "crop=[64,64]"]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let enc64 = v["encoder_flops"].as_u64().unwrap();
    let params64 = v["total_params"].as_u64().unwrap();

    let (_, out2, _) = run(&["flops", "--set", "crop=[128,128]"]);
    let v2: serde_json::Value = serde_json::from_str(&out2).unwrap();
    // area scaling: 2x the side, 4x the conv work; params unchanged
    assert_eq!(v2["encoder_flops"].as_u64().unwrap(), 4 * enc64);
    assert_eq!(v2["total_params"].as_u64().unwrap(), params64);

    let (code, _, err) = run(&["flops", "--set", "train.lr0=-2"]);
    assert_eq!(code, 1);
    assert!(err.contains("lr0"), "{err}");
}

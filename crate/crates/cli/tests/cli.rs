//! End-to-end tests of the volprop binary: every subcommand, the manifest
//! contract, determinism, and the exit-code mapping.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use volprop_core::ctio::{normalize_intensity, read_nvol};

fn volprop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volprop"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Fresh scratch directory under the system temp root.
fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("volprop-test-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn read_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap_or_else(|_| panic!("readable {}", path.display()))
        .lines()
        .map(str::to_string)
        .collect()
}

const TINY_NET: &[&str] = &[
    "--set",
    "net.crop_side=16",
    "--set",
    "net.group_channels=2,2,4,4,4",
    "--set",
    "net.blocks_per_group=1,1,1,1,1",
];

#[test]
fn synth_is_deterministic_and_counts_annotations() {
    let (a, b) = (scratch("synth-a"), scratch("synth-b"));
    for dir in [&a, &b] {
        let out = volprop(&[
            "synth",
            "--seed",
            "5",
            "--volumes",
            "2",
            "--nodules-per-volume",
            "2",
            "--side-mm",
            "48",
            "--spacing",
            "1.5",
            "--out",
            path_str(dir),
        ]);
        assert_code(&out, 0);
    }
    for name in ["vol000.nvol", "vol001.nvol", "annotations.csv"] {
        assert_eq!(
            fs::read(a.join(name)).expect("first run artifact"),
            fs::read(b.join(name)).expect("second run artifact"),
            "{name} differs between identical runs"
        );
    }
    // Manifests record their own output directory; everything else matches.
    let manifest = |dir: &Path| -> serde_json::Value {
        let mut v: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.join("manifest.json")).expect("manifest"))
                .expect("valid json");
        v.as_object_mut().expect("object").remove("out_dir").expect("out_dir field");
        v
    };
    assert_eq!(manifest(&a), manifest(&b), "manifests differ beyond out_dir");
    // Header plus volumes x nodules-per-volume rows.
    assert_eq!(read_lines(&a.join("annotations.csv")).len(), 1 + 2 * 2);
}

#[test]
fn synth_zero_volumes_still_writes_the_manifest() {
    let dir = scratch("synth-empty");
    assert_code(&volprop(&["synth", "--volumes", "0", "--out", path_str(&dir)]), 0);
    assert!(dir.join("manifest.json").is_file());
    assert_eq!(read_lines(&dir.join("annotations.csv")).len(), 1, "header only");
    let volumes = fs::read_dir(&dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "nvol"))
        .count();
    assert_eq!(volumes, 0);
}

#[test]
fn preprocess_resamples_and_normalizes() {
    let raw = scratch("prep-raw");
    assert_code(
        &volprop(&[
            "synth", "--volumes", "1", "--side-mm", "48", "--spacing", "2.0", "--out",
            path_str(&raw),
        ]),
        0,
    );

    // Halving the spacing roughly doubles each extent.
    let fine = scratch("prep-fine");
    assert_code(
        &volprop(&["preprocess", "--in", path_str(&raw), "--spacing-mm", "1.0", "--out", path_str(&fine)]),
        0,
    );
    let v = read_nvol(fs::File::open(fine.join("vol000.nvol")).unwrap()).unwrap();
    assert_eq!(v.dims(), (48, 48, 48));
    assert_eq!(v.spacing_mm(), [1.0; 3]);
    assert!(fine.join("manifest.json").is_file());
    assert_eq!(
        fs::read(raw.join("annotations.csv")).unwrap(),
        fs::read(fine.join("annotations.csv")).unwrap(),
        "world coordinates pass through unchanged"
    );

    // Resampling at the volume's own spacing is the identity at grid points,
    // so the output equals plain normalization within interpolation noise.
    let same = scratch("prep-same");
    assert_code(
        &volprop(&["preprocess", "--in", path_str(&raw), "--spacing-mm", "2.0", "--out", path_str(&same)]),
        0,
    );
    let original = read_nvol(fs::File::open(raw.join("vol000.nvol")).unwrap()).unwrap();
    let expected = normalize_intensity(&original);
    let got = read_nvol(fs::File::open(same.join("vol000.nvol")).unwrap()).unwrap();
    assert_eq!(got.dims(), original.dims());
    for (a, b) in got.voxels().iter().zip(expected.voxels()) {
        assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
    }
}

#[test]
fn train_eval_round_trip_with_resume() {
    let raw = scratch("pipe-raw");
    assert_code(
        &volprop(&[
            "synth", "--seed", "3", "--volumes", "2", "--side-mm", "32", "--spacing", "1.0",
            "--out", path_str(&raw),
        ]),
        0,
    );
    let data = scratch("pipe-data");
    assert_code(
        &volprop(&["preprocess", "--in", path_str(&raw), "--spacing-mm", "1.0", "--out", path_str(&data)]),
        0,
    );

    let run = scratch("pipe-train");
    let mut args = vec!["train", "--data", path_str(&data), "--out", path_str(&run)];
    args.extend_from_slice(TINY_NET);
    args.extend_from_slice(&[
        "--set",
        "train.epochs=1",
        "--set",
        "train.crops_per_epoch=2",
        "--set",
        "train.checkpoint_every=1",
        "--set",
        "train.lr_drop_epochs=",
    ]);
    let out = volprop(&args);
    assert_code(&out, 0);
    assert!(run.join("manifest.json").is_file());
    assert_eq!(read_lines(&run.join("loss.csv")).len(), 2, "header plus one epoch row");
    let checkpoint = run.join("checkpoints").join("epoch_0000.ckpt");
    assert!(checkpoint.is_file());

    // Resume restores the stored parameters and trains again.
    let out = volprop(&{
        let mut a = args.clone();
        a.push("--resume");
        a
    });
    assert_code(&out, 0);

    let eval = scratch("pipe-eval");
    let mut eargs = vec![
        "eval",
        "--data",
        path_str(&data),
        "--checkpoint",
        path_str(&checkpoint),
        "--out",
        path_str(&eval),
    ];
    eargs.extend_from_slice(TINY_NET);
    let out = volprop(&eargs);
    assert_code(&out, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean FROC"));
    assert!(eval.join("candidates.csv").is_file());
    assert!(eval.join("froc.csv").is_file());

    // Raw decodes without suppression.
    let raw_eval = scratch("pipe-eval-raw");
    let mut rargs = eargs.clone();
    rargs[6] = path_str(&raw_eval);
    rargs.push("--no-nms");
    assert_code(&volprop(&rargs), 0);
}

#[test]
fn train_drop_epochs_beyond_schedule_are_a_usage_error() {
    let data = scratch("sched-data");
    assert_code(&volprop(&["synth", "--volumes", "1", "--side-mm", "32", "--out", path_str(&data)]), 0);
    let run = scratch("sched-out");
    let mut args = vec!["train", "--data", path_str(&data), "--out", path_str(&run)];
    args.extend_from_slice(TINY_NET);
    args.extend_from_slice(&["--set", "train.epochs=1", "--set", "train.lr_drop_epochs=50,80"]);
    assert_code(&volprop(&args), 1);
}

#[test]
fn missing_data_and_checkpoints_are_data_errors() {
    let out = volprop(&["train", "--data", "/nonexistent/dataset", "--out", path_str(&scratch("t"))]);
    assert_code(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    let data = scratch("missing-ckpt-data");
    assert_code(&volprop(&["synth", "--volumes", "1", "--side-mm", "32", "--out", path_str(&data)]), 0);
    let eval_out = scratch("missing-ckpt-out");
    let mut args = vec![
        "eval",
        "--data",
        path_str(&data),
        "--checkpoint",
        "/nonexistent/weights.ckpt",
        "--out",
        path_str(&eval_out),
    ];
    args.extend_from_slice(TINY_NET);
    assert_code(&volprop(&args), 2);
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_code(&volprop(&["--help"]), 0);
    assert_code(&volprop(&["synth", "--volumes", "1", "--out", "/tmp/x", "--bogus-flag"]), 1);
    let out = volprop(&[
        "mem",
        "--set",
        "unknown.key=1",
        "--out",
        path_str(&scratch("mem-bad")),
    ]);
    assert_code(&out, 1);
}

#[test]
fn bench_reports_both_engines_with_ratio() {
    let mut args = vec!["bench", "--suite", "conv", "--crop-side", "16", "--reps", "3"];
    args.extend_from_slice(TINY_NET);
    let out = volprop(&args);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("gemm") && stdout.contains("slice"), "{stdout}");
    assert!(stdout.contains("ratio gemm/slice"), "{stdout}");

    let mut bad = args.clone();
    let reps_at = bad.iter().position(|a| *a == "3").unwrap();
    bad[reps_at] = "2";
    assert_code(&volprop(&bad), 1);

    let mut bn = args.clone();
    bn[2] = "bn";
    let out = volprop(&bn);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("separate") && stdout.contains("fused"), "{stdout}");
}

#[test]
fn mem_report_is_batch_linear_and_honors_budget() {
    let estimate = |batch: &str| -> serde_json::Value {
        let out = volprop(&["mem", "--crop-side", "64", "--batch", batch, "--json"]);
        assert_code(&out, 0);
        serde_json::from_slice(&out.stdout).expect("json report")
    };
    let (one, two) = (estimate("1"), estimate("2"));
    let activation = |v: &serde_json::Value| v["activation_total"].as_u64().expect("field");
    assert_eq!(activation(&two), 2 * activation(&one));

    let out = volprop(&["mem", "--crop-side", "128", "--budget", "12000000000"]);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("max feasible crop side"), "{stdout}");

    let dir = scratch("mem-out");
    assert_code(&volprop(&["mem", "--crop-side", "64", "--out", path_str(&dir)]), 0);
    assert!(dir.join("manifest.json").is_file());
    assert!(dir.join("mem.csv").is_file());
}

//! Black-box tests of the `twospeed` binary: flag handling, exit codes,
//! and the files each subcommand leaves behind. A small schedule run is
//! shared by the eval/sweep/saliency tests.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use twospeed_core::data::ChipDataset;
use twospeed_core::imgio::write_ppm;

const BIN: &str = env!("CARGO_BIN_EXE_twospeed");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn binary")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "`twospeed {}` failed: {}{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn expect_usage_error(args: &[&str]) -> String {
    let out = run(args);
    assert_eq!(
        out.status.code(),
        Some(2),
        "`twospeed {}` should exit 2, got {:?}: {}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct SmallRun {
    _root: tempfile::TempDir,
    data: PathBuf,
    run_dir: PathBuf,
    config: PathBuf,
}

impl SmallRun {
    fn model(&self, name: &str) -> String {
        self.run_dir
            .join("registry")
            .join("models")
            .join(name)
            .display()
            .to_string()
    }
}

fn write_config(path: &Path, data: &Path, run_dir: &Path) {
    let cfg = format!(
        r#"{{
  "dataset": "{data}",
  "output_dir": "{run}",
  "seed": 13,
  "split": {{"seed": 5, "holdout_fraction": 0.2, "val_fraction": 0.1, "increments": [0.5, 1.0]}},
  "slow_cadence": 2,
  "fast_model": {{"model": "hs_cnn", "block_filters": [[8,8],[16,16],[32,32]], "dense_sizes": [64], "dropout_rate": 0.15, "l2_lambda": 0.0001, "num_classes": 6, "input_size": 32}},
  "slow_model": {{"model": "vit", "image_size": 32, "patch_size": 8, "hidden_dim": 64, "mlp_dim": 128, "num_layers": 2, "num_heads": 4, "num_classes": 6, "dropout_rate": 0.1}},
  "fast_training": {{"epochs": 1, "batch_size": 64, "learning_rate": 0.004}},
  "slow_training": {{"epochs": 1, "batch_size": 32, "learning_rate": 0.001}},
  "augment": {{"flip_lr": 0.0, "flip_ud": 0.0, "brightness_delta_max": 10.0, "contrast_range": [0.9, 1.1], "saturation_range": [0.9, 1.1]}},
  "ensemble_weights": [0.5, 0.5],
  "timing": "zeroed"
}}
"#,
        data = data.display(),
        run = run_dir.display(),
    );
    std::fs::write(path, cfg).unwrap();
}

fn small_run() -> &'static SmallRun {
    static RUN: OnceLock<SmallRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let data = root.path().join("data");
        let run_dir = root.path().join("run");
        let config = root.path().join("run.json");
        run_ok(&[
            "synth",
            "--classes",
            "default6",
            "--per-class",
            "40",
            "--seed",
            "9",
            "--out",
            data.to_str().unwrap(),
        ]);
        write_config(&config, &data, &run_dir);
        run_ok(&["schedule", "--config", config.to_str().unwrap()]);
        SmallRun {
            _root: root,
            data,
            run_dir,
            config,
        }
    })
}

#[test]
fn synth_same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        run_ok(&[
            "synth",
            "--classes",
            "default6",
            "--per-class",
            "10",
            "--seed",
            "42",
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    for name in ["manifest.json", "labels.bin", "chips.bin"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name} differs across identical synth runs"
        );
    }
}

#[test]
fn synth_rejects_bad_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    let err = expect_usage_error(&[
        "synth",
        "--classes",
        "default6",
        "--per-class",
        "0",
        "--seed",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(err.contains("n_per_class"), "stderr: {err}");
    expect_usage_error(&[
        "synth",
        "--classes",
        "/nonexistent/classes.json",
        "--per-class",
        "4",
        "--seed",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
}

#[test]
fn synth_accepts_custom_class_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("classes.json");
    std::fs::write(
        &spec,
        r#"[
  {"name": "flat", "kind": {"kind": "blank", "noise": 4.0}},
  {"name": "weave", "kind": {"kind": "local_texture", "tile": 2, "noise": 6.0}}
]"#,
    )
    .unwrap();
    let out = dir.path().join("ds");
    let stdout = run_ok(&[
        "synth",
        "--classes",
        spec.to_str().unwrap(),
        "--per-class",
        "5",
        "--seed",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(stdout.contains("10 chips"), "stdout: {stdout}");
    let ds = ChipDataset::load(&out).unwrap();
    assert_eq!(ds.class_names(), ["flat".to_string(), "weave".to_string()]);
}

#[test]
fn import_packs_ppm_tree_and_names_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("tree");
    for class in ["alpha", "beta"] {
        let class_dir = src.join(class);
        std::fs::create_dir_all(&class_dir).unwrap();
        for i in 0..2 {
            let shade = if class == "alpha" { 40 } else { 200 };
            let px = vec![shade; 32 * 32 * 3];
            write_ppm(&class_dir.join(format!("{i}.ppm")), 32, 32, &px).unwrap();
        }
    }
    let out = dir.path().join("ds");
    let stdout = run_ok(&[
        "import",
        "--src",
        src.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(stdout.contains("4 chips"), "stdout: {stdout}");
    let ds = ChipDataset::load(&out).unwrap();
    assert_eq!(ds.len(), 4);
    assert_eq!(ds.class_names(), ["alpha".to_string(), "beta".to_string()]);

    // a wrong-geometry chip fails the whole import, naming the file
    write_ppm(&src.join("beta").join("small.ppm"), 16, 16, &vec![0; 768]).unwrap();
    let err = expect_usage_error(&[
        "import",
        "--src",
        src.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(err.contains("small.ppm"), "stderr: {err}");
}

#[test]
fn schedule_prints_row_labels_and_resumes() {
    let fixture = small_run();
    let metrics_path = fixture.run_dir.join("metrics.csv");
    let metrics = std::fs::read_to_string(&metrics_path).unwrap();
    let labels: Vec<&str> = metrics
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(labels, ["CNN-50", "ENS-100"], "metrics:\n{metrics}");

    // a rerun over the finished registry retrains nothing and rewrites
    // the same bytes
    let before = std::fs::read(&metrics_path).unwrap();
    let stdout = run_ok(&["schedule", "--config", fixture.config.to_str().unwrap()]);
    assert!(stdout.contains("schedule complete"), "stdout: {stdout}");
    assert_eq!(std::fs::read(&metrics_path).unwrap(), before);
}

#[test]
fn schedule_rejects_broken_configs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");

    std::fs::write(&config, "{ not json").unwrap();
    expect_usage_error(&["schedule", "--config", config.to_str().unwrap()]);

    // unknown fields are typos, not extensions
    let fixture = small_run();
    write_config(&config, &fixture.data, &dir.path().join("run"));
    let text = std::fs::read_to_string(&config)
        .unwrap()
        .replacen("\"seed\": 13", "\"sead\": 13", 1);
    std::fs::write(&config, text).unwrap();
    let err = expect_usage_error(&["schedule", "--config", config.to_str().unwrap()]);
    assert!(err.contains("sead"), "stderr: {err}");

    write_config(&config, Path::new("/nonexistent/data"), &dir.path().join("run"));
    let err = expect_usage_error(&["schedule", "--config", config.to_str().unwrap()]);
    assert!(err.contains("not a directory"), "stderr: {err}");

    expect_usage_error(&["schedule", "--config", "/nonexistent/cfg.json"]);
}

#[test]
fn eval_single_model_and_ensemble() {
    let fixture = small_run();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("reports");
    let stdout = run_ok(&[
        "eval",
        "--model",
        &fixture.model("fast-T2.tspd"),
        "--data",
        fixture.data.to_str().unwrap(),
        "--split",
        "holdout",
        "--split-seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(stdout.contains("n=48"), "48-chip holdout, got: {stdout}");
    assert!(out.join("confusion_hs_cnn.csv").exists());

    let stdout = run_ok(&[
        "eval",
        "--fast",
        &fixture.model("fast-T2.tspd"),
        "--slow",
        &fixture.model("slow-T2.tspd"),
        "--weights",
        "0.7,0.3",
        "--data",
        fixture.data.to_str().unwrap(),
        "--split",
        "full",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(stdout.contains("ensemble: n=240"), "stdout: {stdout}");
    assert!(out.join("confusion_ensemble.csv").exists());
}

#[test]
fn eval_flag_combinations_are_validated() {
    let fixture = small_run();
    let data = fixture.data.display().to_string();
    let fast = fixture.model("fast-T2.tspd");
    // --model excludes the ensemble flags; clap reports the conflict
    expect_usage_error(&["eval", "--model", &fast, "--fast", &fast, "--data", &data]);
    // --weights without --slow is meaningless
    expect_usage_error(&["eval", "--fast", &fast, "--weights", "0.5,0.5", "--data", &data]);
    // malformed weight lists
    let slow = fixture.model("slow-T2.tspd");
    let err = expect_usage_error(&[
        "eval", "--fast", &fast, "--slow", &slow, "--weights", "0.5,-1", "--data", &data,
    ]);
    assert!(err.contains("weights"), "stderr: {err}");
    expect_usage_error(&["eval", "--data", &data]);
}

#[test]
fn sweep_emits_nine_grid_rows() {
    let fixture = small_run();
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("sweep.csv");
    let stdout = run_ok(&[
        "sweep",
        "--fast",
        &fixture.model("fast-T2.tspd"),
        "--slow",
        &fixture.model("slow-T2.tspd"),
        "--data",
        fixture.data.to_str().unwrap(),
        "--split",
        "holdout",
        "--split-seed",
        "5",
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert!(stdout.contains("9 rows"), "stdout: {stdout}");
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "w_cnn,w_vit,overall_accuracy");
    assert_eq!(lines.len(), 10);
    assert!(lines[1].starts_with("0.1,0.9,"));
    assert!(lines[9].starts_with("0.9,0.1,"));
}

#[test]
fn saliency_writes_deterministic_maps() {
    let fixture = small_run();
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let stdout = run_ok(&[
            "saliency",
            "--model",
            &fixture.model("slow-T2.tspd"),
            "--data",
            fixture.data.to_str().unwrap(),
            "--index",
            "200",
            "--method",
            "occlusion",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(stdout.contains("chip 200"), "stdout: {stdout}");
    }
    for name in ["chip200_occlusion.pgm", "chip200_occlusion.ppm"] {
        assert_eq!(
            std::fs::read(out_a.join(name)).unwrap(),
            std::fs::read(out_b.join(name)).unwrap(),
            "{name} not deterministic"
        );
    }

    run_ok(&[
        "saliency",
        "--model",
        &fixture.model("slow-T2.tspd"),
        "--data",
        fixture.data.to_str().unwrap(),
        "--index",
        "0",
        "--method",
        "attention_rollout",
        "--out",
        out_a.to_str().unwrap(),
    ]);
    assert!(out_a.join("chip0_attention_rollout.pgm").exists());
}

#[test]
fn saliency_rejects_misuse() {
    let fixture = small_run();
    let data = fixture.data.display().to_string();
    let err = expect_usage_error(&[
        "saliency",
        "--model",
        &fixture.model("fast-T2.tspd"),
        "--data",
        &data,
        "--index",
        "0",
        "--method",
        "attention_rollout",
    ]);
    assert!(err.contains("attention"), "stderr: {err}");
    let err = expect_usage_error(&[
        "saliency",
        "--model",
        &fixture.model("fast-T2.tspd"),
        "--data",
        &data,
        "--index",
        "9999",
    ]);
    assert!(err.contains("out of range"), "stderr: {err}");
    let err = expect_usage_error(&[
        "saliency",
        "--model",
        &fixture.model("fast-T2.tspd"),
        "--data",
        &data,
        "--index",
        "0",
        "--class",
        "11",
    ]);
    assert!(err.contains("class 11"), "stderr: {err}");
}

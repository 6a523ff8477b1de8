//! Command-line behaviour through the built binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cinema(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cinema"))
        .args(args)
        .current_dir(dir)
        .env_remove("CINEMA_CACHE")
        .output()
        .unwrap()
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("stderr is not JSON: {}", String::from_utf8_lossy(&out.stderr)))
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

const MODEL: &str = r#"{"embed_dim": 8, "encoder_depth": 1, "encoder_heads": 2, "decoder_dim": 8, "decoder_depth": 1,
 "decoder_heads": 2, "mlp_ratio": 2, "conv_channels": [4, 4], "mask_ratio": 0.5,
 "views": [{"view": "sax", "size": [32, 32, 2]}, {"view": "lax4c", "size": [32, 32, 1]}]}"#;

fn setup(dir: &Path) {
    fs::write(
        dir.join("phantom.json"),
        r#"{"version": 1, "n_studies": 5, "seed": 2, "base": {"lv_semi_axes_ed": [14.0, 14.0, 26.0], "contraction": 0.8,
 "wall_thickness": 6.0, "rv_offset": 18.0, "base_plane_z_ed": 20.0, "base_plane_z_es": 10.0, "n_phases": 3,
 "noise_sigma": 0.02, "seed": 0}}"#,
    )
    .unwrap();
    fs::write(
        dir.join("grid.json"),
        r#"{"version": 1, "sax": {"spacing": [3.0, 3.0, 20.0], "size": [32, 32, 2]}, "lax": {"spacing": [3.0, 3.0], "size": [32, 32]}}"#,
    )
    .unwrap();
    fs::write(
        dir.join("unet.json"),
        format!(
            r#"{{"version": 1, "model": {MODEL}, "finetune": {{"train": {{"task": "segmentation", "epochs": 2, "warmup_epochs": 1,
 "peak_lr": 0.001, "end_lr": 1e-05, "batch_size": 2, "weight_decay": 0.05, "grad_clip_norm": 5.0,
 "validation_frequency": 1, "seed": 0}}, "arm": "unet", "views": ["lax4c"], "target_view": "lax4c", "unet_widths": [4, 4]}},
 "split": {{"n_val": 1, "n_test": 2}}}}"#
        ),
    )
    .unwrap();
}

#[test]
fn help_on_every_subcommand_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let commands: [&[&str]; 12] = [
        &[],
        &["phantom"],
        &["phantom", "generate"],
        &["data", "preprocess"],
        &["train"],
        &["train", "pretrain"],
        &["train", "finetune"],
        &["eval"],
        &["analyze", "assoc"],
        &["analyze", "survival"],
        &["analyze", "disparity"],
        &["report"],
    ];
    for c in commands {
        let mut args = c.to_vec();
        args.push("--help");
        let out = cinema(dir.path(), &args);
        assert_eq!(out.status.code(), Some(0), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{args:?}");
    }
    assert_eq!(cinema(dir.path(), &["--version"]).status.code(), Some(0));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = cinema(dir.path(), &["phantom", "generate", "--bogus", "x"]);
    assert_eq!(out.status.code(), Some(64));
    let e = stderr_json(&out);
    assert_eq!(e["error"]["kind"], "usage");
    assert!(e["error"]["message"].as_str().unwrap().contains("--bogus"));
    assert_eq!(cinema(dir.path(), &["frobnicate"]).status.code(), Some(64));
}

#[test]
fn bad_configs_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("v2.json"), r#"{"version": 2, "n_studies": 2, "seed": 0}"#).unwrap();
    fs::write(dir.path().join("extra.json"), r#"{"version": 1, "n_studies": 2, "seed": 0, "colour": "red"}"#).unwrap();
    fs::write(dir.path().join("broken.json"), "{").unwrap();
    for name in ["v2.json", "extra.json", "broken.json", "missing.json"] {
        let out = cinema(dir.path(), &["phantom", "generate", "--config", name, "--out", "o"]);
        assert_eq!(out.status.code(), Some(65), "{name}");
        assert_eq!(stderr_json(&out)["error"]["code"], 65);
    }
}

#[test]
fn pipeline_produces_a_dice_report_and_protects_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d);
    let ok = |args: &[&str]| {
        let out = cinema(d, args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    ok(&["phantom", "generate", "--config", "phantom.json", "--out", "raw"]);
    let manifest = read_json(&d.join("raw/manifest.json"));
    assert_eq!(manifest["status"], "completed");
    assert_eq!(manifest["summary"]["studies"].as_array().unwrap().len(), 5);

    let snapshot = |dir: &Path| -> Vec<(String, Vec<u8>)> {
        let mut v: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
            .collect();
        v.sort();
        v
    };
    let raw_before = snapshot(&d.join("raw"));
    ok(&["data", "preprocess", "--in", "raw", "--out", "data", "--grid", "grid.json"]);
    assert_eq!(snapshot(&d.join("raw")), raw_before);

    ok(&["train", "finetune", "--config", "unet.json", "--data", "data", "--out", "unet", "--seeds", "0"]);
    ok(&["eval", "--pred", "unet", "--gt", "data", "--out", "eval"]);
    ok(&["report", "--runs", "eval", "--out", "report", "--n-boot", "20"]);
    let report = fs::read_to_string(d.join("report/summary.csv")).unwrap();
    assert!(report.lines().next().unwrap().contains("metric"), "{report}");
    assert!(report.contains("dice"), "{report}");
    let dice = read_json(&d.join("eval/results.json"))["metrics"]["dice"]["mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&dice));

    // a completed run is never overwritten
    let before = fs::read(d.join("eval/manifest.json")).unwrap();
    let out = cinema(d, &["eval", "--pred", "unet", "--gt", "data", "--out", "eval"]);
    assert_eq!(out.status.code(), Some(70));
    assert_eq!(fs::read(d.join("eval/manifest.json")).unwrap(), before);

    // outputs may not be nested in inputs
    let out = cinema(d, &["data", "preprocess", "--in", "raw", "--out", "raw/inner", "--grid", "grid.json"]);
    assert_eq!(out.status.code(), Some(65));
    assert!(!d.join("raw/inner").exists());

    // a finetune arm that needs a checkpoint fails as a config error
    let ft = fs::read_to_string(d.join("unet.json")).unwrap().replace(r#""arm": "unet""#, r#""arm": "fine_tune""#);
    fs::write(d.join("ft.json"), ft).unwrap();
    let out = cinema(d, &["train", "finetune", "--config", "ft.json", "--data", "data", "--out", "ft", "--seeds", "0"]);
    assert_eq!(out.status.code(), Some(65), "{}", String::from_utf8_lossy(&out.stderr));
}

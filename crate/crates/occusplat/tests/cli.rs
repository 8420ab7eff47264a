//! CLI behavior: exit codes and a small dataset round trip.

use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_occusplat"))
}

#[test]
fn usage_errors_exit_2() {
    let out = bin().arg("--definitely-not-a-flag").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "convert",
            "--input",
            dir.path().join("nope").to_str().unwrap(),
            "--output",
            dir.path().join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn synth_convert_render_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("synth.json");
    std::fs::write(
        &cfg,
        r#"{"frames": 4, "width": 48, "height": 48, "road_length": 10.0}"#,
    )
    .unwrap();
    let run = |args: &[&str]| {
        let out = bin().args(args).output().unwrap();
        assert!(
            out.status.success(),
            "{:?} failed: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let ds = root.join("ds");
    let init = root.join("init");
    run(&["synth", "--output", ds.to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert!(ds.join("manifest.json").exists());
    assert!(ds.join("images/frame_0003.png").exists());
    run(&["convert", "--input", ds.to_str().unwrap(), "--output", init.to_str().unwrap()]);
    assert!(init.join("model.json").exists());
    assert!(init.join("street.ply").exists());
    assert!(init.join("tracks.json").exists());
    let renders = root.join("renders");
    run(&[
        "render",
        "--model",
        init.to_str().unwrap(),
        "--input",
        ds.to_str().unwrap(),
        "--output",
        renders.to_str().unwrap(),
        "--frames",
        "0,2",
    ]);
    assert!(renders.join("frame_0000.png").exists());
    assert!(renders.join("frame_0002.png").exists());
    assert!(!renders.join("frame_0001.png").exists());
    let report = root.join("eval.json");
    run(&[
        "eval",
        "--model",
        init.to_str().unwrap(),
        "--input",
        ds.to_str().unwrap(),
        "--output",
        report.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&report).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(json["psnr_mean"].as_f64().unwrap().is_finite());
    assert_eq!(json["frames"].as_array().unwrap().len(), 4);
}

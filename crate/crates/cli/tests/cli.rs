use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const SMALL: &str = r#"schema_version = 1
seed = 5

[camera]
sensor_width_px = 480
sensor_height_px = 360
hr_width_px = 960
hr_height_px = 540
hr_pixel_pitch_mm = 0.0075

[simulate]
scene = "tilted_plane"
tilt_deg = 20.0
"#;

fn lfdepth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfdepth"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = lfdepth(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the small-camera config and simulates a pair into `dir/sim`.
fn setup(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = dir.join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let sim = dir.join("sim");
    ok(&["-c", s(&cfg), "-o", s(&sim), "simulate"]);
    (cfg, sim)
}

fn pfm_dims(path: &Path) -> (usize, usize) {
    let bytes = fs::read(path).unwrap();
    let text = String::from_utf8_lossy(&bytes[..32]);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("Pf"));
    let dims: Vec<usize> = lines
        .next()
        .unwrap()
        .split_whitespace()
        .map(|t| t.parse().unwrap())
        .collect();
    (dims[0], dims[1])
}

#[test]
fn pipeline_writes_rgbd_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, sim) = setup(tmp.path());
    for f in [
        "lightfield.png",
        "hr.png",
        "ground_truth.csv",
        "camera.toml",
        "manifest.toml",
    ] {
        assert!(sim.join(f).is_file(), "{f}");
    }
    let run = tmp.path().join("run");
    ok(&[
        "-c",
        s(&cfg),
        "-o",
        s(&run),
        "--lightfield",
        s(&sim.join("lightfield.png")),
        "--hr",
        s(&sim.join("hr.png")),
        "pipeline",
    ]);
    for f in [
        "color.png",
        "depth.pfm",
        "manifest.toml",
        "registration.toml",
        "cloud.ply",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert_eq!(pfm_dims(&run.join("depth.pfm")), (960, 540));
    let (depth, mask) = lfdepth::io::read_pfm(&run.join("depth.pfm")).unwrap();
    assert!(mask.count() > 1000);
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            if mask.get(x, y) {
                let v = depth.get(x, y) as f64;
                assert!((60.0..70.0).contains(&v), "{v}");
            }
        }
    }

    let manifest: toml::Table = fs::read_to_string(run.join("manifest.toml"))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(manifest["subcommand"].as_str(), Some("pipeline"));
    assert_eq!(manifest["seed"].as_integer(), Some(5));
    let cfg_text = fs::read(run.join("config.toml")).unwrap();
    assert_eq!(
        manifest["config_sha256"].as_str().unwrap(),
        hex::encode(Sha256::digest(&cfg_text))
    );
    let inputs = manifest["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 2);
    let lf_bytes = fs::read(sim.join("lightfield.png")).unwrap();
    assert_eq!(
        inputs[0]["sha256"].as_str().unwrap(),
        hex::encode(Sha256::digest(&lf_bytes))
    );
    let outputs = manifest["outputs"].as_array().unwrap();
    let depth_entry = outputs
        .iter()
        .find(|o| o["path"].as_str() == Some("depth.pfm"))
        .unwrap();
    let depth_bytes = fs::read(run.join("depth.pfm")).unwrap();
    assert_eq!(
        depth_entry["sha256"].as_str().unwrap(),
        hex::encode(Sha256::digest(&depth_bytes))
    );
}

#[test]
fn outputs_independent_of_worker_count_and_replayable() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, sim) = setup(tmp.path());
    let lf = sim.join("lightfield.png");
    let hr = sim.join("hr.png");
    let mut runs = Vec::new();
    for (name, workers) in [("w1", "1"), ("w4", "4"), ("w1b", "1")] {
        let out = tmp.path().join(name);
        ok(&[
            "-c",
            s(&cfg),
            "-o",
            s(&out),
            "--workers",
            workers,
            "--lightfield",
            s(&lf),
            "--hr",
            s(&hr),
            "pipeline",
        ]);
        runs.push(out);
    }
    for f in [
        "depth.pfm",
        "depth_view.pfm",
        "disparity.csv",
        "cloud.ply",
        "registration.toml",
    ] {
        let a = fs::read(runs[0].join(f)).unwrap();
        for r in &runs[1..] {
            assert!(
                a == fs::read(r.join(f)).unwrap(),
                "{f} differs in {}",
                r.display()
            );
        }
    }
    // The recorded configuration carries the inputs and reproduces the run.
    let replay = tmp.path().join("replay");
    ok(&[
        "-c",
        s(&runs[0].join("config.toml")),
        "-o",
        s(&replay),
        "pipeline",
    ]);
    assert!(
        fs::read(replay.join("depth.pfm")).unwrap() == fs::read(runs[0].join("depth.pfm")).unwrap()
    );
}

#[test]
fn stepwise_subcommands_match_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, sim) = setup(tmp.path());
    let lf = sim.join("lightfield.png");
    let hr = sim.join("hr.png");
    let p = |n: &str| tmp.path().join(n);
    ok(&[
        "-c",
        s(&cfg),
        "-o",
        s(&p("full")),
        "--lightfield",
        s(&lf),
        "--hr",
        s(&hr),
        "pipeline",
    ]);
    ok(&["-c", s(&cfg), "-o", s(&p("cal")), "calibrate"]);
    ok(&[
        "-c",
        s(&cfg),
        "-o",
        s(&p("d")),
        "--lightfield",
        s(&lf),
        "disparity",
    ]);
    ok(&[
        "-c",
        s(&cfg),
        "-o",
        s(&p("z")),
        "--disparity",
        s(&p("d").join("disparity.csv")),
        "--calibration",
        s(&p("cal").join("calibration.csv")),
        "depth",
    ]);
    ok(&[
        "-c",
        s(&cfg),
        "-o",
        s(&p("v")),
        "--lightfield",
        s(&lf),
        "reconstruct",
    ]);
    ok(&[
        "-c",
        s(&cfg),
        "-o",
        s(&p("f")),
        "--lightfield",
        s(&lf),
        "--hr",
        s(&hr),
        "--depth",
        s(&p("z").join("depth_view.pfm")),
        "fuse",
    ]);
    let same = |a: PathBuf, b: PathBuf| fs::read(&a).unwrap() == fs::read(&b).unwrap();
    assert!(same(
        p("d").join("disparity.csv"),
        p("full").join("disparity.csv")
    ));
    assert!(same(
        p("z").join("depth_view.pfm"),
        p("full").join("depth_view.pfm")
    ));
    assert!(same(p("v").join("view.png"), p("full").join("view.png")));
    assert!(same(p("f").join("depth.pfm"), p("full").join("depth.pfm")));
}

#[test]
fn evaluate_sweep_reports_nine_depths() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ev");
    ok(&["-o", s(&out), "evaluate", "--protocol", "fig4"]);
    let csv = fs::read_to_string(out.join("precision.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("z_true_mm,mean_w_mm,std_w_mm,n_frames,n_depth_samples")
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 9);
    for r in rows {
        let n_frames: usize = r.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(n_frames, 12);
    }
    assert!(out.join("precision_errorbar.png").is_file());
    assert!(out.join("precision_summary.toml").is_file());
}

#[test]
fn misspelled_key_fails_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "schema_version = 1\n[disparity]\ntreshold = 0.1\n").unwrap();
    let out = tmp.path().join("out");
    let r = lfdepth(&["-c", s(&cfg), "-o", s(&out), "simulate"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("treshold"));
    assert!(!out.exists());

    fs::write(&cfg, "[camera]\n").unwrap();
    assert_eq!(
        lfdepth(&["-c", s(&cfg), "-o", s(&out), "simulate"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn exit_codes_distinguish_error_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = tmp.path().join("out");
    // Required input not configured.
    let r = lfdepth(&["-c", s(&cfg), "-o", s(&out), "disparity"]);
    assert_eq!(r.status.code(), Some(2));
    // Configured input missing on disk.
    let missing = tmp.path().join("missing.png");
    let r = lfdepth(&[
        "-c",
        s(&cfg),
        "-o",
        s(&out),
        "--lightfield",
        s(&missing),
        "disparity",
    ]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("disparity"));
    // Missing configuration file.
    let r = lfdepth(&["-c", s(&tmp.path().join("none.toml")), "simulate"]);
    assert_eq!(r.status.code(), Some(3));

    // A featureless scene gives no disparities: processing error naming the stage.
    let flat = tmp.path().join("flat.toml");
    fs::write(
        &flat,
        format!("{SMALL}scene = \"plane\"\n[simulate.texture]\nkind = \"uniform\"\n")
            .replace("scene = \"tilted_plane\"\n", ""),
    )
    .unwrap();
    let sim = tmp.path().join("flat");
    ok(&["-c", s(&flat), "-o", s(&sim), "simulate"]);
    let r = lfdepth(&[
        "-c",
        s(&flat),
        "-o",
        s(&out),
        "--lightfield",
        s(&sim.join("lightfield.png")),
        "--hr",
        s(&sim.join("hr.png")),
        "pipeline",
    ]);
    assert_eq!(r.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&r.stderr).contains("interpolation"));
}

#[test]
fn help_lists_every_subcommand() {
    let r = lfdepth(&["--help"]);
    assert!(r.status.success());
    let text = String::from_utf8_lossy(&r.stdout);
    for cmd in [
        "simulate",
        "calibrate",
        "superres",
        "disparity",
        "depth",
        "reconstruct",
        "fuse",
        "evaluate",
        "pipeline",
    ] {
        assert!(text.contains(cmd), "{cmd}");
    }
}

use std::path::Path;
use std::process::{Command, Output};

use rand::Rng as _;

use lensless_core::filter::{FilterMeta, FilterTrainConfig, JointFilterParams};
use lensless_core::{io, rng, ImageRGB, Mat};

fn lensless(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lensless"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn lensless")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = lensless(args, cwd);
    assert!(
        out.status.success(),
        "lensless {} exited {:?}: {}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn simulated(dir: &Path, extra: &[&str]) {
    ok(&["mask-gen", "random", "--k", "96", "-o", "mask.ltm"], dir);
    let mut args = vec![
        "simulate",
        "--mask",
        "mask.ltm",
        "--scene-size",
        "32",
        "--meas-size",
        "64",
        "-o",
        "sim",
    ];
    args.extend_from_slice(extra);
    ok(&args, dir);
}

#[test]
fn mls_mask_has_paper_length() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &["mask-gen", "mls", "--order", "8", "--repeats", "3", "-o", "mls.ltm"],
        dir.path(),
    );
    let m = io::load_mat(dir.path().join("mls.ltm")).unwrap();
    assert_eq!(m.as_slice().len(), 765);
    assert!(dir.path().join("mls.pgm").exists());
    assert!(dir.path().join("mls.manifest.json").exists());
}

#[test]
fn random_mask_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &["mask-gen", "random", "--k", "770", "--seed", "7", "-o", "a.ltm"],
        dir.path(),
    );
    ok(
        &["mask-gen", "random", "--k", "770", "--seed", "7", "-o", "b.ltm"],
        dir.path(),
    );
    ok(
        &["mask-gen", "random", "--k", "770", "--seed", "8", "-o", "c.ltm"],
        dir.path(),
    );
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.ltm"), read("b.ltm"));
    assert_ne!(read("a.ltm"), read("c.ltm"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = lensless(&["mask-gen", "mls", "--order", "8", "--repeats", "3"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = lensless(&["mask-gen", "mls", "--order", "99", "-o", "x.ltm"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = lensless(
        &["reconstruct", "--sysmat", "missing", "-i", "x.ltm", "-o", "r"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_scene_gives_zero_measurement_and_manifest_hashes() {
    let dir = tempfile::tempdir().unwrap();
    io::save_mat(dir.path().join("zero.ltm"), &Mat::zeros(32, 32)).unwrap();
    simulated(dir.path(), &["--scene", "zero.ltm"]);
    let y = io::load_mat(dir.path().join("sim/meas/meas_0000.ltm")).unwrap();
    assert_eq!(y.shape(), (64, 64));
    assert_eq!(y.max_abs(), 0.0);

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("sim/manifest.json")).unwrap()).unwrap();
    let outputs = manifest["outputs"].as_array().unwrap();
    assert!(outputs.len() >= 8);
    for o in outputs {
        let path = dir.path().join(o["path"].as_str().unwrap());
        let digest = o["sha256"].as_str().unwrap();
        assert_eq!(digest.len(), 64);
        let again = Command::new("sha256sum").arg(&path).output();
        if let Ok(again) = again {
            assert!(String::from_utf8_lossy(&again.stdout).starts_with(digest));
        }
    }
}

#[test]
fn coding_only_matches_coding_term() {
    let dir = tempfile::tempdir().unwrap();
    simulated(dir.path(), &["--count", "1", "--coding-only"]);
    let sm = lensless_core::SystemMatrices::load(dir.path().join("sim/sysmat")).unwrap();
    let x = io::load_mat(dir.path().join("sim/scenes/scene_0000.ltm")).unwrap();
    let y = io::load_mat(dir.path().join("sim/meas/meas_0000.ltm")).unwrap();
    let yc = lensless_core::mat::sandwich(&sm.pc, &x, &sm.qc).unwrap();
    assert!(y.rel_error(&yc).unwrap() < 1e-6);
}

#[test]
fn closed_and_nesterov_agree_without_open_term() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let mut r = rng::stream(11, "cli-test");
    let mut rnd = |rows: usize, cols: usize| Mat::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0));
    let (pc, qc, y) = (rnd(24, 12), rnd(20, 10), rnd(24, 20));
    for (name, m) in [
        ("po", Mat::zeros(24, 12)),
        ("qo", Mat::zeros(20, 10)),
        ("pc", pc),
        ("qc", qc),
    ] {
        io::save_mat(p.join(format!("sys/{name}.ltm")), &m).unwrap();
    }
    io::save_mat(p.join("y.ltm"), &y).unwrap();
    JointFilterParams::new(Mat::zeros(24, 20), Mat::filled(24, 20, 1.0))
        .unwrap()
        .save(
            p.join("filter"),
            &FilterMeta {
                config: FilterTrainConfig::default(),
                initial_loss: 0.0,
                final_loss: 0.0,
                train_scenes: 0,
            },
        )
        .unwrap();
    ok(
        &[
            "reconstruct",
            "--sysmat",
            "sys",
            "--filter",
            "filter",
            "-i",
            "y.ltm",
            "--tau",
            "1",
            "-o",
            "closed",
        ],
        p,
    );
    ok(
        &[
            "reconstruct",
            "--sysmat",
            "sys",
            "-i",
            "y.ltm",
            "--tau",
            "1",
            "--method",
            "nesterov",
            "--iterations",
            "800",
            "-o",
            "nest",
        ],
        p,
    );
    let a = io::load_mat(p.join("closed/y.ltm")).unwrap();
    let b = io::load_mat(p.join("nest/y.ltm")).unwrap();
    assert!(b.rel_error(&a).unwrap() < 1e-4, "{}", b.rel_error(&a).unwrap());
    let timing: serde_json::Value =
        serde_json::from_slice(&std::fs::read(p.join("closed/timing.json")).unwrap()).unwrap();
    assert_eq!(timing["frames"], 1);
    assert!(timing["mean_ms"].as_f64().unwrap() >= 0.0);
}

#[test]
fn full_pipeline_with_rgb_stream_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    simulated(p, &["--count", "3"]);
    std::fs::write(
        p.join("cfg.json"),
        r#"{"filter": {"epochs": 30}, "paths": {"sysmat": "sim/sysmat"}}"#,
    )
    .unwrap();
    let out = ok(&["--config", "cfg.json", "train-filter", "-o", "filter"], p);
    assert!(out.contains("over 30 epochs"), "{out}");
    let out = ok(
        &["--config", "cfg.json", "train-filter", "--epochs", "10", "-o", "filter"],
        p,
    );
    assert!(out.contains("over 10 epochs"), "{out}");

    let out = ok(
        &[
            "reconstruct",
            "--sysmat",
            "sim/sysmat",
            "--filter",
            "filter",
            "-i",
            "sim/meas",
            "-o",
            "rec",
        ],
        p,
    );
    assert!(out.starts_with("3 frame(s)"), "{out}");

    let ch: Vec<Mat> = (0..3)
        .map(|i| io::load_mat(p.join(format!("sim/meas/meas_{i:04}.ltm"))).unwrap())
        .collect();
    let peak = ch.iter().map(Mat::max).fold(0.0, f64::max);
    let [r, g, b]: [Mat; 3] = ch
        .iter()
        .map(|m| m.scale(1.0 / peak))
        .collect::<Vec<_>>()
        .try_into()
        .unwrap();
    io::save_image(p.join("rgb.ppm"), &ImageRGB::new(r, g, b).unwrap()).unwrap();
    ok(
        &[
            "reconstruct",
            "--sysmat",
            "sim/sysmat",
            "--filter",
            "filter",
            "-i",
            "rgb.ppm",
            "-o",
            "rgb",
        ],
        p,
    );
    assert!(io::load_image(p.join("rgb/rgb.ppm")).is_ok());
    assert!(p.join("rgb/rgb_g.ltm").exists());

    let bad = lensless(&["--config", "nope.json", "train-filter", "-o", "f"], p);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn calibration_contract() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["mask-gen", "random", "--k", "96", "-o", "mask.ltm"], p);
    ok(
        &[
            "simulate",
            "--mask",
            "mask.ltm",
            "--scene-size",
            "48",
            "--meas-size",
            "64",
            "--count",
            "1",
            "-o",
            "sim",
        ],
        p,
    );
    let out = ok(
        &[
            "calibrate",
            "--sysmat",
            "sim/sysmat",
            "--save-slits",
            "slits",
            "-o",
            "cal",
        ],
        p,
    );
    assert!(out.contains("converged: true"), "{out}");
    for m in ["po", "qo", "pc", "qc"] {
        assert!(p.join(format!("cal/{m}.ltm")).exists());
    }
    let out = ok(&["calibrate", "--slits", "slits", "-o", "cal2"], p);
    assert!(out.contains("converged: true"), "{out}");

    let out = ok(
        &[
            "calibrate",
            "--sysmat",
            "sim/sysmat",
            "--max-iterations",
            "1",
            "--tolerance",
            "0",
            "-o",
            "cal3",
        ],
        p,
    );
    assert!(out.contains("converged: false"), "{out}");

    std::fs::remove_file(p.join("slits/v_0003.ltm")).unwrap();
    let out = lensless(&["calibrate", "--slits", "slits", "-o", "cal4"], p);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("v_0003.ltm"));
}

#[test]
fn optimize_mask_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(
        &[
            "optimize-mask",
            "--scene-size",
            "32",
            "--meas-size",
            "64",
            "--k",
            "64",
            "--population",
            "6",
            "--generations",
            "4",
            "-o",
            "ga",
        ],
        p,
    );
    let csv = std::fs::read_to_string(p.join("ga/history.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "generation,best,mean");
    assert_eq!(lines.len(), 5);
    assert_eq!(io::load_mat(p.join("ga/best.ltm")).unwrap().as_slice().len(), 64);
    assert!(p.join("ga/best.pgm").exists());
}

#[test]
fn tactile_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&["tactile", "calibrate-lut", "-o", "lut.json"], p);
    ok(&["tactile", "render", "--press", "0", "-o", "bg.ppm"], p);
    ok(
        &[
            "tactile",
            "render",
            "--press",
            "0.5",
            "--center",
            "98,101",
            "-o",
            "press.ppm",
        ],
        p,
    );
    ok(
        &[
            "tactile",
            "depth",
            "-i",
            "bg.ppm",
            "--lut",
            "lut.json",
            "--background",
            "bg.ppm",
            "-o",
            "flat",
        ],
        p,
    );
    assert!(io::load_mat(p.join("flat/depth.ltm")).unwrap().max_abs() <= 0.02);
    ok(
        &[
            "tactile",
            "depth",
            "-i",
            "press.ppm",
            "--lut",
            "lut.json",
            "--background",
            "bg.ppm",
            "-o",
            "depth",
        ],
        p,
    );
    let d = io::load_mat(p.join("depth/depth.ltm")).unwrap();
    let truth = io::load_mat(p.join("press.depth.ltm")).unwrap();
    let (mut se, mut n) = (0.0, 0.0);
    for (a, t) in d.as_slice().iter().zip(truth.as_slice()) {
        if *t > 0.1 {
            se += (a - t).powi(2);
            n += 1.0;
        }
    }
    assert!((se / n).sqrt() <= 0.05);

    ok(
        &[
            "tactile",
            "render-markers",
            "--frames",
            "4",
            "--step",
            "0.5,-0.25",
            "-o",
            "frames",
        ],
        p,
    );
    ok(&["tactile", "markers", "--frames", "frames", "-o", "markers.csv"], p);
    let csv = std::fs::read_to_string(p.join("markers.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("id,u,v,du,dv,lost"));
    assert_eq!(csv.lines().count(), 65);
    let row: Vec<f64> = csv
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert!((row[3] - 1.5).abs() < 0.1 && (row[4] + 0.75).abs() < 0.1);

    let out = lensless(
        &[
            "tactile",
            "depth",
            "-i",
            "press.ppm",
            "--background",
            "bg.ppm",
            "-o",
            "x",
        ],
        p,
    );
    assert_eq!(out.status.code(), Some(2));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use atlas_slam::evaluation::{ate, default_tolerance};
use atlas_slam::io::{read_trajectory_file, write_trajectory_file};
use nalgebra::Vector3;
use serde_json::Value;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atlas-slam")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn simulate(dir: &Path, name: &str, config: &str) -> String {
    let cfg = dir.join(format!("{name}.cfg"));
    fs::write(&cfg, config).unwrap();
    let out = dir.join(name);
    ok(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    out.to_str().unwrap().to_string()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_writes_a_deterministic_sequence() {
    let tmp = tempfile::tempdir().unwrap();
    let a = simulate(tmp.path(), "a", "sim.frames = 100\nsim.seed = 5\n");
    let b = simulate(tmp.path(), "b", "sim.frames = 100\nsim.seed = 5\n");
    let feats = fs::read_dir(Path::new(&a).join("frames")).unwrap().count();
    assert_eq!(feats, 100);
    for f in ["gt_trajectory.txt", "scene_meta.json", "frames/000000.feat", "frames/000099.feat"] {
        assert_eq!(fs::read(Path::new(&a).join(f)).unwrap(), fs::read(Path::new(&b).join(f)).unwrap(), "{f}");
    }
    assert_eq!(read_trajectory_file(&Path::new(&a).join("gt_trajectory.txt")).unwrap().len(), 100);
}

#[test]
fn simulate_rejects_bad_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "sim.frames = 50\ntrajectory.scan_radius = 25\n").unwrap();
    let out = cli(&["simulate", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("s").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("frame 0"));

    fs::write(&cfg, "sim.frames = 50\nsim.colour = red\n").unwrap();
    let out = cli(&["simulate", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("s").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sim.colour"));

    let out = cli(&["simulate", "--config", tmp.path().join("missing.cfg").to_str().unwrap(), "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn clean_run_is_fully_covered_and_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = simulate(tmp.path(), "seq", "sim.frames = 500\nsim.seed = 3\n");
    let (o1, o2) = (tmp.path().join("o1"), tmp.path().join("o2"));
    for o in [&o1, &o2] {
        ok(&["run", "--sequence", &seq, "--out", o.to_str().unwrap(), "--seed", "11"]);
    }
    for f in ["trajectory.txt", "stats.json", "timeline.csv", "runlog.json"] {
        assert_eq!(fs::read(o1.join(f)).unwrap(), fs::read(o2.join(f)).unwrap(), "{f} differs");
    }
    let stats = json(&o1.join("stats.json"));
    let g = &stats["global"];
    assert_eq!(g["coverage_after_init_pct"].as_f64(), Some(100.0));
    assert!(g["coverage_pct"].as_f64().unwrap() >= 98.0);
    assert_eq!(g["coverage_pct"].as_f64().unwrap() + g["lost_pct"].as_f64().unwrap(), 100.0);
    assert_eq!(g["n_maps"].as_u64(), Some(1));
    for key in ["n_merges", "n_relocations", "n_kf", "n_mp"] {
        assert!(g[key].is_u64(), "{key}");
    }
    assert!(stats["per_map"].is_array() && stats["largest_map"].is_object());
    assert!(fs::read_to_string(o1.join("timeline.csv")).unwrap().starts_with("map_id,start_frame,end_frame\n0,"));
    assert!(json(&o1.join("atlas.json"))["maps"].is_array());

    let report: Value = serde_json::from_str(&ok(&[
        "eval",
        "--estimate",
        o1.join("trajectory.txt").to_str().unwrap(),
        "--gt",
        &format!("{seq}/gt_trajectory.txt"),
        "--runlog",
        o1.join("runlog.json").to_str().unwrap(),
    ]))
    .unwrap();
    let path_length = json(&Path::new(&seq).join("scene_meta.json"))["path_length"].as_f64().unwrap();
    assert!(report["rms_ate"].as_f64().unwrap() < 0.01 * path_length);
    assert_eq!(report["coverage_pct"], g["coverage_pct"]);

    ok(&["run", "--sequence", &seq, "--out", tmp.path().join("c").to_str().unwrap(), "--mode", "concurrent"]);
    let c = json(&tmp.path().join("c/stats.json"));
    assert!(c["global"]["coverage_pct"].as_f64().unwrap() >= 90.0);
}

#[test]
fn run_input_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = simulate(tmp.path(), "seq", "sim.frames = 40\n");
    fs::remove_file(Path::new(&seq).join("scene_meta.json")).unwrap();
    let out = cli(&["run", "--sequence", &seq, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("calibration"));

    let cfg = tmp.path().join("cam.cfg");
    fs::write(
        &cfg,
        "camera.fx = 300\ncamera.fy = 300\ncamera.cx = 320\ncamera.cy = 240\ncamera.k1 = -0.01\ncamera.k2 = 0.002\ncamera.k3 = 0\ncamera.k4 = 0\ncamera.width = 640\ncamera.height = 480\n",
    )
    .unwrap();
    ok(&["run", "--sequence", &seq, "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert!(tmp.path().join("o/trajectory.txt").exists());

    fs::write(&cfg, "thresholds.theta_trak = 20\n").unwrap();
    let out = cli(&["run", "--sequence", &seq, "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let out = cli(&["run", "--sequence", tmp.path().join("nowhere").to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = cli(&["run", "--sequence", &seq, "--out", "o", "--mode", "parallel"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_matches_library_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = simulate(tmp.path(), "seq", "sim.frames = 120\nsim.seed = 2\n");
    let gt_path = format!("{seq}/gt_trajectory.txt");
    let same: Value = serde_json::from_str(&ok(&["eval", "--estimate", &gt_path, "--gt", &gt_path])).unwrap();
    assert_eq!(same["rms_ate"].as_f64(), Some(0.0));
    assert_eq!(same["n_associated"].as_u64(), Some(120));

    let gt = read_trajectory_file(Path::new(&gt_path)).unwrap();
    let mut est = gt.clone();
    for (i, e) in est.iter_mut().enumerate() {
        let c = e.center() + Vector3::new(0.0, 0.3 * (i as f64 * 0.37).sin(), 0.1 * (i as f64 * 0.11).cos());
        e.pose_wc.translation = c * 2.5;
    }
    let est_path = tmp.path().join("est.txt");
    write_trajectory_file(&est_path, &est).unwrap();
    let est = read_trajectory_file(&est_path).unwrap();
    let oracle = ate(&est, &gt, default_tolerance(&gt)).unwrap();
    let rep: Value = serde_json::from_str(&ok(&["eval", "--estimate", est_path.to_str().unwrap(), "--gt", &gt_path])).unwrap();
    assert!((rep["rms_ate"].as_f64().unwrap() - oracle.rms).abs() < 1e-12);
    assert!(oracle.rms > 0.01);

    let mut shifted = gt.clone();
    for e in shifted.iter_mut() {
        e.timestamp += 1000.0;
    }
    write_trajectory_file(&est_path, &shifted).unwrap();
    let out = cli(&["eval", "--estimate", est_path.to_str().unwrap(), "--gt", &gt_path]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn vocabulary_round_trip_through_run() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = simulate(tmp.path(), "seq", "sim.frames = 40\nsim.seed = 9\n");
    let voc = tmp.path().join("voc.bin");
    let out = ok(&["vocab", "--out", voc.to_str().unwrap(), "--sequence", &seq, "--branching", "6", "--depth", "2"]);
    assert!(out.contains("words 36"), "{out}");
    ok(&["run", "--sequence", &seq, "--out", tmp.path().join("o").to_str().unwrap(), "--vocabulary", voc.to_str().unwrap()]);
    fs::write(&voc, b"garbage").unwrap();
    let out = cli(&["run", "--sequence", &seq, "--out", tmp.path().join("o").to_str().unwrap(), "--vocabulary", voc.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use extremeseg::phantom::{sphere, PhantomParams};
use extremeseg::pipeline::{initial_pseudo_label, PipelineConfig};
use extremeseg::points::PointsFile;
use extremeseg::volume::{load_mask, load_probability, load_volume, read_header, save_mask, save_volume, Geometry, Mask, Volume};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_extremeseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(cli(&[]).status.code(), Some(1));
    assert_eq!(cli(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cli(&["phantom"]).status.code(), Some(1));
    assert_eq!(cli(&["--help"]).status.code(), Some(0));
}

#[test]
fn simulate_points_on_a_cube() {
    let dir = tempfile::tempdir().unwrap();
    let g = Geometry::isotropic([8, 8, 8]);
    let cube = Mask::from_fn(g, |q| q.iter().all(|&c| (2..5).contains(&c)));
    save_mask(&cube, &dir.path().join("cube")).unwrap();
    let out = dir.path().join("pts.json");
    let o = cli(&["simulate-points", "--gt", p(&dir.path().join("cube")), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pts: PointsFile = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(pts.points.x_min, [2, 2, 2]);
    assert_eq!(pts.points.x_max, [4, 2, 2]);
    assert_eq!(pts.points.z_max, [2, 2, 4]);

    // Same seed twice gives the same bytes.
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for f in [&a, &b] {
        let o = cli(&["simulate-points", "--gt", p(&dir.path().join("cube")), "--out", p(f), "--jitter-mm", "1.5", "--seed", "4"]);
        assert!(o.status.success());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    save_mask(&Mask::empty(g), &dir.path().join("empty")).unwrap();
    let o = cli(&["simulate-points", "--gt", p(&dir.path().join("empty")), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn phantom_command() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let o = cli(&["phantom", "--out", p(d), "--cases", "2", "--seed", "7"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["case_000.raw", "case_000_gt.raw", "case_001.json", "case_001_gt.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let v = load_volume(&a.join("case_000")).unwrap();
    let m = load_mask(&a.join("case_000_gt")).unwrap();
    assert_eq!(v.dims(), m.dims());
    assert!(m.count() > 0);

    let empty = dir.path().join("empty");
    let o = cli(&["phantom", "--out", p(&empty), "--cases", "0"]);
    assert!(o.status.success());
    assert_eq!(fs::read_dir(&empty).unwrap().count(), 0);
}

fn small_case(dir: &Path) -> (Volume, Mask) {
    let ph = sphere([31, 31, 31], 7.0, &PhantomParams::default(), 3).unwrap();
    save_volume(&ph.volume, &dir.join("vol")).unwrap();
    save_mask(&ph.gt, &dir.join("gt")).unwrap();
    let o = cli(&["simulate-points", "--gt", p(&dir.join("gt")), "--out", p(&dir.join("pts.json"))]);
    assert!(o.status.success());
    (ph.volume, ph.gt)
}

fn small_config(dir: &Path, max_rounds: usize) -> std::path::PathBuf {
    let path = dir.join(format!("cfg{max_rounds}.json"));
    let cfg = format!(r#"{{"padding_mm": 5, "r_bg": 8, "max_rounds": {max_rounds}, "train": {{"epochs": 3}}}}"#);
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn segment_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (_, gt) = small_case(dir.path());
    let out = dir.path().join("out");
    let o = cli(&[
        "segment", "--volume", p(&dir.path().join("vol")), "--points", p(&dir.path().join("pts.json")),
        "--config", p(&small_config(dir.path(), 3)), "--gt", p(&dir.path().join("gt")), "--out", p(&out),
        "--dump-seeds",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mask = load_mask(&out.join("mask")).unwrap();
    assert_eq!(mask.dims(), gt.dims());
    assert!(mask.count() > 0);
    let prob = load_probability(&out.join("probability")).unwrap();
    assert_eq!(prob.dims(), gt.dims());
    let log = fs::read_to_string(out.join("rounds.jsonl")).unwrap();
    let rounds: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!rounds.is_empty() && rounds.len() <= 3);
    assert!(rounds[0]["mean_dice_prev"].is_null());
    assert!(rounds[0]["mean_dice_gt"].as_f64().unwrap() > 0.5);
    assert!(out.join("model.ckpt").exists());
    let seeds = read_header(&out.join("seeds")).unwrap();
    assert!(seeds.dims.iter().zip(gt.dims()).all(|(a, b)| *a <= b));
}

#[test]
fn one_round_equals_initial_label() {
    let dir = tempfile::tempdir().unwrap();
    let (volume, _) = small_case(dir.path());
    let cfg_path = small_config(dir.path(), 1);
    let out = dir.path().join("out");
    let o = cli(&[
        "segment", "--volume", p(&dir.path().join("vol")), "--points", p(&dir.path().join("pts.json")),
        "--config", p(&cfg_path), "--out", p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg: PipelineConfig = serde_json::from_str(&fs::read_to_string(&cfg_path).unwrap()).unwrap();
    let pts: PointsFile = serde_json::from_str(&fs::read_to_string(dir.path().join("pts.json")).unwrap()).unwrap();
    let init = initial_pseudo_label(&volume, &pts.points, &cfg).unwrap();
    let expected = init.probabilities.threshold(0.5).unwrap().uncrop(*volume.geometry(), init.bbox.lo).unwrap();
    assert_eq!(load_mask(&out.join("mask")).unwrap(), expected);
    assert!(!out.join("model.ckpt").exists());
}

#[test]
fn segment_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    small_case(dir.path());
    let out = dir.path().join("out");
    let o = cli(&[
        "segment", "--volume", p(&dir.path().join("vol")), "--points", p(&dir.path().join("missing.json")),
        "--out", p(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"max_rounds": 0}"#).unwrap();
    let o = cli(&[
        "segment", "--volume", p(&dir.path().join("vol")), "--points", p(&dir.path().join("pts.json")),
        "--config", p(&bad), "--out", p(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    small_case(dir.path());
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"padding_mm": 5, "r_bg": 8, "max_rounds": 1, "cg_max_iter": 1, "cg_tol": 1e-12}"#).unwrap();
    let o = cli(&[
        "segment", "--volume", p(&dir.path().join("vol")), "--points", p(&dir.path().join("pts.json")),
        "--config", p(&cfg), "--out", p(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn resample_command() {
    let dir = tempfile::tempdir().unwrap();
    let g = Geometry::new([4, 4, 2], [1.0, 1.0, 2.0]).unwrap();
    save_volume(&Volume::filled(g, 3.0), &dir.path().join("v")).unwrap();
    let o = cli(&["resample", "--volume", p(&dir.path().join("v")), "--target-mm", "1", "--out", p(&dir.path().join("r"))]);
    assert!(o.status.success());
    let r = load_volume(&dir.path().join("r")).unwrap();
    assert_eq!(r.dims(), [4, 4, 4]);
    assert!(r.data().iter().all(|&x| x == 3.0));
    let o = cli(&["resample", "--volume", p(&dir.path().join("v")), "--target-mm", "0", "--out", p(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn serve_rejects_missing_dir() {
    let o = cli(&["serve", "--data", "/nonexistent/dir", "--port", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

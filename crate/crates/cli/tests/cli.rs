use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use depthvo::ba::ProblemSnapshot;

fn depthvo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depthvo"))
        .args(args)
        .env("DEPTHVO_THREADS", "0")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_synth(out: &Path, frames: usize, extra: &[&str]) -> Output {
    let frames = frames.to_string();
    let mut args = vec![
        "run",
        "--images",
        "synth",
        "--depth",
        "synth",
        "--frames",
        &frames,
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    depthvo(&args)
}

fn field(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
        .unwrap_or_else(|| panic!("no `{key}` in {text}"))
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn synthetic_run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_synth(dir.path(), 50, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let traj = fs::read_to_string(dir.path().join("trajectory.txt")).unwrap();
    assert_eq!(traj.lines().count(), 50);
    assert!(traj.lines().all(|l| l.split_whitespace().count() == 12));
    let cloud = fs::read_to_string(dir.path().join("points.xyz")).unwrap();
    assert!(cloud.lines().count() > 1000);
    let timing = fs::read_to_string(dir.path().join("timing.csv")).unwrap();
    assert_eq!(timing.lines().count(), 51);
    assert_eq!(field(&stdout(&o), "frames"), 50.0);
}

#[test]
fn reruns_produce_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = run_synth(d.path(), 12, &["--format", "tum", "--seed", "3"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["trajectory.txt", "points.xyz"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_depth_directory_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = depthvo(&[
        "run",
        "--images",
        "synth",
        "--depth",
        dir.path().join("nope").to_str().unwrap(),
        "--frames",
        "3",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(6));
    assert!(stderr(&o).contains("no depth raster"), "{}", stderr(&o));
}

#[test]
fn image_directory_without_raster_fails_at_first_keyframe() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    let depth = dir.path().join("depth");
    fs::create_dir_all(&images).unwrap();
    fs::create_dir_all(&depth).unwrap();
    for i in 0..2 {
        let img = image::GrayImage::from_fn(64, 48, |x, y| image::Luma([((x * 13 + y * 7) % 256) as u8]));
        img.save(images.join(format!("{i:06}.png"))).unwrap();
    }
    let calib = dir.path().join("calib.txt");
    fs::write(&calib, "fx = 50\nfy = 50\ncx = 31.5\ncy = 23.5\n").unwrap();
    let o = depthvo(&[
        "run",
        "--images",
        images.to_str().unwrap(),
        "--depth",
        depth.to_str().unwrap(),
        "--calib",
        calib.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(6), "{}", stderr(&o));
    assert!(stderr(&o).contains("no depth raster for keyframe at frame 0"));

    let o = depthvo(&[
        "run",
        "--images",
        images.to_str().unwrap(),
        "--depth",
        depth.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bad_config_has_its_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_synth(dir.path(), 2, &["--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(4));
    let cfg = dir.path().join("cfg.txt");
    fs::write(&cfg, "active_window = 9\n").unwrap();
    let o = run_synth(dir.path(), 2, &["--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

fn write_kitti(path: &Path, xs: &[f64]) {
    let text: String = xs
        .iter()
        .enumerate()
        .map(|(i, x)| format!("1 0 0 {x} 0 1 0 0 0 0 1 {}\n", i as f64))
        .collect();
    fs::write(path, text).unwrap();
}

#[test]
fn eval_reports_closed_form_errors() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.txt");
    let same = dir.path().join("same.txt");
    let alt = dir.path().join("alt.txt");
    // Offsets orthogonal to the path, so no rigid motion absorbs them.
    write_kitti(&gt, &[0.0; 8]);
    write_kitti(&same, &[0.0; 8]);
    write_kitti(&alt, &[1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0]);
    let run = |est: &Path| depthvo(&["eval", "--est", est.to_str().unwrap(), "--gt", gt.to_str().unwrap()]);
    let o = run(&same);
    assert!(o.status.success());
    assert!(field(&stdout(&o), "rmse").abs() < 1e-12);
    let o = run(&alt);
    assert!((field(&stdout(&o), "rmse") - 1.0).abs() < 1e-9, "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("ate ")).count(), 8);

    let short = dir.path().join("short.txt");
    write_kitti(&short, &[0.0; 5]);
    assert_eq!(run(&short).status.code(), Some(9));
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "1 0 0 x\n").unwrap();
    assert_eq!(run(&bad).status.code(), Some(3));
}

#[test]
fn jacobian_check_passes_and_catches_a_sign_flip() {
    let o = depthvo(&["check-jacobians", "--trials", "1000", "--seed", "9"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("result PASS"));
    assert_eq!(field(&stdout(&o), "sign_mismatches"), 0.0);

    let o = depthvo(&["check-jacobians", "--trials", "20", "--inject-sign-flip"]);
    assert_eq!(o.status.code(), Some(8));
    assert!(stdout(&o).contains("result FAIL"));

    let o = depthvo(&["check-jacobians", "--trials", "0"]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("warning"));
}

#[test]
fn cost_profile_from_a_run_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("ba.json");
    let o = run_synth(dir.path(), 10, &["--snapshot", snap.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let problem = ProblemSnapshot::load(&snap).unwrap().restore().unwrap();
    let ids: Vec<String> = problem.points.iter().step_by(97).take(3).map(|p| p.id.0.to_string()).collect();
    let csv = dir.path().join("profile.csv");
    let o = depthvo(&[
        "cost-profile",
        "--snapshot",
        snap.to_str().unwrap(),
        "--points",
        &ids.join(","),
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3 * 200);
    for chunk in rows.chunks(200) {
        for r in chunk {
            assert!((r[2] + r[3] - r[4]).abs() <= 1e-9 * r[4].abs().max(1.0));
        }
    }

    let o = depthvo(&["cost-profile", "--snapshot", snap.to_str().unwrap(), "--points", "987654321"]);
    assert_eq!(o.status.code(), Some(10));
}

//! `depthvo` command-line tool.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use depthvo::ba::ProblemSnapshot;
use depthvo::config::OdometryConfig;
use depthvo::eval::{ate, Alignment};
use depthvo::geometry::CameraModel;
use depthvo::image::Image;
use depthvo::io::sequence::{load_sequence, parse_kitti_calib, read_gray, Sequence, SequenceFormat};
use depthvo::io::{numbered_rasters, read_depth_raster, read_trajectory, write_trajectory, TrajectoryFormat};
use depthvo::jacobian_check::{run_checks, CheckOptions};
use depthvo::mapping::PointId;
use depthvo::parallel::{env_threads, THREADS_ENV};
use depthvo::pipeline::{Odometry, PipelineError};
use depthvo::synthetic::{generate_scene, SceneConfig, SyntheticScene};

#[derive(Parser)]
#[command(name = "depthvo", version, about = "Direct monocular odometry with inverse-depth priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs odometry over a sequence.
    Run(RunArgs),
    /// Absolute trajectory error of an estimate against ground truth.
    Eval(EvalArgs),
    /// Finite-difference check of the analytic Jacobians.
    CheckJacobians(CheckArgs),
    /// Cost of selected points as a function of their inverse depth.
    CostProfile(ProfileArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Image directory (KITTI sequence or numbered images), or `synth`.
    #[arg(long)]
    images: String,
    /// Directory of `<frame id>.idr` rasters, or `synth`.
    #[arg(long)]
    depth: String,
    /// KITTI `calib.txt` or a `fx/fy/cx/cy = value` file.
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides, `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "kitti")]
    format: TrajectoryFormat,
    /// Also saves the last bundle-adjustment problem.
    #[arg(long)]
    snapshot: Option<PathBuf>,
    #[command(flatten)]
    synth: SynthArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    frames: usize,
    /// σ of the multiplicative noise on synthetic depth.
    #[arg(long, default_value_t = 0.01)]
    depth_noise: f64,
    #[arg(long, default_value_t = 0.0)]
    outlier_fraction: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value = "se3")]
    align: Alignment,
    #[arg(long, default_value = "kitti")]
    format: TrajectoryFormat,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    /// Negates one analytic Jacobian to confirm the check catches it.
    #[arg(long)]
    inject_sign_flip: bool,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    snapshot: PathBuf,
    /// Point ids, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    points: Vec<u64>,
    /// CSV output; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

mod exit {
    pub const INPUT: u8 = 3;
    pub const CONFIG: u8 = 4;
    pub const TRACKING: u8 = 5;
    pub const MISSING_DEPTH: u8 = 6;
    pub const BACKEND: u8 = 7;
    pub const CHECK_FAILED: u8 = 8;
    pub const EVAL: u8 = 9;
    pub const UNKNOWN_POINT: u8 = 10;
}

fn fail(code: u8, e: impl std::fmt::Display) -> Failure {
    Failure {
        code,
        message: e.to_string(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::CheckJacobians(a) => cmd_check(&a),
        Command::CostProfile(a) => cmd_profile(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(args: &RunArgs) -> Result<OdometryConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| fail(exit::INPUT, format!("{}: {e}", p.display())))?;
            OdometryConfig::from_text(&text).map_err(|e| fail(exit::CONFIG, e))?
        }
        None => OdometryConfig::default(),
    };
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| fail(exit::CONFIG, format!("override `{o}` is not key=value")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| fail(exit::CONFIG, e))?;
    }
    if std::env::var_os(THREADS_ENV).is_some() {
        cfg.threads = env_threads();
    }
    cfg.validate().map_err(|e| fail(exit::CONFIG, e))?;
    Ok(cfg)
}

/// Intrinsics `[fx, fy, cx, cy]` from a KITTI calibration or key=value file.
fn read_intrinsics(path: &Path) -> Result<[f64; 4], Failure> {
    let text = fs::read_to_string(path).map_err(|e| fail(exit::INPUT, format!("{}: {e}", path.display())))?;
    if text.contains("P0:") {
        return parse_kitti_calib(&text).map_err(|e| fail(exit::INPUT, e));
    }
    let mut values = BTreeMap::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if let Some((k, v)) = line.split_once('=') {
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| fail(exit::INPUT, format!("bad calibration value `{line}`")))?;
            values.insert(k.trim().to_string(), v);
        }
    }
    let get = |k: &str| {
        values
            .get(k)
            .copied()
            .ok_or_else(|| fail(exit::INPUT, format!("calibration lacks `{k}`")))
    };
    Ok([get("fx")?, get("fy")?, get("cx")?, get("cy")?])
}

enum Source {
    Synthetic(Box<SyntheticScene>),
    Files(Sequence),
}

impl Source {
    fn open(args: &RunArgs) -> Result<Self, Failure> {
        if args.images == "synth" {
            let s = &args.synth;
            return Ok(Self::Synthetic(Box::new(generate_scene(
                s.seed,
                SceneConfig {
                    num_frames: s.frames,
                    depth_noise: s.depth_noise,
                    outlier_fraction: s.outlier_fraction,
                    ..Default::default()
                },
            ))));
        }
        let path = Path::new(&args.images);
        if path.join("image_0").is_dir() {
            return load_sequence(path, SequenceFormat::KittiGray, None)
                .map(Self::Files)
                .map_err(|e| fail(exit::INPUT, e));
        }
        let calib = args
            .calib
            .as_ref()
            .ok_or_else(|| fail(exit::INPUT, "an image directory needs --calib"))?;
        let [fx, fy, cx, cy] = read_intrinsics(calib)?;
        let files = depthvo::io::sequence::numbered_files(path).map_err(|e| fail(exit::INPUT, e))?;
        let first = read_gray(&files[0].1).map_err(|e| fail(exit::INPUT, e))?;
        let camera = CameraModel::new(fx, fy, cx, cy, first.width(), first.height()).map_err(|e| fail(exit::INPUT, e))?;
        load_sequence(path, SequenceFormat::ImageDir, Some(camera))
            .map(Self::Files)
            .map_err(|e| fail(exit::INPUT, e))
    }

    fn camera(&self) -> CameraModel {
        match self {
            Self::Synthetic(s) => s.camera,
            Self::Files(seq) => seq.camera,
        }
    }

    fn len(&self) -> usize {
        match self {
            Self::Synthetic(s) => s.num_frames(),
            Self::Files(seq) => seq.len(),
        }
    }

    /// Image, frame id and the exact inverse depth when synthetic.
    fn frame(&self, i: usize) -> Result<(Image, u64, Option<Image>), Failure> {
        match self {
            Self::Synthetic(s) => {
                let v = s.render_frame(i);
                Ok((v.image, i as u64, Some(v.inverse_depth)))
            }
            Self::Files(seq) => {
                let f = seq.frame(i).map_err(|e| fail(exit::INPUT, e))?;
                Ok((f.image, f.id, None))
            }
        }
    }
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let source = Source::open(args)?;
    let rasters = if args.depth == "synth" {
        if !matches!(source, Source::Synthetic(_)) {
            return Err(fail(exit::INPUT, "--depth synth requires --images synth"));
        }
        None
    } else {
        let dir = Path::new(&args.depth);
        if !dir.is_dir() {
            return Err(fail(
                exit::MISSING_DEPTH,
                PipelineError::MissingDepthRaster(0).to_string() + &format!(": {} is not a directory", dir.display()),
            ));
        }
        Some(numbered_rasters(dir).map_err(|e| fail(exit::INPUT, e))?)
    };
    fs::create_dir_all(&args.out).map_err(|e| fail(exit::INPUT, e))?;
    let camera = source.camera();
    let mut odo = Odometry::new(camera, cfg);
    let mut failure = None;
    let mut raster_error = None;
    for i in 0..source.len() {
        let (image, id, truth) = source.frame(i)?;
        let depth = || -> Option<Image> {
            match (&source, &rasters) {
                (Source::Synthetic(s), None) => Some(s.predict_depth(i, truth.as_ref()?).raster),
                (_, Some(map)) => {
                    let raster = read_depth_raster(map.get(&id)?);
                    match raster {
                        Ok(r) => Some(r.data),
                        Err(e) => {
                            raster_error = Some(e.to_string());
                            None
                        }
                    }
                }
                _ => None,
            }
        };
        if let Err(e) = odo.process_frame(i, i as f64, image, depth) {
            let code = match e {
                PipelineError::Tracking(_) => exit::TRACKING,
                PipelineError::MissingDepthRaster(_) => exit::MISSING_DEPTH,
                PipelineError::ImageSize { .. } => exit::INPUT,
                PipelineError::Mapping(_) | PipelineError::Ba(_) => exit::BACKEND,
            };
            let detail = raster_error.take().map(|m| format!(" ({m})")).unwrap_or_default();
            failure = Some(fail(code, format!("frame {i} (id {id}): {e}{detail}")));
            break;
        }
    }
    write_outputs(&odo, args)?;
    println!("frames {}", odo.frames().len());
    println!("keyframes {}", odo.map.keyframes.len());
    println!("points {}", odo.map.points.len());
    failure.map_or(Ok(()), Err)
}

fn write_outputs(odo: &Odometry, args: &RunArgs) -> Result<(), Failure> {
    let io = |e: std::io::Error| fail(exit::INPUT, e);
    let traj = odo.trajectory();
    if !traj.is_empty() {
        write_trajectory(&args.out.join("trajectory.txt"), &traj, args.format).map_err(|e| fail(exit::INPUT, e))?;
    }
    let mut cloud = String::new();
    for p in odo.point_cloud() {
        let _ = writeln!(cloud, "{} {} {}", p.x, p.y, p.z);
    }
    fs::write(args.out.join("points.xyz"), cloud).map_err(io)?;
    let mut log = String::from("frame,keyframe,tracking_s,mapping_s,points\n");
    for t in odo.timings() {
        let _ = writeln!(
            log,
            "{},{},{:.6},{:.6},{}",
            t.index, t.keyframe as u8, t.tracking_s, t.mapping_s, t.points
        );
    }
    fs::write(args.out.join("timing.csv"), log).map_err(io)?;
    if let Some(path) = &args.snapshot {
        let problem = odo
            .last_problem()
            .ok_or_else(|| fail(exit::BACKEND, "no bundle adjustment ran, nothing to snapshot"))?;
        ProblemSnapshot::capture(problem)
            .save(path)
            .map_err(|e| fail(exit::INPUT, e))?;
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Failure> {
    let est = read_trajectory(&args.est, args.format).map_err(|e| fail(exit::INPUT, format!("{}: {e}", args.est.display())))?;
    let gt = read_trajectory(&args.gt, args.format).map_err(|e| fail(exit::INPUT, format!("{}: {e}", args.gt.display())))?;
    let report = ate(&est.positions(), &gt.positions(), args.align).map_err(|e| fail(exit::EVAL, e))?;
    println!("rmse {}", report.rmse);
    println!("median {}", report.median);
    println!("max {}", report.max);
    println!("scale {}", report.alignment.scale);
    for (entry, err) in est.entries.iter().zip(&report.errors) {
        println!("ate {} {}", entry.frame, err);
    }
    Ok(())
}

fn cmd_check(args: &CheckArgs) -> Result<(), Failure> {
    if args.trials == 0 {
        eprintln!("warning: zero trials, nothing was checked");
    }
    let report = run_checks(
        args.trials,
        args.seed,
        &CheckOptions {
            inject_sign_flip: args.inject_sign_flip,
            ..Default::default()
        },
    );
    println!("trials {}", report.trials);
    for (name, err) in report.worst.entries() {
        println!("max_rel_error {name} {err:e}");
    }
    println!("sign_mismatches {}", report.sign_mismatches);
    if report.passed(args.tolerance) {
        println!("result PASS");
        Ok(())
    } else {
        println!("result FAIL");
        Err(fail(exit::CHECK_FAILED, format!("Jacobian check failed at tolerance {:e}", args.tolerance)))
    }
}

fn cmd_profile(args: &ProfileArgs) -> Result<(), Failure> {
    let snapshot = ProblemSnapshot::load(&args.snapshot).map_err(|e| fail(exit::INPUT, e))?;
    let problem = snapshot.restore().map_err(|e| fail(exit::INPUT, e))?;
    let mut csv = String::from("point,rho,photo,depth,total\n");
    for &id in &args.points {
        let index = problem
            .points
            .iter()
            .position(|p| p.id == PointId(id))
            .ok_or_else(|| fail(exit::UNKNOWN_POINT, format!("unknown point id {id}")))?;
        let samples = problem.cost_profile(index).map_err(|e| fail(exit::UNKNOWN_POINT, e))?;
        for s in samples {
            let _ = writeln!(csv, "{id},{},{},{},{}", s.rho, s.photo, s.depth, s.total);
        }
    }
    match &args.out {
        Some(path) => fs::write(path, csv).map_err(|e| fail(exit::INPUT, e))?,
        None => print!("{csv}"),
    }
    Ok(())
}

//! Command-line surface: file formats and the subcommands tying the
//! modules together.
//!
//! Exit status is 0 on success, 2 for input errors (bad files, flags or
//! under-constrained problems) and 3 for numerical failures.

pub mod container;
pub mod report;
pub mod tracks;

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::camsolve::{intrinsics_from_decoupled, solve_poses, PoseSolveConfig};
use crate::error::{Error, Result};
use crate::geom::{DepthMap, FrameStack, Intrinsics, PointMap, ValidMask};
use crate::latent::{evaluate_toy, toy_bundle, toy_dataset, toy_fit, ToyFitConfig};
use crate::loss::gradcheck::{run_gradient_suite, SuiteConfig};
use crate::metrics::{evaluate_depth, evaluate_points, DepthAlignment, PointAlignment, DELTA_D_THRESHOLD, DELTA_P_THRESHOLD};
use crate::repr::{
    decode_cuboid, decode_decoupled, depth_of, disparity_from_depth, encode_cuboid, encode_decoupled,
    normalize_disparity, DecoupledMap,
};
use crate::synth::{make_tracks, render, SceneSpec};

pub use container::{DType, GpmContainer, Tensor, TensorData};
pub use report::{InputDigest, Report};

/// Tensor names with a fixed meaning; everything else is carried through
/// `convert` untouched.
pub const GEOMETRY_TENSORS: &[&str] = &[
    "points",
    "depth",
    "disparity",
    "disparity_norm",
    "theta_diag",
    "log_depth",
    "cuboid",
    "intrinsics",
];

#[derive(Debug, Parser)]
#[command(name = "vidpoint", version, about = "Video point-map geometry toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene to a container (and optionally tracks).
    Synth(SynthArgs),
    /// Re-encode a point map as decoupled, cuboid, disparity or raw points.
    Convert(ConvertArgs),
    /// Relative point error and inlier ratio after clip-level alignment.
    EvalPoints(EvalPointsArgs),
    /// Relative depth error and inlier ratio after clip-level alignment.
    EvalDepth(EvalDepthArgs),
    /// Recover camera poses from a point map and 2D tracks.
    SolvePose(SolvePoseArgs),
    /// Run the finite-difference gradient suite over every loss term.
    LossCheck(LossCheckArgs),
    /// Fit the toy latent codec and report the loss curve.
    LatentDemo(LatentDemoArgs),
}

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub tracks: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub track_noise: f64,
    #[arg(long, default_value_t = 50)]
    pub track_count: usize,
    /// Track sampling seed; defaults to the scene's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Target {
    Decoupled,
    Cuboid,
    Disparity,
    Points,
}

#[derive(Debug, clap::Args)]
pub struct ConvertArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub to: Target,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PointAlignArg {
    Scale,
    MedianScale,
    None,
}

#[derive(Debug, clap::Args)]
pub struct EvalPointsArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum, default_value_t = PointAlignArg::Scale)]
    pub align: PointAlignArg,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DepthAlignArg {
    ScaleShift,
    ScaleShiftDisparity,
    None,
}

#[derive(Debug, clap::Args)]
pub struct EvalDepthArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum, default_value_t = DepthAlignArg::ScaleShift)]
    pub align: DepthAlignArg,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct SolvePoseArgs {
    #[arg(long)]
    pub pmap: PathBuf,
    #[arg(long)]
    pub tracks: PathBuf,
    #[arg(long)]
    pub dyn_mask: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    pub window: usize,
    #[arg(long, default_value_t = 6)]
    pub overlap: usize,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    /// Depth residual weight; defaults to focal / median depth.
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional flat CSV: frame,qw,qx,qy,qz,tx,ty,tz.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct LossCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct LatentDemoArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long)]
    pub report: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status. Errors go to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs one command; `Ok` carries the exit status (3 when a check ran to
/// completion but failed).
pub fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Convert(a) => convert(a),
        Command::EvalPoints(a) => eval_points(a),
        Command::EvalDepth(a) => eval_depth(a),
        Command::SolvePose(a) => solve_pose(a),
        Command::LossCheck(a) => loss_check(a),
        Command::LatentDemo(a) => latent_demo(a),
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

/// Refuses to write over any input file.
fn guard_output(out: &Path, inputs: &[&Path]) -> Result<()> {
    let Ok(out_c) = out.canonicalize() else {
        return Ok(());
    };
    for input in inputs {
        if input.canonicalize().is_ok_and(|c| c == out_c) {
            return Err(Error::Config(format!("output {} would overwrite an input", out.display())));
        }
    }
    Ok(())
}

/// Point map from whichever representation the container holds.
pub fn load_points(c: &GpmContainer) -> Result<PointMap> {
    if c.contains("points") {
        c.points()
    } else if c.contains("log_depth") && c.contains("theta_diag") {
        let dec = DecoupledMap {
            theta_diag: c.vector("theta_diag")?,
            log_depth: c.scalar_map("log_depth")?,
        };
        if dec.theta_diag.len() != dec.frames() {
            return Err(Error::shape("theta_diag length differs from the frame count"));
        }
        decode_decoupled(&dec, dec.grid())
    } else if c.contains("cuboid") {
        decode_cuboid(&c.vector_map("cuboid")?)
    } else {
        Err(Error::MissingTensor("points (or log_depth + theta_diag, or cuboid)".into()))
    }
}

fn load_mask_for<T>(c: &GpmContainer, like: &FrameStack<T>) -> Result<ValidMask> {
    if c.contains("mask") {
        let m = c.mask("mask")?;
        m.check_shape(like, "mask vs geometry")?;
        Ok(m)
    } else {
        Ok(ValidMask::all_valid(like.frames(), like.grid()))
    }
}

fn load_depth(c: &GpmContainer) -> Result<DepthMap> {
    if c.contains("depth") {
        c.scalar_map("depth")
    } else if c.contains("points") {
        Ok(depth_of(&c.points()?))
    } else if c.contains("log_depth") {
        Ok(c.scalar_map("log_depth")?.map(|l| l.exp()))
    } else {
        Err(Error::MissingTensor("depth (or points, or log_depth)".into()))
    }
}

fn both_valid(a: &ValidMask, b: &ValidMask) -> Result<ValidMask> {
    if a.frames() != b.frames() || a.grid() != b.grid() {
        return Err(Error::shape("prediction and ground-truth masks differ in shape"));
    }
    let flags: Vec<bool> = (0..a.values().len()).map(|i| a.is_valid(i) && b.is_valid(i)).collect();
    ValidMask::from_bools(a.frames(), a.grid(), &flags)
}

fn synth(a: &SynthArgs) -> Result<i32> {
    let text = std::fs::read_to_string(&a.scene).map_err(|e| io_err(&a.scene, e))?;
    let spec = SceneSpec::parse(&text)?;
    let r = render(&spec)?;
    let mut c = GpmContainer::new();
    c.put_points(&r.points)?;
    c.put_mask("mask", &r.mask)?;
    c.put_scalar_map("depth", &r.depth.map(|&z| if z.is_finite() { z } else { 0.0 }))?;
    c.put_scalar_map("disparity", &disparity_from_depth(&r.depth, &r.mask)?)?;
    let thetas = r
        .intrinsics
        .iter()
        .map(|k| crate::repr::theta_from_focal(k.focal, spec.grid))
        .collect::<Result<Vec<_>>>()?;
    c.put_vector("theta_diag", &thetas)?;
    c.put_intrinsics(&r.intrinsics)?;
    c.put_poses(&r.poses)?;
    c.put_mask("dynamic", &r.dynamic)?;
    let g = spec.grid;
    c.put(Tensor::u8(
        "rgb",
        vec![spec.frames as u64, g.height as u64, g.width as u64, 3],
        vec![128; spec.frames * g.pixels() * 3],
    )?);
    guard_output(&a.out, &[&a.scene])?;
    c.save(&a.out)?;
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(path) = &a.tracks {
        if !(a.track_noise >= 0.0) {
            return Err(Error::Config(format!("track noise must be non-negative, got {}", a.track_noise)));
        }
        let set = make_tracks(&spec, a.track_count, a.seed.unwrap_or(spec.seed), a.track_noise)?;
        for w in &set.warnings {
            eprintln!("warning: {w}");
        }
        guard_output(path, &[&a.scene])?;
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        tracks::write_tracks(BufWriter::new(file), &set.tracks)?;
    }
    println!(
        "rendered {} frames of {}x{} ({} valid pixels)",
        spec.frames,
        g.width,
        g.height,
        r.mask.count_valid()
    );
    Ok(0)
}

fn convert(a: &ConvertArgs) -> Result<i32> {
    let input = GpmContainer::load(&a.input)?;
    let points = load_points(&input)?;
    let mask = load_mask_for(&input, &points)?;
    let mut out = GpmContainer {
        tensors: input
            .tensors
            .iter()
            .filter(|t| !GEOMETRY_TENSORS.contains(&t.name.as_str()))
            .cloned()
            .collect(),
    };
    out.put_mask("mask", &mask)?;
    match a.to {
        Target::Decoupled => {
            let (dec, ks) = encode_decoupled(&points, &mask)?;
            out.put_vector("theta_diag", &dec.theta_diag)?;
            out.put_scalar_map("log_depth", &dec.log_depth)?;
            out.put_intrinsics(&ks)?;
        }
        Target::Cuboid => out.put_vector_map("cuboid", &encode_cuboid(&points, &mask)?)?,
        Target::Disparity => {
            let disp = disparity_from_depth(&depth_of(&points), &mask)?;
            let norm = normalize_disparity(&disp, &mask)?;
            out.put_scalar_map("disparity", &disp)?;
            out.put_scalar_map("disparity_norm", &norm.values)?;
        }
        Target::Points => out.put_points(&points)?,
    }
    guard_output(&a.out, &[&a.input])?;
    out.save(&a.out)?;
    Ok(0)
}

fn eval_points(a: &EvalPointsArgs) -> Result<i32> {
    let pred_c = GpmContainer::load(&a.pred)?;
    let gt_c = GpmContainer::load(&a.gt)?;
    let pred = load_points(&pred_c)?;
    let gt = load_points(&gt_c)?;
    if !pred.same_shape(&gt) {
        return Err(Error::shape("prediction and ground truth differ in shape"));
    }
    let mask = both_valid(&load_mask_for(&gt_c, &gt)?, &load_mask_for(&pred_c, &pred)?)?;
    let mode = match a.align {
        PointAlignArg::Scale => PointAlignment::Scale,
        PointAlignArg::MedianScale => PointAlignment::MedianScale,
        PointAlignArg::None => PointAlignment::None,
    };
    let m = evaluate_points(&pred, &gt, &mask, mode)?;
    let p = m.points.expect("point metrics");
    let mut r = Report::new("eval-points");
    r.inputs = vec![InputDigest::of_file("pred", &a.pred)?, InputDigest::of_file("gt", &a.gt)?];
    r.config = json!({
        "alignment": mode,
        "alignment_objective": "least-squares over all valid pixels of the clip",
        "delta_p_threshold": DELTA_P_THRESHOLD,
        "point_error": "|s*p_pred - p_gt| / |p_gt| per valid pixel",
        "mask": "ground-truth mask AND prediction mask",
    });
    r.values = json!({
        "rel_p": p.rel_p,
        "delta_p": p.delta_p,
        "valid_pixels": p.valid,
        "excluded_pixels": p.excluded,
        "scale": m.alignment.scale,
        "alignment_objective": m.alignment.objective,
    });
    if p.excluded > 0 {
        r.warnings.push(format!("{} valid pixels with a zero ground-truth point were excluded", p.excluded));
    }
    guard_output(&a.report, &[&a.pred, &a.gt])?;
    r.save(&a.report)?;
    Ok(0)
}

fn eval_depth(a: &EvalDepthArgs) -> Result<i32> {
    let pred_c = GpmContainer::load(&a.pred)?;
    let gt_c = GpmContainer::load(&a.gt)?;
    let pred = load_depth(&pred_c)?;
    let gt = load_depth(&gt_c)?;
    if !pred.same_shape(&gt) {
        return Err(Error::shape("prediction and ground truth differ in shape"));
    }
    let mask = both_valid(&load_mask_for(&gt_c, &gt)?, &load_mask_for(&pred_c, &pred)?)?;
    let mode = match a.align {
        DepthAlignArg::ScaleShift => DepthAlignment::ScaleShift,
        DepthAlignArg::ScaleShiftDisparity => DepthAlignment::ScaleShiftDisparity,
        DepthAlignArg::None => DepthAlignment::None,
    };
    let m = evaluate_depth(&pred, &gt, &mask, mode)?;
    let d = m.depth.expect("depth metrics");
    let mut r = Report::new("eval-depth");
    r.inputs = vec![InputDigest::of_file("pred", &a.pred)?, InputDigest::of_file("gt", &a.gt)?];
    r.config = json!({
        "alignment": mode,
        "alignment_objective": "least-squares over all valid pixels of the clip",
        "delta_d_threshold": DELTA_D_THRESHOLD,
        "delta_d_rule": "max(pred/gt, gt/pred) < threshold (strict)",
        "mask": "ground-truth mask AND prediction mask",
    });
    r.values = json!({
        "rel_d": d.rel_d,
        "delta_d": d.delta_d,
        "valid_pixels": d.valid,
        "excluded_pixels": d.excluded,
        "scale": m.alignment.scale,
        "shift": m.alignment.shift,
        "alignment_objective": m.alignment.objective,
    });
    if d.excluded > 0 {
        r.warnings.push(format!("{} valid pixels with non-positive depth were excluded", d.excluded));
    }
    guard_output(&a.report, &[&a.pred, &a.gt])?;
    r.save(&a.report)?;
    Ok(0)
}

fn clip_intrinsics(c: &GpmContainer, points: &PointMap, mask: &ValidMask) -> Result<(Vec<Intrinsics>, &'static str)> {
    let ks = if c.contains("intrinsics") {
        (c.intrinsics()?, "intrinsics tensor")
    } else if c.contains("theta_diag") {
        let dec = DecoupledMap {
            theta_diag: c.vector("theta_diag")?,
            log_depth: points.map(|_| 0.0),
        };
        (intrinsics_from_decoupled(&dec, points.grid())?, "theta_diag tensor")
    } else {
        (encode_decoupled(points, mask)?.1, "least-squares focal from the point map")
    };
    if ks.0.len() != points.frames() {
        return Err(Error::shape("per-frame intrinsics do not match the frame count"));
    }
    Ok(ks)
}

fn solve_pose(a: &SolvePoseArgs) -> Result<i32> {
    let c = GpmContainer::load(&a.pmap)?;
    let points = load_points(&c)?;
    let mask = load_mask_for(&c, &points)?;
    let (intrinsics, k_source) = clip_intrinsics(&c, &points, &mask)?;
    let file = File::open(&a.tracks).map_err(|e| io_err(&a.tracks, e))?;
    let tracks = tracks::read_tracks(std::io::BufReader::new(file))?;
    let dynamic = match &a.dyn_mask {
        Some(p) => {
            let dc = GpmContainer::load(p)?;
            Some(if dc.contains("dynamic") { dc.mask("dynamic")? } else { dc.mask("mask")? })
        }
        None => None,
    };
    let config = PoseSolveConfig {
        window_len: a.window,
        overlap: a.overlap,
        max_iters: a.max_iters,
        convergence_tol: a.tol,
        pixel_depth_weight: a.omega,
    };
    let res = solve_poses(&points, &mask, &intrinsics, &tracks, dynamic.as_ref(), &config)?;

    let mut r = Report::new("solve-pose");
    r.inputs = vec![InputDigest::of_file("pmap", &a.pmap)?, InputDigest::of_file("tracks", &a.tracks)?];
    if let Some(p) = &a.dyn_mask {
        r.inputs.push(InputDigest::of_file("dyn_mask", p)?);
    }
    r.config = json!({
        "window": a.window,
        "overlap": a.overlap,
        "max_iters": a.max_iters,
        "convergence_tol": a.tol,
        "omega": res.depth_weight,
        "omega_source": if a.omega.is_some() { "flag" } else { "mean focal / median depth" },
        "intrinsics_source": k_source,
        "optimizer": "levenberg-marquardt, left axis-angle increments",
        "initialization": "identity",
        "gauge": "frame 0 pinned to identity",
        "depth_sampling": "bilinear in inverse depth, all four neighbours valid",
        "pose_convention": "world-to-camera, x_cam = R x_world + t",
    });
    let poses: Vec<_> = res
        .poses
        .iter()
        .enumerate()
        .map(|(t, p)| {
            let q = p.quaternion();
            json!({
                "frame": t,
                "quaternion_wxyz": [q.w, q.i, q.j, q.k],
                "translation": [p.translation.x, p.translation.y, p.translation.z],
            })
        })
        .collect();
    r.values = json!({
        "poses": poses,
        "objective": res.objective,
        "initial_objective": res.initial_objective,
        "iterations": res.iterations,
        "converged": res.converged,
        "diverged": res.diverged,
        "windows": res.windows,
        "dropped_pairs": res.dropped_pairs,
        "discarded_tracks": res.discarded_tracks,
    });
    if res.diverged {
        r.warnings.push("solver hit a numerical failure; poses are the best iterate".into());
    }
    if res.dropped_pairs > 0 {
        r.warnings.push(format!("{} track pairs dropped for lack of valid depth", res.dropped_pairs));
    }
    if res.discarded_tracks > 0 {
        r.warnings.push(format!("{} tracks touching dynamic regions discarded", res.discarded_tracks));
    }
    let mut inputs: Vec<&Path> = vec![&a.pmap, &a.tracks];
    if let Some(p) = &a.dyn_mask {
        inputs.push(p);
    }
    guard_output(&a.out, &inputs)?;
    r.save(&a.out)?;
    if let Some(path) = &a.csv {
        guard_output(path, &inputs)?;
        let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
        w.write_record(["frame", "qw", "qx", "qy", "qz", "tx", "ty", "tz"]).map_err(|e| io_err(path, e))?;
        for (t, p) in res.poses.iter().enumerate() {
            let q = p.quaternion();
            let row = [q.w, q.i, q.j, q.k, p.translation.x, p.translation.y, p.translation.z];
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))?;
    }
    Ok(if res.diverged { 3 } else { 0 })
}

fn loss_check(a: &LossCheckArgs) -> Result<i32> {
    let config = SuiteConfig {
        seed: a.seed,
        instances: a.instances,
        ..SuiteConfig::default()
    };
    let terms = run_gradient_suite(&config)?;
    let passed = terms.iter().all(|t| t.passed);
    let mut r = Report::new("loss-check");
    r.config = serde_json::to_value(&config).expect("config serializes");
    r.values = json!({ "passed": passed, "terms": terms });
    r.save(&a.report)?;
    Ok(if passed { 0 } else { 3 })
}

/// Settings of the toy latent run behind `latent-demo`.
pub const DEMO_GRID: (usize, usize) = (16, 16);
pub const DEMO_LATENT_DIM: usize = 16;

fn latent_demo(a: &LatentDemoArgs) -> Result<i32> {
    let grid = crate::geom::FrameGrid::new(DEMO_GRID.0, DEMO_GRID.1)?;
    let data = toy_dataset(grid, 4, 2, 14.0)?;
    let bundle = toy_bundle(grid, DEMO_LATENT_DIM, a.seed)?;
    let config = ToyFitConfig {
        steps: a.steps,
        seed: a.seed,
        ..ToyFitConfig::default()
    };
    let zero_offset = evaluate_toy(&bundle, &data, &config.weights)?.identity;
    let (_, curve) = toy_fit(&bundle, &data, &config)?;
    let (first, last) = (&curve[0], curve.last().expect("curve has the initial entry"));
    let mut r = Report::new("latent-demo");
    r.config = json!({
        "grid": [grid.width, grid.height],
        "latent_dim": DEMO_LATENT_DIM,
        "clips": data.len(),
        "frames_per_clip": 2,
        "fit": config,
        "offset_scale": crate::latent::DEFAULT_OFFSET_SCALE,
    });
    r.values = json!({
        "initial": first,
        "final": last,
        "zero_offset_identity": zero_offset,
        "pmap_ratio": last.pmap / first.pmap,
        "identity_ratio": last.identity / zero_offset,
        "curve": {
            "pmap": curve.iter().map(|c| c.pmap).collect::<Vec<_>>(),
            "identity": curve.iter().map(|c| c.identity).collect::<Vec<_>>(),
            "total": curve.iter().map(|c| c.total).collect::<Vec<_>>(),
        },
    });
    r.save(&a.report)?;
    Ok(0)
}

//! Camera intrinsics and pose recovery from a point-map clip and 2D tracks
//! of static points.
//!
//! Every ordered frame pair `(i, j)` that shares a window contributes, per
//! track visible in both frames, the residual
//!
//! ```text
//! r = [π_Kj(W_j W_i⁻¹ π_Ki⁻¹(p_i, D_i(p_i))) − (p_j, D_j(p_j))] ⊙ (1, 1, ω)
//! ```
//!
//! where `D_t` is the clip's depth sampled at a sub-pixel location. The
//! objective `Σ |r|²` is minimized over the world-to-camera poses with
//! Levenberg-Marquardt, frame 0 pinned to the identity.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x6, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{project, unproject, FrameGrid, Intrinsics, PointMap, PoseSE3, ValidMask};
use crate::repr::{focal_from_theta, DecoupledMap};

/// One tracked position of a point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub frame: usize,
    pub u: f64,
    pub v: f64,
    pub visible: bool,
}

/// Pixel trajectory of one static interest point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory2D {
    pub id: u64,
    pub observations: Vec<Observation>,
}

impl Trajectory2D {
    pub fn validate(&self, frames: usize, grid: FrameGrid) -> Result<()> {
        let mut last: Option<usize> = None;
        for o in &self.observations {
            if last.is_some_and(|l| o.frame <= l) || o.frame >= frames {
                return Err(Error::Config(format!(
                    "track {}: frame indices must be strictly increasing and below {frames}",
                    self.id
                )));
            }
            last = Some(o.frame);
            let inside = (0.0..=(grid.width - 1) as f64).contains(&o.u) && (0.0..=(grid.height - 1) as f64).contains(&o.v);
            if o.visible && !inside {
                return Err(Error::Config(format!(
                    "track {}: visible observation ({}, {}) in frame {} lies outside the grid",
                    self.id, o.u, o.v, o.frame
                )));
            }
        }
        Ok(())
    }

    fn visible_in(&self, frame: usize) -> Option<&Observation> {
        self.observations.iter().find(|o| o.frame == frame && o.visible)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSolveConfig {
    pub window_len: usize,
    pub overlap: usize,
    pub max_iters: usize,
    /// Stop once an accepted step lowers the objective by less than this
    /// fraction of its current value.
    pub convergence_tol: f64,
    /// Weight ω of the depth component; `None` uses `f / median depth`.
    pub pixel_depth_weight: Option<f64>,
}

impl Default for PoseSolveConfig {
    fn default() -> Self {
        Self {
            window_len: 12,
            overlap: 6,
            max_iters: 100,
            convergence_tol: 1e-10,
            pixel_depth_weight: None,
        }
    }
}

impl PoseSolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.overlap > 0 && self.overlap < self.window_len) {
            return Err(Error::Config(format!(
                "window overlap must satisfy 0 < overlap < window length (got {} and {})",
                self.overlap, self.window_len
            )));
        }
        if self.pixel_depth_weight.is_some_and(|w| !(w >= 0.0)) {
            return Err(Error::Config("depth residual weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Half-open frame ranges `[start, end)` of the shifted windows.
pub fn windows(frames: usize, config: &PoseSolveConfig) -> Result<Vec<(usize, usize)>> {
    config.validate()?;
    let stride = config.window_len - config.overlap;
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + config.window_len).min(frames);
        out.push((start, end));
        if end >= frames {
            break;
        }
        start += stride;
    }
    Ok(out)
}

/// Ordered pairs `(i, j)`, `i ≠ j`, of frames that share at least one window.
pub fn frame_pairs(frames: usize, config: &PoseSolveConfig) -> Result<BTreeSet<(usize, usize)>> {
    let mut pairs = BTreeSet::new();
    for (start, end) in windows(frames, config)? {
        for i in start..end {
            for j in start..end {
                if i != j {
                    pairs.insert((i, j));
                }
            }
        }
    }
    Ok(pairs)
}

/// Sub-pixel depth lookup on a point-map clip.
///
/// Interpolates inverse depth bilinearly over the four surrounding pixels,
/// which is exact on planar surfaces. Returns `None` when any stencil pixel
/// is invalid or the location falls outside the grid.
#[derive(Debug, Clone, Copy)]
pub struct DepthSampler<'a> {
    pub points: &'a PointMap,
    pub mask: &'a ValidMask,
}

impl DepthSampler<'_> {
    pub fn sample(&self, t: usize, pixel: &Vector2<f64>) -> Option<f64> {
        let grid = self.points.grid();
        let (x, y) = (pixel.x, pixel.y);
        if !(x >= 0.0 && y >= 0.0 && x <= (grid.width - 1) as f64 && y <= (grid.height - 1) as f64) {
            return None;
        }
        let u0 = (x.floor() as usize).min(grid.width.saturating_sub(2));
        let v0 = (y.floor() as usize).min(grid.height.saturating_sub(2));
        let u1 = (u0 + 1).min(grid.width - 1);
        let v1 = (v0 + 1).min(grid.height - 1);
        let (a, b) = (x - u0 as f64, y - v0 as f64);
        let mut inv = 0.0;
        for (v, wv) in [(v0, 1.0 - b), (v1, b)] {
            for (u, wu) in [(u0, 1.0 - a), (u1, a)] {
                let w = wu * wv;
                if !self.mask.is_valid_at(t, v, u) {
                    return None;
                }
                let z = self.points.get(t, v, u).z;
                if !(z > 0.0) {
                    return None;
                }
                inv += w / z;
            }
        }
        (inv > 0.0).then(|| 1.0 / inv)
    }
}

/// Lifts a tracked pixel with known depth into world coordinates,
/// `W_t⁻¹ π_K⁻¹(p, d)`.
pub fn lift(pixel: &Vector2<f64>, depth: f64, k: &Intrinsics, grid: FrameGrid, pose: &PoseSE3) -> Result<Vector3<f64>> {
    Ok(pose.inverse().transform_point(&unproject(pixel, depth, k, grid)?))
}

/// Camera focal lengths from the per-frame diagonal field of view.
pub fn intrinsics_from_decoupled(dec: &DecoupledMap, grid: FrameGrid) -> Result<Vec<Intrinsics>> {
    dec.theta_diag
        .iter()
        .map(|&th| Intrinsics::new(focal_from_theta(th, grid)?))
        .collect()
}

/// A track observed in frames `i` and `j`, with everything that does not
/// depend on the poses precomputed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairObservation {
    pub track: usize,
    pub i: usize,
    pub j: usize,
    /// Back-projected point in camera `i`.
    pub point_i: Vector3<f64>,
    /// Observed `(u, v, depth)` in frame `j`.
    pub target_j: Vector3<f64>,
}

/// Pairs that survive visibility and depth lookup, plus the drop count.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<PairObservation>,
    pub dropped: usize,
}

pub fn prepare_pairs(
    sampler: &DepthSampler<'_>,
    intrinsics: &[Intrinsics],
    tracks: &[Trajectory2D],
    config: &PoseSolveConfig,
) -> Result<PairSet> {
    let frames = sampler.points.frames();
    let grid = sampler.points.grid();
    if intrinsics.len() != frames {
        return Err(Error::shape(format!("{} intrinsics for {frames} frames", intrinsics.len())));
    }
    let frame_pairs = frame_pairs(frames, config)?;
    let mut pairs = Vec::new();
    let mut dropped = 0;
    for (track_idx, track) in tracks.iter().enumerate() {
        track.validate(frames, grid)?;
        let lifted: Vec<Option<(Vector3<f64>, Vector3<f64>)>> = (0..frames)
            .map(|t| {
                let o = track.visible_in(t)?;
                let px = Vector2::new(o.u, o.v);
                Some(match sampler.sample(t, &px) {
                    Some(d) => Some((unproject(&px, d, &intrinsics[t], grid).ok()?, Vector3::new(o.u, o.v, d))),
                    None => None,
                })
            })
            .map(|x| x.flatten())
            .collect();
        let visible: Vec<bool> = (0..frames).map(|t| track.visible_in(t).is_some()).collect();
        for &(i, j) in &frame_pairs {
            if !(visible[i] && visible[j]) {
                continue;
            }
            match (lifted[i], lifted[j]) {
                (Some((point_i, _)), Some((_, target_j))) => pairs.push(PairObservation {
                    track: track_idx,
                    i,
                    j,
                    point_i,
                    target_j,
                }),
                _ => dropped += 1,
            }
        }
    }
    Ok(PairSet { pairs, dropped })
}

/// Residual of one pair with its two 3×6 Jacobian blocks, taken with
/// respect to left increments `(ω, ν)` of `W_i` and `W_j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualBlock {
    pub pair: usize,
    pub i: usize,
    pub j: usize,
    pub residual: Vector3<f64>,
    pub jac_i: Matrix3x6<f64>,
    pub jac_j: Matrix3x6<f64>,
}

/// Block-sparse residual vector and Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub blocks: Vec<ResidualBlock>,
    pub frames: usize,
    /// Pairs dropped because an observation had no usable depth.
    pub dropped: usize,
}

impl Residuals {
    pub fn cost(&self) -> f64 {
        self.blocks.iter().map(|b| b.residual.norm_squared()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.cost().sqrt()
    }

    /// Dense `(r, J)` with 6 columns per frame, frame 0 included.
    pub fn to_dense(&self) -> (DVector<f64>, DMatrix<f64>) {
        let rows = 3 * self.blocks.len();
        let mut r = DVector::zeros(rows);
        let mut jac = DMatrix::zeros(rows, 6 * self.frames);
        for (k, b) in self.blocks.iter().enumerate() {
            r.fixed_rows_mut::<3>(3 * k).copy_from(&b.residual);
            let mut ji = jac.fixed_view_mut::<3, 6>(3 * k, 6 * b.i);
            ji += b.jac_i;
            let mut jj = jac.fixed_view_mut::<3, 6>(3 * k, 6 * b.j);
            jj += b.jac_j;
        }
        (r, jac)
    }
}

#[inline]
fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Evaluates all pair residuals at `poses`. Fails with
/// [`Error::DegenerateProjection`] when a transformed point lands behind
/// camera `j`.
pub fn evaluate_pairs(
    poses: &[PoseSE3],
    intrinsics: &[Intrinsics],
    grid: FrameGrid,
    pairs: &PairSet,
    weight: f64,
) -> Result<Residuals> {
    let frames = poses.len();
    let mut blocks = Vec::with_capacity(pairs.pairs.len());
    for (idx, p) in pairs.pairs.iter().enumerate() {
        let wi = &poses[p.i];
        let wj = &poses[p.j];
        let world = wi.inverse().transform_point(&p.point_i);
        let y = wj.transform_point(&world);
        let (pixel, depth) = project(&y, &intrinsics[p.j], grid)?;
        let residual = Vector3::new(
            pixel.x - p.target_j.x,
            pixel.y - p.target_j.y,
            weight * (depth - p.target_j.z),
        );
        let f = intrinsics[p.j].focal;
        let iz = 1.0 / y.z;
        let d_proj = Matrix3::new(
            f * iz,
            0.0,
            -f * y.x * iz * iz,
            0.0,
            f * iz,
            -f * y.y * iz * iz,
            0.0,
            0.0,
            weight,
        );
        let mut dy_dj = Matrix3x6::zeros();
        dy_dj.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&y)));
        dy_dj.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
        let rel = (wj.rotation * wi.rotation.inverse()).into_inner();
        let mut dy_di = Matrix3x6::zeros();
        dy_di.fixed_view_mut::<3, 3>(0, 0).copy_from(&(rel * skew(&p.point_i)));
        dy_di.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rel));
        blocks.push(ResidualBlock {
            pair: idx,
            i: p.i,
            j: p.j,
            residual,
            jac_i: d_proj * dy_di,
            jac_j: d_proj * dy_dj,
        });
    }
    Ok(Residuals {
        blocks,
        frames,
        dropped: pairs.dropped,
    })
}

/// One-shot residual assembly: pairing, depth lookup and evaluation.
pub fn build_residuals(
    poses: &[PoseSE3],
    intrinsics: &[Intrinsics],
    sampler: &DepthSampler<'_>,
    tracks: &[Trajectory2D],
    config: &PoseSolveConfig,
    weight: f64,
) -> Result<Residuals> {
    if poses.len() != sampler.points.frames() {
        return Err(Error::shape(format!(
            "{} poses for {} frames",
            poses.len(),
            sampler.points.frames()
        )));
    }
    let pairs = prepare_pairs(sampler, intrinsics, tracks, config)?;
    evaluate_pairs(poses, intrinsics, sampler.points.grid(), &pairs, weight)
}

/// Default depth weight `ω = mean focal / median valid depth`.
pub fn default_depth_weight(points: &PointMap, mask: &ValidMask, intrinsics: &[Intrinsics]) -> Result<f64> {
    let mut depths: Vec<f64> = mask.valid_indices().map(|i| points.data()[i].z).collect();
    if depths.is_empty() {
        return Err(Error::EmptyClip);
    }
    let mid = depths.len() / 2;
    let (_, &mut median, _) = depths.select_nth_unstable_by(mid, f64::total_cmp);
    let focal = intrinsics.iter().map(|k| k.focal).sum::<f64>() / intrinsics.len() as f64;
    Ok(focal / median)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub start: usize,
    pub end: usize,
    pub pairs: usize,
    pub rms_pixel: f64,
    pub rms_depth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseSolveResult {
    pub poses: Vec<PoseSE3>,
    pub objective: f64,
    pub initial_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the solver hit a numerical failure and returned its best
    /// iterate so far.
    pub diverged: bool,
    pub depth_weight: f64,
    pub windows: Vec<WindowStats>,
    pub dropped_pairs: usize,
    pub discarded_tracks: usize,
}

fn touches_dynamic(track: &Trajectory2D, dynamic: &ValidMask) -> bool {
    let grid = dynamic.grid();
    track.observations.iter().filter(|o| o.visible).any(|o| {
        let u = o.u.round().clamp(0.0, (grid.width - 1) as f64) as usize;
        let v = o.v.round().clamp(0.0, (grid.height - 1) as f64) as usize;
        o.frame < dynamic.frames() && dynamic.is_valid_at(o.frame, v, u)
    })
}

const MIN_TRACKS_PER_WINDOW: usize = 3;

/// Recovers world-to-camera poses for every frame of the clip.
pub fn solve_poses(
    points: &PointMap,
    mask: &ValidMask,
    intrinsics: &[Intrinsics],
    tracks: &[Trajectory2D],
    dynamic: Option<&ValidMask>,
    config: &PoseSolveConfig,
) -> Result<PoseSolveResult> {
    config.validate()?;
    mask.check_shape(points, "solve_poses mask vs point map")?;
    let frames = points.frames();
    let grid = points.grid();
    if intrinsics.len() != frames {
        return Err(Error::shape(format!("{} intrinsics for {frames} frames", intrinsics.len())));
    }
    let weight = match config.pixel_depth_weight {
        Some(w) => w,
        None => default_depth_weight(points, mask, intrinsics)?,
    };
    if frames <= 1 {
        return Ok(PoseSolveResult {
            poses: vec![PoseSE3::identity(); frames],
            objective: 0.0,
            initial_objective: 0.0,
            iterations: 0,
            converged: true,
            diverged: false,
            depth_weight: weight,
            windows: Vec::new(),
            dropped_pairs: 0,
            discarded_tracks: 0,
        });
    }

    let kept: Vec<Trajectory2D> = match dynamic {
        Some(dyn_mask) => {
            if dyn_mask.frames() != frames || dyn_mask.grid() != grid {
                return Err(Error::shape("dynamic mask does not match the point map"));
            }
            tracks.iter().filter(|t| !touches_dynamic(t, dyn_mask)).cloned().collect()
        }
        None => tracks.to_vec(),
    };
    let discarded_tracks = tracks.len() - kept.len();

    let sampler = DepthSampler { points, mask };
    let pairs = prepare_pairs(&sampler, intrinsics, &kept, config)?;
    let wins = windows(frames, config)?;
    for &(start, end) in &wins {
        let usable: BTreeSet<usize> = pairs
            .pairs
            .iter()
            .filter(|p| (start..end).contains(&p.i) && (start..end).contains(&p.j))
            .map(|p| p.track)
            .collect();
        if usable.len() < MIN_TRACKS_PER_WINDOW {
            return Err(Error::UnderConstrained {
                start,
                end,
                tracks: usable.len(),
            });
        }
    }

    let mut poses = vec![PoseSE3::identity(); frames];
    let mut current = evaluate_pairs(&poses, intrinsics, grid, &pairs, weight)?;
    let mut cost = current.cost();
    let initial_objective = cost;
    let n_params = 6 * (frames - 1);
    let mut lambda = 1e-4;
    let mut iterations = 0;
    let mut converged = false;
    let mut diverged = false;

    while iterations < config.max_iters {
        iterations += 1;
        if cost == 0.0 {
            converged = true;
            break;
        }
        let mut h = DMatrix::<f64>::zeros(n_params, n_params);
        let mut g = DVector::<f64>::zeros(n_params);
        for b in &current.blocks {
            let cols = [(b.i, &b.jac_i), (b.j, &b.jac_j)];
            for &(fa, ja) in &cols {
                if fa == 0 {
                    continue;
                }
                let oa = 6 * (fa - 1);
                let mut ga = g.fixed_rows_mut::<6>(oa);
                ga += ja.transpose() * b.residual;
                for &(fb, jb) in &cols {
                    if fb == 0 {
                        continue;
                    }
                    let ob = 6 * (fb - 1);
                    let mut hab = h.fixed_view_mut::<6, 6>(oa, ob);
                    hab += ja.transpose() * jb;
                }
            }
        }

        let mut accepted = false;
        while lambda < 1e16 {
            let mut damped = h.clone();
            for k in 0..n_params {
                damped[(k, k)] += lambda * h[(k, k)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = chol.solve(&(-&g));
            if delta.iter().any(|x| !x.is_finite()) {
                diverged = true;
                break;
            }
            let candidate: Vec<PoseSE3> = poses
                .iter()
                .enumerate()
                .map(|(t, pose)| {
                    if t == 0 {
                        *pose
                    } else {
                        let d = delta.fixed_rows::<6>(6 * (t - 1));
                        pose.retract(&Vector3::new(d[0], d[1], d[2]), &Vector3::new(d[3], d[4], d[5]))
                    }
                })
                .collect();
            match evaluate_pairs(&candidate, intrinsics, grid, &pairs, weight) {
                Ok(res) if res.cost().is_finite() && res.cost() < cost => {
                    let new_cost = res.cost();
                    let decrease = (cost - new_cost) / cost;
                    poses = candidate;
                    current = res;
                    cost = new_cost;
                    lambda = (lambda * 0.1).max(1e-12);
                    accepted = true;
                    if decrease < config.convergence_tol {
                        converged = true;
                    }
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if diverged {
            break;
        }
        if !accepted {
            // no step lowers the objective: at a (local) minimum
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    let window_stats = wins
        .iter()
        .map(|&(start, end)| {
            let inside: Vec<&ResidualBlock> = current
                .blocks
                .iter()
                .filter(|b| (start..end).contains(&b.i) && (start..end).contains(&b.j))
                .collect();
            let n = inside.len().max(1) as f64;
            let px = inside.iter().map(|b| b.residual.x.powi(2) + b.residual.y.powi(2)).sum::<f64>();
            let dz = inside.iter().map(|b| (b.residual.z / weight.max(f64::MIN_POSITIVE)).powi(2)).sum::<f64>();
            WindowStats {
                start,
                end,
                pairs: inside.len(),
                rms_pixel: (px / (2.0 * n)).sqrt(),
                rms_depth: (dz / n).sqrt(),
            }
        })
        .collect();

    Ok(PoseSolveResult {
        poses,
        objective: cost,
        initial_objective,
        iterations,
        converged,
        diverged,
        depth_weight: weight,
        windows: window_stats,
        dropped_pairs: pairs.dropped,
        discarded_tracks,
    })
}

/// Re-expresses `poses` in the gauge where `reference[0]` is the identity,
/// i.e. `W_t ∘ reference[0]⁻¹`, the frame the solver's output lives in.
pub fn gauge_align(poses: &[PoseSE3], reference_first: &PoseSE3) -> Vec<PoseSE3> {
    let inv = reference_first.inverse();
    poses.iter().map(|p| p.compose(&inv)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::FrameStack;
    use crate::synth::{make_tracks, render, SceneSpec};

    fn config() -> PoseSolveConfig {
        PoseSolveConfig::default()
    }

    #[test]
    fn windows_cover_clip_with_overlap() {
        assert_eq!(windows(20, &config()).unwrap(), vec![(0, 12), (6, 18), (12, 20)]);
        assert_eq!(windows(12, &config()).unwrap(), vec![(0, 12)]);
        assert_eq!(windows(5, &config()).unwrap(), vec![(0, 5)]);
        let bad = PoseSolveConfig {
            overlap: 12,
            ..config()
        };
        assert!(windows(20, &bad).is_err());
    }

    #[test]
    fn pairs_never_span_windows() {
        let pairs = frame_pairs(20, &config()).unwrap();
        assert!(pairs.contains(&(0, 11)) && pairs.contains(&(11, 0)));
        assert!(!pairs.contains(&(0, 12)));
        assert!(!pairs.contains(&(5, 12)));
        assert!(pairs.contains(&(6, 17)));
        assert!(!pairs.contains(&(3, 3)));
        let wins = windows(20, &config()).unwrap();
        for (i, j) in pairs {
            assert!(wins.iter().any(|&(s, e)| (s..e).contains(&i) && (s..e).contains(&j)));
        }
    }

    #[test]
    fn lift_examples() {
        let grid = FrameGrid::new(640, 480).unwrap();
        let k = Intrinsics::new(400.0).unwrap();
        let px = Vector2::new(100.0, 50.0);
        let a = lift(&px, 3.0, &k, grid, &PoseSE3::identity()).unwrap();
        assert_eq!(a, unproject(&px, 3.0, &k, grid).unwrap());
        let shifted = PoseSE3::new(nalgebra::Rotation3::identity(), Vector3::new(0.0, 0.0, -1.0));
        let b = lift(&px, 3.0, &k, grid, &shifted).unwrap();
        assert!((b - a - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
        assert_eq!(lift(&px, 0.0, &k, grid, &shifted), Err(Error::InvalidDepth(0.0)));
    }

    #[test]
    fn sampler_is_exact_on_planes_and_respects_mask() {
        let grid = FrameGrid::new(20, 16).unwrap();
        let k = Intrinsics::new(15.0).unwrap();
        let n = Vector3::new(0.2, -0.3, 1.0);
        let plane_depth = |px: &Vector2<f64>| {
            let ray = unproject(px, 1.0, &k, grid).unwrap();
            5.0 / n.dot(&ray)
        };
        let points = FrameStack::from_fn(1, grid, |_, v, u| {
            let px = Vector2::new(u as f64, v as f64);
            unproject(&px, plane_depth(&px), &k, grid).unwrap()
        });
        let mut valid = vec![true; grid.pixels()];
        valid[3 * 20 + 4] = false;
        let mask = ValidMask::from_bools(1, grid, &valid).unwrap();
        let sampler = DepthSampler { points: &points, mask: &mask };
        let q = Vector2::new(10.3, 7.8);
        assert!((sampler.sample(0, &q).unwrap() - plane_depth(&q)).abs() < 1e-12);
        let edge = Vector2::new(19.0, 15.0);
        assert!((sampler.sample(0, &edge).unwrap() - plane_depth(&edge)).abs() < 1e-12);
        assert!(sampler.sample(0, &Vector2::new(4.5, 3.5)).is_none());
        assert!(sampler.sample(0, &Vector2::new(-0.1, 3.5)).is_none());
    }

    #[test]
    fn intrinsics_from_theta() {
        let grid = FrameGrid::new(640, 480).unwrap();
        let dec = DecoupledMap {
            theta_diag: vec![1.0, 1.0],
            log_depth: FrameStack::filled(2, grid, 0.0),
        };
        let ks = intrinsics_from_decoupled(&dec, grid).unwrap();
        assert_eq!(ks, vec![Intrinsics { focal: 400.0 }; 2]);
        let bad = DecoupledMap {
            theta_diag: vec![0.0, 1.0],
            ..dec
        };
        assert_eq!(intrinsics_from_decoupled(&bad, grid), Err(Error::InvalidFov(0.0)));
    }

    fn small_orbit(frames: usize) -> (SceneSpec, crate::synth::Rendered) {
        let grid = FrameGrid::new(64, 48).unwrap();
        let spec = SceneSpec::orbit_room(grid, frames, 50.0, 0).unwrap();
        let r = render(&spec).unwrap();
        (spec, r)
    }

    #[test]
    fn ground_truth_poses_zero_residual() {
        let (spec, r) = small_orbit(8);
        let set = make_tracks(&spec, 30, 3, 0.0).unwrap();
        let sampler = DepthSampler { points: &r.points, mask: &r.mask };
        let poses = gauge_align(&r.poses, &r.poses[0]);
        let res = build_residuals(&poses, &r.intrinsics, &sampler, &set.tracks, &config(), 2.0).unwrap();
        assert!(!res.blocks.is_empty());
        let worst = res.blocks.iter().map(|b| b.residual.norm()).fold(0.0, f64::max);
        assert!(worst < 1e-9, "worst residual {worst}");
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (spec, r) = small_orbit(5);
        let set = make_tracks(&spec, 6, 9, 0.0).unwrap();
        let sampler = DepthSampler { points: &r.points, mask: &r.mask };
        // perturbed poses so the check is not at the optimum
        let poses: Vec<PoseSE3> = gauge_align(&r.poses, &r.poses[0])
            .iter()
            .enumerate()
            .map(|(t, p)| p.retract(&Vector3::new(0.01 * t as f64, -0.02, 0.005), &Vector3::new(0.03, 0.0, -0.02 * t as f64)))
            .collect();
        let pairs = prepare_pairs(&sampler, &r.intrinsics, &set.tracks, &config()).unwrap();
        let res = evaluate_pairs(&poses, &r.intrinsics, spec.grid, &pairs, 1.7).unwrap();
        let (r0, jac) = res.to_dense();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for col in 0..jac.ncols() {
            let (t, k) = (col / 6, col % 6);
            let bump = |s: f64| {
                let mut d = [0.0; 6];
                d[k] = s;
                let mut p = poses.clone();
                p[t] = poses[t].retract(&Vector3::new(d[0], d[1], d[2]), &Vector3::new(d[3], d[4], d[5]));
                evaluate_pairs(&p, &r.intrinsics, spec.grid, &pairs, 1.7).unwrap().to_dense().0
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            for row in 0..r0.len() {
                let a = jac[(row, col)];
                let n = numeric[row];
                worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-4));
            }
        }
        assert!(worst < 1e-5, "worst relative Jacobian error {worst}");
    }

    #[test]
    fn single_frame_is_identity() {
        let (_, r) = small_orbit(1);
        let res = solve_poses(&r.points, &r.mask, &r.intrinsics, &[], None, &config()).unwrap();
        assert_eq!(res.poses, vec![PoseSE3::identity()]);
        assert_eq!(res.objective, 0.0);
    }

    #[test]
    fn too_few_tracks_is_under_constrained() {
        let (spec, r) = small_orbit(6);
        let set = make_tracks(&spec, 2, 1, 0.0).unwrap();
        let err = solve_poses(&r.points, &r.mask, &r.intrinsics, &set.tracks, None, &config()).unwrap_err();
        assert_eq!(err, Error::UnderConstrained { start: 0, end: 6, tracks: 2 });
    }

    #[test]
    fn short_orbit_recovers_poses() {
        let (spec, r) = small_orbit(8);
        let set = make_tracks(&spec, 30, 4, 0.0).unwrap();
        let res = solve_poses(&r.points, &r.mask, &r.intrinsics, &set.tracks, None, &config()).unwrap();
        assert!(res.objective <= res.initial_objective);
        let truth = gauge_align(&r.poses, &r.poses[0]);
        for (est, gt) in res.poses.iter().zip(&truth) {
            assert!(est.rotation_angle_to(gt).to_degrees() < 1e-6);
            assert!((est.translation - gt.translation).norm() < 1e-8);
        }
    }

    #[test]
    fn dynamic_tracks_are_discarded() {
        let (spec, r) = small_orbit(6);
        let set = make_tracks(&spec, 20, 2, 0.0).unwrap();
        // mark the whole first frame dynamic: every track touches it
        let mut flags = vec![false; r.mask.values().len()];
        flags[..spec.grid.pixels()].iter_mut().for_each(|f| *f = true);
        let dyn_mask = ValidMask::from_bools(6, spec.grid, &flags).unwrap();
        let err = solve_poses(&r.points, &r.mask, &r.intrinsics, &set.tracks, Some(&dyn_mask), &config()).unwrap_err();
        assert!(matches!(err, Error::UnderConstrained { tracks: 0, .. }));
    }
}

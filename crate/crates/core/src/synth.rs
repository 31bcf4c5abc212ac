//! Analytic synthetic scenes: exact ray casting against planes, spheres and
//! axis-aligned boxes, producing ground-truth point maps, masks, poses and
//! 2D trajectories.
//!
//! Pixel `(u, v)` samples the ray through the integer pixel coordinate
//! `(u, v)`, the same convention as [`crate::geom::project`].
//!
//! # Scene files
//!
//! A scene is a list of whitespace-separated lines; `#` starts a comment.
//!
//! ```text
//! grid 64 48                  # width height
//! frames 20
//! focal 60                    # pixels, constant over the clip
//! seed 7
//! plane px py pz nx ny nz     # infinite plane through p with normal n
//! sphere cx cy cz r
//! box x0 y0 z0 x1 y1 z1       # axis-aligned, min then max corner
//! moving sphere cx cy cz r vx vy vz   # any primitive, then per-frame velocity
//! camera static               # identity pose in every frame
//! camera dolly dx dy dz       # camera center moves by d per frame, looking +z
//! camera orbit tx ty tz radius sweep_deg height
//! ```
//!
//! The orbit camera circles the target about the world y axis at the given
//! radius, `height` above it (world y points down), sweeping `sweep_deg`
//! degrees centered on the -z side and always looking at the target.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::camsolve::{Observation, Trajectory2D};
use crate::error::{Error, Result};
use crate::geom::{project, DepthMap, FrameGrid, FrameStack, Intrinsics, PointMap, PoseSE3, ValidMask};

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// Infinite two-sided plane.
    Plane { point: Vector3<f64>, normal: Vector3<f64> },
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Axis-aligned box; a camera inside sees its inner walls.
    Box { min: Vector3<f64>, max: Vector3<f64> },
}

const HIT_EPS: f64 = 1e-9;

impl Primitive {
    fn translated(&self, offset: &Vector3<f64>) -> Primitive {
        match self {
            Primitive::Plane { point, normal } => Primitive::Plane {
                point: point + offset,
                normal: *normal,
            },
            Primitive::Sphere { center, radius } => Primitive::Sphere {
                center: center + offset,
                radius: *radius,
            },
            Primitive::Box { min, max } => Primitive::Box {
                min: min + offset,
                max: max + offset,
            },
        }
    }

    /// Nearest ray parameter `λ > 0` with `origin + λ dir` on the surface.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match self {
            Primitive::Plane { point, normal } => {
                let denom = normal.dot(dir);
                if denom.abs() < 1e-300 {
                    return None;
                }
                let lambda = normal.dot(&(point - origin)) / denom;
                (lambda > HIT_EPS).then_some(lambda)
            }
            Primitive::Sphere { center, radius } => {
                let oc = origin - center;
                let a = dir.norm_squared();
                let half_b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = half_b * half_b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                // numerically stable pair of roots
                let q = if half_b > 0.0 { -(half_b + sq) } else { -(half_b - sq) };
                let (mut r0, mut r1) = if q != 0.0 { (q / a, c / q) } else { (0.0, 0.0) };
                if r0 > r1 {
                    std::mem::swap(&mut r0, &mut r1);
                }
                if r0 > HIT_EPS {
                    Some(r0)
                } else if r1 > HIT_EPS {
                    Some(r1)
                } else {
                    None
                }
            }
            Primitive::Box { min, max } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for axis in 0..3 {
                    let o = origin[axis];
                    let d = dir[axis];
                    if d == 0.0 {
                        if o < min[axis] || o > max[axis] {
                            return None;
                        }
                        continue;
                    }
                    let (mut t0, mut t1) = ((min[axis] - o) / d, (max[axis] - o) / d);
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    t_near = t_near.max(t0);
                    t_far = t_far.min(t1);
                }
                if t_near > t_far {
                    None
                } else if t_near > HIT_EPS {
                    Some(t_near)
                } else if t_far > HIT_EPS {
                    Some(t_far)
                } else {
                    None
                }
            }
        }
    }
}

/// A primitive translated by `velocity * t` in frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MovingPrimitive {
    pub shape: Primitive,
    pub velocity: Vector3<f64>,
}

impl MovingPrimitive {
    pub fn at_frame(&self, t: usize) -> Primitive {
        self.shape.translated(&(self.velocity * t as f64))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub moving: Option<MovingPrimitive>,
    pub camera_path: Vec<PoseSE3>,
    pub intrinsics: Vec<Intrinsics>,
    pub grid: FrameGrid,
    pub frames: usize,
    pub seed: u64,
}

/// What a ray hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitKind {
    Static(usize),
    Moving,
}

/// Everything [`render`] produces for a clip.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub points: PointMap,
    pub mask: ValidMask,
    pub depth: DepthMap,
    /// Pixels covered by the moving primitive.
    pub dynamic: ValidMask,
    pub intrinsics: Vec<Intrinsics>,
    pub poses: Vec<PoseSE3>,
    pub warnings: Vec<String>,
}

/// Ground-truth trajectories of static surface points.
#[derive(Debug, Clone)]
pub struct TrackSet {
    pub tracks: Vec<Trajectory2D>,
    pub world_points: Vec<Vector3<f64>>,
    pub warnings: Vec<String>,
}

/// Orbit path used by [`SceneSpec::orbit_room`] and the `camera orbit` line.
pub fn orbit_path(target: Vector3<f64>, radius: f64, sweep_deg: f64, height: f64, frames: usize) -> Result<Vec<PoseSE3>> {
    let sweep = sweep_deg.to_radians();
    (0..frames)
        .map(|t| {
            let s = if frames > 1 { t as f64 / (frames - 1) as f64 - 0.5 } else { 0.0 };
            let phi = sweep * s;
            let eye = target + Vector3::new(radius * phi.sin(), -height, -radius * phi.cos());
            PoseSE3::look_at(eye, target, Vector3::y())
        })
        .collect()
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("scene needs at least one frame".into()));
        }
        if self.camera_path.len() != self.frames || self.intrinsics.len() != self.frames {
            return Err(Error::Config(format!(
                "scene has {} frames but {} poses and {} intrinsics",
                self.frames,
                self.camera_path.len(),
                self.intrinsics.len()
            )));
        }
        Ok(())
    }

    /// Room of inner box walls with two crates on the floor, seen from a
    /// 40° orbit. Every pixel hits a planar surface.
    pub fn orbit_room(grid: FrameGrid, frames: usize, focal: f64, seed: u64) -> Result<Self> {
        let target = Vector3::new(0.0, 0.5, 4.5);
        Ok(Self {
            primitives: vec![
                Primitive::Box {
                    min: Vector3::new(-7.0, -4.0, -4.0),
                    max: Vector3::new(7.0, 3.0, 12.0),
                },
                Primitive::Box {
                    min: Vector3::new(-2.0, 1.0, 3.5),
                    max: Vector3::new(-0.4, 3.0, 5.0),
                },
                Primitive::Box {
                    min: Vector3::new(0.6, 0.2, 5.0),
                    max: Vector3::new(2.4, 3.0, 6.8),
                },
            ],
            moving: None,
            camera_path: orbit_path(target, 4.5, 40.0, 0.8, frames)?,
            intrinsics: vec![Intrinsics::new(focal)?; frames],
            grid,
            frames,
            seed,
        })
    }

    /// The primitives present in frame `t`, static ones first.
    fn primitives_at(&self, t: usize) -> impl Iterator<Item = (HitKind, Primitive)> + '_ {
        self.primitives
            .iter()
            .enumerate()
            .map(|(i, p)| (HitKind::Static(i), p.clone()))
            .chain(self.moving.iter().map(move |m| (HitKind::Moving, m.at_frame(t))))
    }

    /// Nearest hit of a world-space ray in frame `t`.
    pub fn cast_ray(&self, t: usize, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, HitKind)> {
        self.primitives_at(t)
            .filter_map(|(kind, p)| p.intersect(origin, dir).map(|l| (l, kind)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Whether the 2×2 integer-pixel neighbourhood of `pixel` sees a single
    /// flat surface through `point`. The synthetic tracker loses points
    /// whose neighbourhood straddles a crease, a silhouette or a curved
    /// surface, so sub-pixel depth lookups at track locations are exact.
    pub fn stencil_is_planar(&self, t: usize, pixel: &Vector2<f64>, point: &Vector3<f64>) -> bool {
        let grid = self.grid;
        if grid.width < 2 || grid.height < 2 {
            return false;
        }
        let u0 = (pixel.x.floor().max(0.0) as usize).min(grid.width - 2);
        let v0 = (pixel.y.floor().max(0.0) as usize).min(grid.height - 2);
        let mut corners = [Vector3::zeros(); 4];
        for (k, (du, dv)) in [(0, 0), (1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
            let px = Vector2::new((u0 + du) as f64, (v0 + dv) as f64);
            let (origin, dir) = self.pixel_ray(t, &px);
            match self.cast_ray(t, &origin, &dir) {
                Some((lambda, HitKind::Static(_))) => corners[k] = origin + dir * lambda,
                _ => return false,
            }
        }
        let n = (corners[1] - corners[0]).cross(&(corners[2] - corners[0]));
        let scale = (corners[1] - corners[0]).norm() * (corners[2] - corners[0]).norm();
        if !(n.norm() > 1e-12 * scale) {
            return false;
        }
        let n = n.normalize();
        let tol = PLANARITY_TOL * (corners[1] - corners[0]).norm().max((corners[2] - corners[0]).norm());
        [corners[3], *point].iter().all(|q| n.dot(&(q - corners[0])).abs() <= tol)
    }

    /// World-space ray through pixel `(u, v)` of frame `t`, scaled so that
    /// the ray parameter equals camera-space depth.
    pub fn pixel_ray(&self, t: usize, pixel: &Vector2<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let pose = &self.camera_path[t];
        let f = self.intrinsics[t].focal;
        let c = self.grid.center();
        let d_cam = Vector3::new((pixel.x - c.x) / f, (pixel.y - c.y) / f, 1.0);
        (pose.center(), pose.rotation.inverse() * d_cam)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut grid = None;
        let mut frames = None;
        let mut focal = None;
        let mut seed = 0;
        let mut primitives = Vec::new();
        let mut moving = None;
        let mut camera: Option<Vec<String>> = None;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Config(format!("scene line {}: {msg}: `{line}`", lineno + 1));
            let tokens: Vec<&str> = line.split_whitespace().collect();
            let nums = |toks: &[&str]| -> Result<Vec<f64>> {
                toks.iter().map(|s| s.parse::<f64>().map_err(|_| bad("expected a number"))).collect()
            };
            match tokens[0] {
                "grid" => {
                    let v = nums(&tokens[1..])?;
                    if v.len() != 2 || v.iter().any(|x| x.fract() != 0.0 || *x < 1.0) {
                        return Err(bad("grid takes two positive integers"));
                    }
                    grid = Some(FrameGrid::new(v[0] as usize, v[1] as usize)?);
                }
                "frames" => {
                    frames = Some(tokens.get(1).and_then(|s| s.parse::<usize>().ok()).filter(|&n| n > 0).ok_or_else(|| bad("frames takes a positive integer"))?);
                }
                "focal" => {
                    let v = nums(&tokens[1..])?;
                    if v.len() != 1 {
                        return Err(bad("focal takes one number"));
                    }
                    focal = Some(Intrinsics::new(v[0])?);
                }
                "seed" => {
                    seed = tokens.get(1).and_then(|s| s.parse::<u64>().ok()).ok_or_else(|| bad("seed takes an integer"))?;
                }
                "moving" => {
                    let prim = parse_primitive(&tokens[1..], &nums, &bad)?;
                    let n = primitive_arity(tokens.get(1).copied().unwrap_or(""));
                    let v = nums(&tokens[2 + n..])?;
                    if v.len() != 3 {
                        return Err(bad("moving primitive needs a velocity vx vy vz"));
                    }
                    moving = Some(MovingPrimitive {
                        shape: prim,
                        velocity: Vector3::new(v[0], v[1], v[2]),
                    });
                }
                "camera" => camera = Some(tokens[1..].iter().map(|s| s.to_string()).collect()),
                "plane" | "sphere" | "box" => {
                    let n = primitive_arity(tokens[0]);
                    if tokens.len() != n + 1 {
                        return Err(bad("wrong number of values"));
                    }
                    primitives.push(parse_primitive(&tokens, &nums, &bad)?);
                }
                _ => return Err(bad("unknown key")),
            }
        }

        let grid = grid.ok_or_else(|| Error::Config("scene is missing `grid`".into()))?;
        let frames = frames.ok_or_else(|| Error::Config("scene is missing `frames`".into()))?;
        let focal = focal.ok_or_else(|| Error::Config("scene is missing `focal`".into()))?;
        let camera = camera.unwrap_or_else(|| vec!["static".into()]);
        let cam_nums = |toks: &[String]| -> Result<Vec<f64>> {
            toks.iter()
                .map(|s| s.parse::<f64>().map_err(|_| Error::Config(format!("camera: `{s}` is not a number"))))
                .collect()
        };
        let camera_path = match camera.first().map(String::as_str) {
            Some("static") => vec![PoseSE3::identity(); frames],
            Some("dolly") => {
                let d = cam_nums(&camera[1..])?;
                if d.len() != 3 {
                    return Err(Error::Config("camera dolly takes dx dy dz".into()));
                }
                let step = Vector3::new(d[0], d[1], d[2]);
                (0..frames)
                    .map(|t| PoseSE3::new(nalgebra::Rotation3::identity(), -step * t as f64))
                    .collect()
            }
            Some("orbit") => {
                let v = cam_nums(&camera[1..])?;
                if v.len() != 6 {
                    return Err(Error::Config("camera orbit takes tx ty tz radius sweep_deg height".into()));
                }
                orbit_path(Vector3::new(v[0], v[1], v[2]), v[3], v[4], v[5], frames)?
            }
            _ => return Err(Error::Config(format!("unknown camera path `{}`", camera.join(" ")))),
        };
        let spec = Self {
            primitives,
            moving,
            camera_path,
            intrinsics: vec![focal; frames],
            grid,
            frames,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn primitive_arity(kind: &str) -> usize {
    match kind {
        "plane" | "box" => 6,
        "sphere" => 4,
        _ => 0,
    }
}

fn parse_primitive(
    tokens: &[&str],
    nums: &dyn Fn(&[&str]) -> Result<Vec<f64>>,
    bad: &dyn Fn(&str) -> Error,
) -> Result<Primitive> {
    let kind = *tokens.first().ok_or_else(|| bad("missing primitive"))?;
    let n = primitive_arity(kind);
    if n == 0 || tokens.len() < n + 1 {
        return Err(bad("expected plane, sphere or box with its values"));
    }
    let v = nums(&tokens[1..=n])?;
    let v3 = |i: usize| Vector3::new(v[i], v[i + 1], v[i + 2]);
    Ok(match kind {
        "plane" => {
            let normal = v3(3).try_normalize(1e-12).ok_or_else(|| bad("plane normal is zero"))?;
            Primitive::Plane { point: v3(0), normal }
        }
        "sphere" => {
            if !(v[3] > 0.0) {
                return Err(bad("sphere radius must be positive"));
            }
            Primitive::Sphere { center: v3(0), radius: v[3] }
        }
        _ => {
            let (a, b) = (v3(0), v3(3));
            if (0..3).any(|i| a[i] >= b[i]) {
                return Err(bad("box min corner must be below max corner"));
            }
            Primitive::Box { min: a, max: b }
        }
    })
}

/// Casts one ray per pixel and frame. Pixels with no hit are invalid.
pub fn render(spec: &SceneSpec) -> Result<Rendered> {
    spec.validate()?;
    let grid = spec.grid;
    let mut warnings = Vec::new();
    if spec.primitives.is_empty() && spec.moving.is_none() {
        warnings.push("scene has no primitives; every pixel is invalid".to_string());
    }
    let mut points = FrameStack::filled(spec.frames, grid, Vector3::zeros());
    let mut valid = vec![false; spec.frames * grid.pixels()];
    let mut dynamic = vec![false; spec.frames * grid.pixels()];
    let c = grid.center();
    for t in 0..spec.frames {
        let f = spec.intrinsics[t].focal;
        for v in 0..grid.height {
            for u in 0..grid.width {
                let (origin, dir) = spec.pixel_ray(t, &Vector2::new(u as f64, v as f64));
                if let Some((depth, kind)) = spec.cast_ray(t, &origin, &dir) {
                    let i = points.index(t, v, u);
                    // the camera-space ray has unit z, so the hit parameter is the depth
                    points.data_mut()[i] = Vector3::new((u as f64 - c.x) / f * depth, (v as f64 - c.y) / f * depth, depth);
                    valid[i] = true;
                    dynamic[i] = kind == HitKind::Moving;
                }
            }
        }
    }
    let mask = ValidMask::from_bools(spec.frames, grid, &valid)?;
    let depth = FrameStack::from_vec(
        spec.frames,
        grid,
        points.data().iter().zip(&valid).map(|(p, &ok)| if ok { p.z } else { 0.0 }).collect(),
    )?;
    Ok(Rendered {
        points,
        mask,
        depth,
        dynamic: ValidMask::from_bools(spec.frames, grid, &dynamic)?,
        intrinsics: spec.intrinsics.clone(),
        poses: spec.camera_path.clone(),
        warnings,
    })
}

/// Relative depth tolerance of the occlusion test.
const PLANARITY_TOL: f64 = 1e-9;
const OCCLUSION_TOL: f64 = 1e-9;

/// Samples `count` static surface points visible in frame 0 and follows them
/// through the clip. Observations are visible when the point projects inside
/// the grid (so its bilinear stencil exists) and nothing lies in front of it.
/// Visible observations get i.i.d. Gaussian pixel noise of std `noise_px`,
/// clamped to the grid.
pub fn make_tracks(spec: &SceneSpec, count: usize, seed: u64, noise_px: f64) -> Result<TrackSet> {
    spec.validate()?;
    if !(noise_px >= 0.0) {
        return Err(Error::Config(format!("track noise must be non-negative, got {noise_px}")));
    }
    let grid = spec.grid;
    let (w_max, h_max) = ((grid.width - 1) as f64, (grid.height - 1) as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_px.max(0.0)).expect("non-negative std");
    let mut warnings = Vec::new();
    let mut world_points = Vec::with_capacity(count);
    let max_attempts = count.saturating_mul(100).max(100);
    let mut attempts = 0;
    while world_points.len() < count && attempts < max_attempts && w_max >= 2.0 && h_max >= 2.0 {
        attempts += 1;
        let px = Vector2::new(rng.random_range(1.0..w_max - 1.0), rng.random_range(1.0..h_max - 1.0));
        let (origin, dir) = spec.pixel_ray(0, &px);
        if let Some((lambda, HitKind::Static(_))) = spec.cast_ray(0, &origin, &dir) {
            let x = origin + dir * lambda;
            if spec.stencil_is_planar(0, &px, &x) {
                world_points.push(x);
            }
        }
    }
    if world_points.len() < count {
        warnings.push(format!(
            "only {} of {count} requested static track points are visible in frame 0",
            world_points.len()
        ));
    }

    let mut tracks = Vec::with_capacity(world_points.len());
    for (id, x) in world_points.iter().enumerate() {
        let mut observations = Vec::with_capacity(spec.frames);
        for t in 0..spec.frames {
            let cam = spec.camera_path[t].transform_point(x);
            let k = &spec.intrinsics[t];
            let Ok((pixel, depth)) = project(&cam, k, grid) else {
                observations.push(Observation {
                    frame: t,
                    u: f64::NAN,
                    v: f64::NAN,
                    visible: false,
                });
                continue;
            };
            let inside = (0.0..=w_max).contains(&pixel.x) && (0.0..=h_max).contains(&pixel.y);
            let unoccluded = inside && {
                let (origin, dir) = spec.pixel_ray(t, &pixel);
                spec.cast_ray(t, &origin, &dir)
                    .is_some_and(|(lambda, _)| lambda >= depth * (1.0 - OCCLUSION_TOL))
            };
            let mut visible = unoccluded && spec.stencil_is_planar(t, &pixel, x);
            let (mut u, mut v) = (pixel.x, pixel.y);
            if visible && noise_px > 0.0 {
                u = (u + noise.sample(&mut rng)).clamp(0.0, w_max);
                v = (v + noise.sample(&mut rng)).clamp(0.0, h_max);
                // the reported position must still sit on the point's surface
                visible = spec.stencil_is_planar(t, &Vector2::new(u, v), x);
            }
            observations.push(Observation { frame: t, u, v, visible });
        }
        tracks.push(Trajectory2D {
            id: id as u64,
            observations,
        });
    }
    Ok(TrackSet {
        tracks,
        world_points,
        warnings,
    })
}

//! Domain types shared by every module: per-frame pixel grids, point maps,
//! masks, pinhole intrinsics, rigid poses and normal maps.
//!
//! Conventions used throughout the crate:
//!
//! ```text
//! camera axes   x right, y down, z forward
//! pixel (u, v)  u = column index, v = row index, integer pixel coordinates
//! principal pt  (W / 2, H / 2)
//! projection    u = W/2 + f x / z,  v = H/2 + f y / z
//! poses         world-to-camera, X_cam = R X_world + t
//! normals       unit length, z component <= 0 (facing the camera)
//! ```

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};

use crate::error::{Error, Result};

/// Pixel dimensions of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FrameGrid {
    pub width: usize,
    pub height: usize,
}

impl FrameGrid {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config(format!(
                "frame grid must be at least 1x1, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Principal point, fixed at the grid center.
    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    /// Half the image diagonal, `sqrt(W^2 + H^2) / 2`.
    pub fn half_diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64) / 2.0
    }
}

/// A clip of `frames` grids, stored frame-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack<T> {
    frames: usize,
    grid: FrameGrid,
    data: Vec<T>,
}

impl<T: Clone> FrameStack<T> {
    pub fn filled(frames: usize, grid: FrameGrid, value: T) -> Self {
        Self {
            frames,
            grid,
            data: vec![value; frames * grid.pixels()],
        }
    }
}

impl<T> FrameStack<T> {
    pub fn from_vec(frames: usize, grid: FrameGrid, data: Vec<T>) -> Result<Self> {
        let expected = frames * grid.pixels();
        if data.len() != expected {
            return Err(Error::shape(format!(
                "expected {expected} elements for {frames}x{}x{}, got {}",
                grid.height,
                grid.width,
                data.len()
            )));
        }
        Ok(Self { frames, grid, data })
    }

    pub fn from_fn(frames: usize, grid: FrameGrid, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(frames * grid.pixels());
        for t in 0..frames {
            for v in 0..grid.height {
                for u in 0..grid.width {
                    data.push(f(t, v, u));
                }
            }
        }
        Self { frames, grid, data }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn grid(&self) -> FrameGrid {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, t: usize, v: usize, u: usize) -> usize {
        (t * self.grid.height + v) * self.grid.width + u
    }

    /// Inverse of [`FrameStack::index`]: `(t, v, u)`.
    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let px = self.grid.pixels();
        let t = index / px;
        let rem = index % px;
        (t, rem / self.grid.width, rem % self.grid.width)
    }

    #[inline]
    pub fn get(&self, t: usize, v: usize, u: usize) -> &T {
        &self.data[self.index(t, v, u)]
    }

    #[inline]
    pub fn get_mut(&mut self, t: usize, v: usize, u: usize) -> &mut T {
        let i = self.index(t, v, u);
        &mut self.data[i]
    }

    pub fn frame(&self, t: usize) -> &[T] {
        let px = self.grid.pixels();
        &self.data[t * px..(t + 1) * px]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [T] {
        let px = self.grid.pixels();
        &mut self.data[t * px..(t + 1) * px]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> FrameStack<U> {
        FrameStack {
            frames: self.frames,
            grid: self.grid,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn same_shape<U>(&self, other: &FrameStack<U>) -> bool {
        self.frames == other.frames && self.grid == other.grid
    }

    pub(crate) fn check_shape<U>(&self, other: &FrameStack<U>, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.frames,
                self.grid.height,
                self.grid.width,
                other.frames,
                other.grid.height,
                other.grid.width
            )))
        }
    }
}

/// Camera-space 3D coordinates per pixel.
pub type PointMap = FrameStack<Vector3<f64>>;
/// Positive depth `z` per pixel.
pub type DepthMap = FrameStack<f64>;
/// Disparity `b f / z` per pixel; the constant `b f` is taken as 1.
pub type DisparityMap = FrameStack<f64>;
/// Unit normals per pixel; `None` where undefined (borders, invalid stencil).
pub type NormalMap = FrameStack<Option<Vector3<f64>>>;

/// Soft validity per pixel, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidMask(FrameStack<f64>);

impl ValidMask {
    pub const THRESHOLD: f64 = 0.5;

    pub fn new(values: FrameStack<f64>) -> Result<Self> {
        if let Some(index) = values.data().iter().position(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::InvalidInput { index });
        }
        Ok(Self(values))
    }

    pub fn all_valid(frames: usize, grid: FrameGrid) -> Self {
        Self(FrameStack::filled(frames, grid, 1.0))
    }

    pub fn from_bools(frames: usize, grid: FrameGrid, valid: &[bool]) -> Result<Self> {
        let values = valid.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Ok(Self(FrameStack::from_vec(frames, grid, values)?))
    }

    pub fn values(&self) -> &FrameStack<f64> {
        &self.0
    }

    pub fn frames(&self) -> usize {
        self.0.frames()
    }

    pub fn grid(&self) -> FrameGrid {
        self.0.grid()
    }

    #[inline]
    pub fn is_valid(&self, index: usize) -> bool {
        self.0.data()[index] >= Self::THRESHOLD
    }

    #[inline]
    pub fn is_valid_at(&self, t: usize, v: usize, u: usize) -> bool {
        *self.0.get(t, v, u) >= Self::THRESHOLD
    }

    /// Hard 0/1 mask; applying it twice gives the same result.
    pub fn binarized(&self) -> Self {
        Self(self.0.map(|&m| if m >= Self::THRESHOLD { 1.0 } else { 0.0 }))
    }

    pub fn count_valid(&self) -> usize {
        (0..self.0.len()).filter(|&i| self.is_valid(i)).count()
    }

    pub fn count_valid_in_frame(&self, t: usize) -> usize {
        self.0.frame(t).iter().filter(|&&m| m >= Self::THRESHOLD).count()
    }

    pub fn valid_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.0.len()).filter(move |&i| self.is_valid(i))
    }

    pub(crate) fn check_shape<U>(&self, other: &FrameStack<U>, what: &str) -> Result<()> {
        self.0.check_shape(other, what)
    }
}

/// Pinhole intrinsics with a single focal length and the principal point at
/// the grid center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub focal: f64,
}

impl Intrinsics {
    pub fn new(focal: f64) -> Result<Self> {
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(Error::Config(format!("focal length must be positive, got {focal}")));
        }
        Ok(Self { focal })
    }
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from a raw matrix, rejecting anything that is not a
    /// proper rotation to within 1e-9.
    pub fn from_matrix(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "not a rotation matrix (orthogonality error {ortho:e}, det {det})"
            )));
        }
        Ok(Self {
            rotation: Rotation3::from_matrix_unchecked(rotation),
            translation,
        })
    }

    /// Pose of a camera at `eye` looking at `target`, image y axis aligned
    /// with `down` as far as possible.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, down: Vector3<f64>) -> Result<Self> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Config("look_at with coincident eye and target".into()))?;
        let x = down
            .cross(&z)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Config("look_at with view direction parallel to down".into()))?;
        let y = z.cross(&x);
        // rows of R are the camera axes expressed in world coordinates
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let rotation = Rotation3::from_matrix_unchecked(r);
        Ok(Self {
            rotation,
            translation: -(rotation * eye),
        })
    }

    pub fn transform_point(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self {
            rotation: r_inv,
            translation: -(r_inv * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Left-multiplies by `exp(delta)` with `delta = (omega, nu)`; the
    /// increment used by the pose solver.
    pub fn retract(&self, omega: &Vector3<f64>, nu: &Vector3<f64>) -> Self {
        let step = Self {
            rotation: Rotation3::from_scaled_axis(*omega),
            translation: *nu,
        };
        step.compose(self)
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&self.rotation)
    }

    /// Rotation angle of `self⁻¹ ∘ other` in radians.
    pub fn rotation_angle_to(&self, other: &Self) -> f64 {
        // atan2 form stays accurate (and finite) near zero angle
        let q = nalgebra::UnitQuaternion::from_rotation_matrix(&(self.rotation.inverse() * other.rotation));
        2.0 * q.imag().norm().atan2(q.w.abs())
    }
}

/// Projects a camera-space point to pixel coordinates; returns `(pixel, depth)`.
pub fn project(point: &Vector3<f64>, k: &Intrinsics, grid: FrameGrid) -> Result<(Vector2<f64>, f64)> {
    let z = point.z;
    if !(z > 0.0) {
        return Err(Error::DegenerateProjection(z));
    }
    let c = grid.center();
    let pixel = Vector2::new(c.x + k.focal * point.x / z, c.y + k.focal * point.y / z);
    Ok((pixel, z))
}

/// Back-projects a pixel at the given depth into camera space.
pub fn unproject(pixel: &Vector2<f64>, depth: f64, k: &Intrinsics, grid: FrameGrid) -> Result<Vector3<f64>> {
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(Error::InvalidDepth(depth));
    }
    let c = grid.center();
    Ok(Vector3::new(
        (pixel.x - c.x) * depth / k.focal,
        (pixel.y - c.y) * depth / k.focal,
        depth,
    ))
}

const MIN_CROSS_NORM: f64 = 1e-12;

#[inline]
fn stencil_valid(mask: &ValidMask, t: usize, v: usize, u: usize, grid: FrameGrid) -> bool {
    u >= 1
        && v >= 1
        && u + 1 < grid.width
        && v + 1 < grid.height
        && mask.is_valid_at(t, v, u)
        && mask.is_valid_at(t, v, u - 1)
        && mask.is_valid_at(t, v, u + 1)
        && mask.is_valid_at(t, v - 1, u)
        && mask.is_valid_at(t, v + 1, u)
}

#[inline]
fn tangents(pmap: &PointMap, t: usize, v: usize, u: usize) -> (Vector3<f64>, Vector3<f64>) {
    let du = (pmap.get(t, v, u + 1) - pmap.get(t, v, u - 1)) * 0.5;
    let dv = (pmap.get(t, v + 1, u) - pmap.get(t, v - 1, u)) * 0.5;
    (du, dv)
}

/// Normals from central-difference tangents `∂p/∂u × ∂p/∂v`, oriented
/// towards the camera. Pixels on the grid border, with any invalid stencil
/// pixel, or with a degenerate cross product are left undefined.
pub fn derive_normals(pmap: &PointMap, mask: &ValidMask) -> Result<NormalMap> {
    mask.check_shape(pmap, "derive_normals mask vs point map")?;
    let grid = pmap.grid();
    Ok(FrameStack::from_fn(pmap.frames(), grid, |t, v, u| {
        if !stencil_valid(mask, t, v, u, grid) {
            return None;
        }
        let (du, dv) = tangents(pmap, t, v, u);
        let c = du.cross(&dv);
        let norm = c.norm();
        if !(norm >= MIN_CROSS_NORM) {
            return None;
        }
        let n = c / norm;
        Some(if n.z > 0.0 { -n } else { n })
    }))
}

/// Vector-Jacobian product of [`derive_normals`]: given `dL/dn` at every
/// defined normal, returns `dL/dp` for every point.
pub fn derive_normals_backward(
    pmap: &PointMap,
    mask: &ValidMask,
    grad_normals: &FrameStack<Vector3<f64>>,
) -> Result<FrameStack<Vector3<f64>>> {
    mask.check_shape(pmap, "derive_normals_backward mask vs point map")?;
    pmap.check_shape(grad_normals, "derive_normals_backward gradient vs point map")?;
    let grid = pmap.grid();
    let mut grad = FrameStack::filled(pmap.frames(), grid, Vector3::zeros());
    for t in 0..pmap.frames() {
        for v in 0..grid.height {
            for u in 0..grid.width {
                if !stencil_valid(mask, t, v, u, grid) {
                    continue;
                }
                let (du, dv) = tangents(pmap, t, v, u);
                let c = du.cross(&dv);
                let norm = c.norm();
                if !(norm >= MIN_CROSS_NORM) {
                    continue;
                }
                let unit = c / norm;
                let sign = if unit.z > 0.0 { -1.0 } else { 1.0 };
                let g = grad_normals.get(t, v, u);
                // d(c/|c|)/dc = (I - ĉĉᵀ) / |c|
                let g_c = (g - unit * unit.dot(g)) * (sign / norm);
                let g_du = dv.cross(&g_c) * 0.5;
                let g_dv = g_c.cross(&du) * 0.5;
                *grad.get_mut(t, v, u + 1) += g_du;
                *grad.get_mut(t, v, u - 1) -= g_du;
                *grad.get_mut(t, v + 1, u) += g_dv;
                *grad.get_mut(t, v - 1, u) -= g_dv;
            }
        }
    }
    Ok(grad)
}

//! Codecs between point maps and the intermediate representations used for
//! latent encoding: normalized disparity, the cuboid map `(x/z, y/z, log z)`
//! and the decoupled map `(θ_diag, log z)`, plus clip-level scale
//! normalization.
//!
//! Invalid pixels carry 0 in every encoded representation.

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geom::{DepthMap, DisparityMap, FrameGrid, FrameStack, Intrinsics, PointMap, ValidMask};

/// Disparity mapped affinely onto `[-1, 1]` using the clip-wide range.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedDisparity {
    pub values: FrameStack<f64>,
    /// Set when all valid disparities are equal; `values` is then all zeros.
    pub degenerate_range: bool,
}

/// Per-pixel `(x/z, y/z, log z)`.
pub type CuboidMap = FrameStack<Vector3<f64>>;

/// Per-frame diagonal field of view plus a per-pixel log-depth grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledMap {
    pub theta_diag: Vec<f64>,
    pub log_depth: FrameStack<f64>,
}

impl DecoupledMap {
    pub fn frames(&self) -> usize {
        self.log_depth.frames()
    }

    pub fn grid(&self) -> FrameGrid {
        self.log_depth.grid()
    }
}

/// `θ_diag = sqrt(W² + H²) / (2 f)`.
pub fn theta_from_focal(focal: f64, grid: FrameGrid) -> Result<f64> {
    if !(focal > 0.0 && focal.is_finite()) {
        return Err(Error::Config(format!("focal length must be positive, got {focal}")));
    }
    Ok(grid.half_diagonal() / focal)
}

/// Inverse of [`theta_from_focal`].
pub fn focal_from_theta(theta_diag: f64, grid: FrameGrid) -> Result<f64> {
    if !(theta_diag > 0.0 && theta_diag.is_finite()) {
        return Err(Error::InvalidFov(theta_diag));
    }
    Ok(grid.half_diagonal() / theta_diag)
}

/// Disparity `1 / z` from depth at valid pixels, 0 elsewhere.
pub fn disparity_from_depth(depth: &DepthMap, mask: &ValidMask) -> Result<DisparityMap> {
    mask.check_shape(depth, "disparity mask vs depth")?;
    let mut out = FrameStack::filled(depth.frames(), depth.grid(), 0.0);
    for i in mask.valid_indices() {
        let z = depth.data()[i];
        if !(z > 0.0 && z.is_finite()) {
            return Err(Error::InvalidPoint { index: i });
        }
        out.data_mut()[i] = 1.0 / z;
    }
    Ok(out)
}

/// Depth channel of a point map.
pub fn depth_of(pmap: &PointMap) -> DepthMap {
    pmap.map(|p| p.z)
}

/// Maps valid disparities onto `[-1, 1]` with the min/max taken over the
/// whole clip. Any positive rescaling of the input cancels out.
pub fn normalize_disparity(disp: &DisparityMap, mask: &ValidMask) -> Result<NormalizedDisparity> {
    mask.check_shape(disp, "normalize_disparity mask vs disparity")?;
    let (lo, hi) = mask
        .valid_indices()
        .map(|i| disp.data()[i])
        .fold(None, |acc: Option<(f64, f64)>, x| match acc {
            None => Some((x, x)),
            Some((lo, hi)) => Some((lo.min(x), hi.max(x))),
        })
        .ok_or(Error::EmptyClip)?;
    if let Some(index) = mask.valid_indices().find(|&i| !disp.data()[i].is_finite()) {
        return Err(Error::InvalidInput { index });
    }
    let mut values = FrameStack::filled(disp.frames(), disp.grid(), 0.0);
    let range = hi - lo;
    if !(range > 0.0) {
        return Ok(NormalizedDisparity {
            values,
            degenerate_range: true,
        });
    }
    for i in mask.valid_indices() {
        values.data_mut()[i] = 2.0 * (disp.data()[i] - lo) / range - 1.0;
    }
    Ok(NormalizedDisparity {
        values,
        degenerate_range: false,
    })
}

/// Convenience: normalized disparity straight from a point map's depth.
pub fn normalized_disparity_of(pmap: &PointMap, mask: &ValidMask) -> Result<NormalizedDisparity> {
    normalize_disparity(&disparity_from_depth(&depth_of(pmap), mask)?, mask)
}

fn check_valid_point(pmap: &PointMap, i: usize) -> Result<Vector3<f64>> {
    let p = pmap.data()[i];
    if !(p.z > 0.0 && p.iter().all(|c| c.is_finite())) {
        return Err(Error::InvalidPoint { index: i });
    }
    Ok(p)
}

pub fn encode_cuboid(pmap: &PointMap, mask: &ValidMask) -> Result<CuboidMap> {
    mask.check_shape(pmap, "encode_cuboid mask vs point map")?;
    let mut out = FrameStack::filled(pmap.frames(), pmap.grid(), Vector3::zeros());
    for i in mask.valid_indices() {
        let p = check_valid_point(pmap, i)?;
        out.data_mut()[i] = Vector3::new(p.x / p.z, p.y / p.z, p.z.ln());
    }
    Ok(out)
}

/// Decodes every pixel; the zero sentinel at invalid pixels decodes to
/// `(0, 0, 1)` and stays masked out by the caller's mask.
pub fn decode_cuboid(cuboid: &CuboidMap) -> Result<PointMap> {
    if let Some(index) = cuboid.data().iter().position(|c| !c.iter().all(|x| x.is_finite())) {
        return Err(Error::InvalidInput { index });
    }
    Ok(cuboid.map(|c| {
        let z = c.z.exp();
        Vector3::new(c.x * z, c.y * z, z)
    }))
}

/// Least-squares focal from `u - W/2 = f x/z`, `v - H/2 = f y/z` over the
/// valid pixels of frame `t`.
fn recover_focal(pmap: &PointMap, mask: &ValidMask, t: usize) -> Result<f64> {
    let grid = pmap.grid();
    let c = grid.center();
    let (mut num, mut den) = (0.0, 0.0);
    for v in 0..grid.height {
        for u in 0..grid.width {
            let i = pmap.index(t, v, u);
            if !mask.is_valid(i) {
                continue;
            }
            let p = check_valid_point(pmap, i)?;
            let ray = Vector2::new(p.x / p.z, p.y / p.z);
            let offset = Vector2::new(u as f64 - c.x, v as f64 - c.y);
            num += offset.dot(&ray);
            den += ray.norm_squared();
        }
    }
    // a frame whose valid rays all sit on the optical axis pins nothing
    if !(den > 1e-300) || !(num > 0.0) {
        return Err(Error::FocalUnobservable { frame: t });
    }
    Ok(num / den)
}

/// Splits a point map into per-frame `θ_diag` and log depth, recovering each
/// frame's focal length along the way.
pub fn encode_decoupled(pmap: &PointMap, mask: &ValidMask) -> Result<(DecoupledMap, Vec<Intrinsics>)> {
    mask.check_shape(pmap, "encode_decoupled mask vs point map")?;
    let grid = pmap.grid();
    let mut theta_diag = Vec::with_capacity(pmap.frames());
    let mut intrinsics = Vec::with_capacity(pmap.frames());
    for t in 0..pmap.frames() {
        let focal = recover_focal(pmap, mask, t)?;
        theta_diag.push(theta_from_focal(focal, grid)?);
        intrinsics.push(Intrinsics::new(focal)?);
    }
    let mut log_depth = FrameStack::filled(pmap.frames(), grid, 0.0);
    for i in mask.valid_indices() {
        log_depth.data_mut()[i] = check_valid_point(pmap, i)?.z.ln();
    }
    Ok((DecoupledMap { theta_diag, log_depth }, intrinsics))
}

/// Inverse perspective transform from `(θ_diag, log z)` back to camera-space
/// points.
pub fn decode_decoupled(dec: &DecoupledMap, grid: FrameGrid) -> Result<PointMap> {
    if dec.grid() != grid || dec.theta_diag.len() != dec.frames() {
        return Err(Error::shape(format!(
            "decoupled map {}x{} with {} angles for {} frames does not match grid {}x{}",
            dec.grid().width,
            dec.grid().height,
            dec.theta_diag.len(),
            dec.frames(),
            grid.width,
            grid.height
        )));
    }
    let focals = dec
        .theta_diag
        .iter()
        .map(|&th| focal_from_theta(th, grid))
        .collect::<Result<Vec<_>>>()?;
    if let Some(index) = dec.log_depth.data().iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidInput { index });
    }
    let c = grid.center();
    Ok(FrameStack::from_fn(dec.frames(), grid, |t, v, u| {
        let z = dec.log_depth.get(t, v, u).exp();
        let f = focals[t];
        Vector3::new((u as f64 - c.x) * z / f, (v as f64 - c.y) * z / f, z)
    }))
}

/// Divides the clip by one shared scale so that the median valid depth is 1.
/// Returns the normalized map and the scale that was divided out.
///
/// The lower median is used, which makes the operation exactly idempotent.
pub fn normalize_sequence(pmap: &PointMap, mask: &ValidMask) -> Result<(PointMap, f64)> {
    mask.check_shape(pmap, "normalize_sequence mask vs point map")?;
    let mut depths = mask
        .valid_indices()
        .map(|i| check_valid_point(pmap, i).map(|p| p.z))
        .collect::<Result<Vec<_>>>()?;
    if depths.is_empty() {
        return Err(Error::EmptyClip);
    }
    let mid = (depths.len() - 1) / 2;
    let (_, &mut scale, _) = depths.select_nth_unstable_by(mid, f64::total_cmp);
    Ok((pmap.map(|p| p / scale), scale))
}

pub fn denormalize_sequence(pmap: &PointMap, scale: f64) -> PointMap {
    pmap.map(|p| p * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(values: &[f64]) -> FrameStack<f64> {
        FrameStack::from_vec(1, FrameGrid::new(values.len(), 1).unwrap(), values.to_vec()).unwrap()
    }

    #[test]
    fn normalize_disparity_affine() {
        let d = row(&[1.0, 2.0, 3.0]);
        let mask = ValidMask::all_valid(1, d.grid());
        let n = normalize_disparity(&d, &mask).unwrap();
        assert_eq!(n.values.data(), &[-1.0, 0.0, 1.0]);
        assert!(!n.degenerate_range);
    }

    #[test]
    fn normalize_disparity_constant_is_flagged() {
        let d = row(&[5.0, 5.0, 5.0]);
        let n = normalize_disparity(&d, &ValidMask::all_valid(1, d.grid())).unwrap();
        assert_eq!(n.values.data(), &[0.0, 0.0, 0.0]);
        assert!(n.degenerate_range);
    }

    #[test]
    fn normalize_disparity_ignores_invalid_and_scale() {
        let d = row(&[1.0, 100.0, 2.0, 3.0]);
        let mask = ValidMask::from_bools(1, d.grid(), &[true, false, true, true]).unwrap();
        let a = normalize_disparity(&d, &mask).unwrap();
        assert_eq!(a.values.data(), &[-1.0, 0.0, 0.0, 1.0]);
        let b = normalize_disparity(&d.map(|x| x * 7.5), &mask).unwrap();
        for (x, y) in a.values.data().iter().zip(b.values.data()) {
            assert!((x - y).abs() < 1e-15);
        }
        let empty = ValidMask::from_bools(1, d.grid(), &[false; 4]).unwrap();
        assert_eq!(normalize_disparity(&d, &empty), Err(Error::EmptyClip));
    }

    #[test]
    fn cuboid_examples() {
        let grid = FrameGrid::new(2, 1).unwrap();
        let pmap = FrameStack::from_vec(
            1,
            grid,
            vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(2.0, -2.0, 2.0)],
        )
        .unwrap();
        let mask = ValidMask::all_valid(1, grid);
        let c = encode_cuboid(&pmap, &mask).unwrap();
        assert_eq!(c.data()[0], Vector3::zeros());
        assert_eq!(c.data()[1], Vector3::new(1.0, -1.0, 2f64.ln()));
        let back = decode_cuboid(&c).unwrap();
        assert!((back.data()[1] - pmap.data()[1]).norm() < 1e-15);
    }

    #[test]
    fn cuboid_rejects_bad_points() {
        let grid = FrameGrid::new(1, 1).unwrap();
        let pmap = FrameStack::from_vec(1, grid, vec![Vector3::new(0.0, 0.0, -1.0)]).unwrap();
        let mask = ValidMask::all_valid(1, grid);
        assert_eq!(encode_cuboid(&pmap, &mask), Err(Error::InvalidPoint { index: 0 }));
        let bad = FrameStack::from_vec(1, grid, vec![Vector3::new(f64::NAN, 0.0, 0.0)]).unwrap();
        assert_eq!(decode_cuboid(&bad), Err(Error::InvalidInput { index: 0 }));
        let invalid = ValidMask::from_bools(1, grid, &[false]).unwrap();
        assert_eq!(encode_cuboid(&pmap, &invalid).unwrap().data()[0], Vector3::zeros());
    }

    #[test]
    fn theta_of_vga_is_one() {
        let grid = FrameGrid::new(640, 480).unwrap();
        assert_eq!(theta_from_focal(400.0, grid).unwrap(), 1.0);
        let big = FrameGrid::new(1280, 960).unwrap();
        assert_eq!(focal_from_theta(1.0, big).unwrap(), 2.0 * focal_from_theta(1.0, grid).unwrap());
        assert_eq!(focal_from_theta(0.0, grid), Err(Error::InvalidFov(0.0)));
    }

    #[test]
    fn decode_decoupled_center_ray() {
        let grid = FrameGrid::new(640, 480).unwrap();
        let dec = DecoupledMap {
            theta_diag: vec![1.0],
            log_depth: FrameStack::filled(1, grid, 0.0),
        };
        let pmap = decode_decoupled(&dec, grid).unwrap();
        assert_eq!(*pmap.get(0, 240, 320), Vector3::new(0.0, 0.0, 1.0));
        let bad = DecoupledMap {
            theta_diag: vec![-1.0],
            ..dec
        };
        assert_eq!(decode_decoupled(&bad, grid), Err(Error::InvalidFov(-1.0)));
    }

    fn random_pmap(rng: &mut ChaCha8Rng, frames: usize, grid: FrameGrid, focals: &[f64]) -> PointMap {
        let c = grid.center();
        FrameStack::from_fn(frames, grid, |t, v, u| {
            let z = rng.random_range(0.2..30.0);
            Vector3::new((u as f64 - c.x) * z / focals[t], (v as f64 - c.y) * z / focals[t], z)
        })
    }

    #[test]
    fn decoupled_recovers_focal_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = FrameGrid::new(24, 17).unwrap();
        let focals = [512.7, 33.0, 1e4];
        let pmap = random_pmap(&mut rng, 3, grid, &focals);
        let mask = ValidMask::all_valid(3, grid);
        let (dec, ks) = encode_decoupled(&pmap, &mask).unwrap();
        for (k, f) in ks.iter().zip(focals) {
            assert!((k.focal - f).abs() / f < 1e-9);
        }
        let back = decode_decoupled(&dec, grid).unwrap();
        for (a, b) in back.data().iter().zip(pmap.data()) {
            assert!((a - b).norm() / b.norm() < 1e-9);
        }
    }

    #[test]
    fn decoupled_center_only_is_unobservable() {
        let grid = FrameGrid::new(4, 4).unwrap();
        let pmap = FrameStack::filled(1, grid, Vector3::new(0.0, 0.0, 2.0));
        let mut valid = vec![false; 16];
        valid[2 * 4 + 2] = true;
        let mask = ValidMask::from_bools(1, grid, &valid).unwrap();
        assert_eq!(
            encode_decoupled(&pmap, &mask),
            Err(Error::FocalUnobservable { frame: 0 })
        );
    }

    #[test]
    fn sequence_normalization() {
        let grid = FrameGrid::new(3, 2).unwrap();
        let pmap = FrameStack::filled(2, grid, Vector3::new(1.0, -2.0, 4.0));
        let mask = ValidMask::all_valid(2, grid);
        let (norm, s) = normalize_sequence(&pmap, &mask).unwrap();
        assert_eq!(s, 4.0);
        assert!(norm.data().iter().all(|p| p.z == 1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pmap = random_pmap(&mut rng, 2, grid, &[3.0, 4.0]);
        let (once, s1) = normalize_sequence(&pmap, &mask).unwrap();
        let (_, s2) = normalize_sequence(&once, &mask).unwrap();
        assert_eq!(s2, 1.0);
        let back = denormalize_sequence(&once, s1);
        for (a, b) in back.data().iter().zip(pmap.data()) {
            assert!((a - b).norm() <= 1e-12 * b.norm());
        }
        let none = ValidMask::from_bools(2, grid, &[false; 12]).unwrap();
        assert_eq!(normalize_sequence(&pmap, &none), Err(Error::EmptyClip));
    }
}

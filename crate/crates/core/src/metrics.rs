//! Clip-level alignment and the point-map / depth evaluation metrics.
//!
//! Alignment is solved once for the whole clip (one scale, or one scale and
//! shift, shared by every frame), then metrics are averaged over all valid
//! pixels of all frames.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{DepthMap, PointMap, ValidMask};

/// Inlier threshold of the relative point error.
pub const DELTA_P_THRESHOLD: f64 = 0.25;
/// Inlier threshold of the depth ratio `max(ẑ/z, z/ẑ)`.
pub const DELTA_D_THRESHOLD: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub scale: f64,
    /// Zero for scale-only alignment.
    pub shift: f64,
    /// Sum of squared residuals at the returned parameters.
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointAlignment {
    /// Closed-form least-squares scale.
    Scale,
    /// Median of `‖p‖ / ‖p̂‖`, for sensitivity studies.
    MedianScale,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthAlignment {
    /// Least-squares `s ẑ + b ≈ z` in depth space.
    ScaleShift,
    /// Least-squares `s / ẑ + b ≈ 1 / z` in disparity space.
    ScaleShiftDisparity,
    None,
}

fn check_inputs<T>(pred: &crate::geom::FrameStack<T>, gt: &crate::geom::FrameStack<T>, mask: &ValidMask) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::shape("prediction and ground truth differ in shape"));
    }
    mask.check_shape(gt, "mask vs ground truth")
}

fn point_objective(pred: &PointMap, gt: &PointMap, mask: &ValidMask, scale: f64) -> f64 {
    mask.valid_indices()
        .map(|i| (pred.data()[i] * scale - gt.data()[i]).norm_squared())
        .sum()
}

/// Closed-form `s* = Σ⟨p, p̂⟩ / Σ⟨p̂, p̂⟩` over every valid pixel of the clip.
pub fn align_scale_points(pred: &PointMap, gt: &PointMap, mask: &ValidMask) -> Result<AlignmentResult> {
    check_inputs(pred, gt, mask)?;
    if mask.count_valid() == 0 {
        return Err(Error::EmptyMask);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for i in mask.valid_indices() {
        num += gt.data()[i].dot(&pred.data()[i]);
        den += pred.data()[i].norm_squared();
    }
    if !(den > 0.0) {
        return Err(Error::DegeneratePrediction);
    }
    let scale = num / den;
    if !(scale > 0.0) {
        return Err(Error::AntiCorrelated(scale));
    }
    Ok(AlignmentResult {
        scale,
        shift: 0.0,
        objective: point_objective(pred, gt, mask, scale),
    })
}

/// Scale from the median ratio of point norms.
pub fn align_median_scale_points(pred: &PointMap, gt: &PointMap, mask: &ValidMask) -> Result<AlignmentResult> {
    check_inputs(pred, gt, mask)?;
    let mut ratios: Vec<f64> = mask
        .valid_indices()
        .filter_map(|i| {
            let n = pred.data()[i].norm();
            (n > 0.0).then(|| gt.data()[i].norm() / n)
        })
        .collect();
    if ratios.is_empty() {
        return Err(if mask.count_valid() == 0 {
            Error::EmptyMask
        } else {
            Error::DegeneratePrediction
        });
    }
    let mid = ratios.len() / 2;
    let (_, &mut scale, _) = ratios.select_nth_unstable_by(mid, f64::total_cmp);
    if !(scale > 0.0) {
        return Err(Error::DegeneratePrediction);
    }
    Ok(AlignmentResult {
        scale,
        shift: 0.0,
        objective: point_objective(pred, gt, mask, scale),
    })
}

/// Least squares `min Σ (s x + b − y)²`; rejects constant `x` and `s ≤ 0`.
fn fit_affine(pairs: &[(f64, f64)]) -> Result<(f64, f64, f64)> {
    if pairs.len() < 2 {
        return Err(if pairs.is_empty() {
            Error::EmptyMask
        } else {
            Error::DegeneratePrediction
        });
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut scale_ref) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        scale_ref += x * x;
    }
    // centred variance below rounding level of the raw second moment
    if !(sxx > 1e-24 * scale_ref) {
        return Err(Error::DegeneratePrediction);
    }
    let s = sxy / sxx;
    if !(s > 0.0) {
        return Err(Error::AntiCorrelated(s));
    }
    let b = my - s * mx;
    let objective = pairs.iter().map(|&(x, y)| (s * x + b - y).powi(2)).sum();
    Ok((s, b, objective))
}

/// Shared scale and shift on depth, from the 2×2 normal equations.
pub fn align_scale_shift_depth(pred: &DepthMap, gt: &DepthMap, mask: &ValidMask) -> Result<AlignmentResult> {
    check_inputs(pred, gt, mask)?;
    let pairs: Vec<(f64, f64)> = mask.valid_indices().map(|i| (pred.data()[i], gt.data()[i])).collect();
    let (scale, shift, objective) = fit_affine(&pairs)?;
    Ok(AlignmentResult { scale, shift, objective })
}

/// Scale and shift fitted on inverse depth; `objective` is in disparity units.
/// Pixels with non-positive depth in either map are skipped.
pub fn align_scale_shift_disparity(pred: &DepthMap, gt: &DepthMap, mask: &ValidMask) -> Result<AlignmentResult> {
    check_inputs(pred, gt, mask)?;
    let pairs: Vec<(f64, f64)> = mask
        .valid_indices()
        .filter(|&i| pred.data()[i] > 0.0 && gt.data()[i] > 0.0)
        .map(|i| (1.0 / pred.data()[i], 1.0 / gt.data()[i]))
        .collect();
    let (scale, shift, objective) = fit_affine(&pairs)?;
    Ok(AlignmentResult { scale, shift, objective })
}

pub fn apply_point_alignment(pred: &PointMap, a: &AlignmentResult) -> PointMap {
    pred.map(|p| p * a.scale)
}

pub fn apply_depth_alignment(pred: &DepthMap, a: &AlignmentResult) -> DepthMap {
    pred.map(|&z| a.scale * z + a.shift)
}

/// Maps a prediction through a disparity-space alignment back to depth.
/// Pixels whose aligned disparity is not positive become `NaN` and are
/// excluded by [`eval_depth`].
pub fn apply_disparity_alignment(pred: &DepthMap, a: &AlignmentResult) -> DepthMap {
    pred.map(|&z| {
        let d = a.scale / z + a.shift;
        if d > 0.0 { 1.0 / d } else { f64::NAN }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    /// Mean relative point error, in percent.
    pub rel_p: f64,
    /// Percentage of pixels with relative error below the threshold.
    pub delta_p: f64,
    pub threshold: f64,
    pub valid: usize,
    /// Valid pixels skipped because the ground-truth point is the origin.
    pub excluded: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    /// Mean absolute relative error, in percent.
    pub rel_d: f64,
    /// Percentage of pixels with `max(ẑ/z, z/ẑ) < threshold`.
    pub delta_d: f64,
    pub threshold: f64,
    pub valid: usize,
    /// Valid pixels skipped because either depth is not positive.
    pub excluded: usize,
}

/// Relative point error of an already aligned prediction.
pub fn eval_points(pred: &PointMap, gt: &PointMap, mask: &ValidMask) -> Result<PointMetrics> {
    eval_points_at(pred, gt, mask, DELTA_P_THRESHOLD)
}

pub fn eval_points_at(pred: &PointMap, gt: &PointMap, mask: &ValidMask, threshold: f64) -> Result<PointMetrics> {
    check_inputs(pred, gt, mask)?;
    let (mut sum, mut inliers, mut valid, mut excluded) = (0.0, 0usize, 0usize, 0usize);
    for i in mask.valid_indices() {
        let p = gt.data()[i];
        let norm = p.norm();
        if !(norm > 0.0) {
            excluded += 1;
            continue;
        }
        let e = (pred.data()[i] - p).norm() / norm;
        sum += e;
        inliers += (e < threshold) as usize;
        valid += 1;
    }
    if valid == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(PointMetrics {
        rel_p: 100.0 * sum / valid as f64,
        delta_p: 100.0 * inliers as f64 / valid as f64,
        threshold,
        valid,
        excluded,
    })
}

/// Absolute relative depth error of an already aligned prediction.
pub fn eval_depth(pred: &DepthMap, gt: &DepthMap, mask: &ValidMask) -> Result<DepthMetrics> {
    eval_depth_at(pred, gt, mask, DELTA_D_THRESHOLD)
}

pub fn eval_depth_at(pred: &DepthMap, gt: &DepthMap, mask: &ValidMask, threshold: f64) -> Result<DepthMetrics> {
    check_inputs(pred, gt, mask)?;
    let (mut sum, mut inliers, mut valid, mut excluded) = (0.0, 0usize, 0usize, 0usize);
    for i in mask.valid_indices() {
        let (zh, z) = (pred.data()[i], gt.data()[i]);
        if !(zh > 0.0 && z > 0.0) {
            excluded += 1;
            continue;
        }
        sum += (zh - z).abs() / z;
        inliers += ((zh / z).max(z / zh) < threshold) as usize;
        valid += 1;
    }
    if valid == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(DepthMetrics {
        rel_d: 100.0 * sum / valid as f64,
        delta_d: 100.0 * inliers as f64 / valid as f64,
        threshold,
        valid,
        excluded,
    })
}

/// Alignment plus metrics, as recorded in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub points: Option<PointMetrics>,
    pub depth: Option<DepthMetrics>,
    pub point_alignment: Option<PointAlignment>,
    pub depth_alignment: Option<DepthAlignment>,
    pub alignment: AlignmentResult,
}

pub fn evaluate_points(pred: &PointMap, gt: &PointMap, mask: &ValidMask, mode: PointAlignment) -> Result<MetricsReport> {
    let alignment = match mode {
        PointAlignment::Scale => align_scale_points(pred, gt, mask)?,
        PointAlignment::MedianScale => align_median_scale_points(pred, gt, mask)?,
        PointAlignment::None => {
            check_inputs(pred, gt, mask)?;
            AlignmentResult {
                scale: 1.0,
                shift: 0.0,
                objective: point_objective(pred, gt, mask, 1.0),
            }
        }
    };
    let aligned = apply_point_alignment(pred, &alignment);
    Ok(MetricsReport {
        points: Some(eval_points(&aligned, gt, mask)?),
        depth: None,
        point_alignment: Some(mode),
        depth_alignment: None,
        alignment,
    })
}

pub fn evaluate_depth(pred: &DepthMap, gt: &DepthMap, mask: &ValidMask, mode: DepthAlignment) -> Result<MetricsReport> {
    let (alignment, aligned) = match mode {
        DepthAlignment::ScaleShift => {
            let a = align_scale_shift_depth(pred, gt, mask)?;
            (a, apply_depth_alignment(pred, &a))
        }
        DepthAlignment::ScaleShiftDisparity => {
            let a = align_scale_shift_disparity(pred, gt, mask)?;
            (a, apply_disparity_alignment(pred, &a))
        }
        DepthAlignment::None => {
            check_inputs(pred, gt, mask)?;
            let objective = mask.valid_indices().map(|i| (pred.data()[i] - gt.data()[i]).powi(2)).sum();
            (
                AlignmentResult {
                    scale: 1.0,
                    shift: 0.0,
                    objective,
                },
                pred.clone(),
            )
        }
    };
    Ok(MetricsReport {
        points: None,
        depth: Some(eval_depth(&aligned, gt, mask)?),
        point_alignment: None,
        depth_alignment: Some(mode),
        alignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{FrameGrid, FrameStack};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(seed: u64) -> (PointMap, ValidMask) {
        let grid = FrameGrid::new(6, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = FrameStack::from_fn(3, grid, |_, _, _| {
            Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..4.0))
        });
        (pts, ValidMask::all_valid(3, grid))
    }

    #[test]
    fn exact_scaling() {
        let (gt, mask) = random_points(1);
        let a = align_scale_points(&gt.map(|p| p * 2.0), &gt, &mask).unwrap();
        assert_eq!(a.scale, 0.5);
        assert_eq!(a.objective, 0.0);
        let a = align_scale_points(&gt, &gt, &mask).unwrap();
        assert_eq!(a.scale, 1.0);
    }

    #[test]
    fn degenerate_and_anti_correlated() {
        let (gt, mask) = random_points(2);
        let zero = gt.map(|_| Vector3::zeros());
        assert_eq!(align_scale_points(&zero, &gt, &mask), Err(Error::DegeneratePrediction));
        assert!(matches!(align_scale_points(&gt.map(|p| -p), &gt, &mask), Err(Error::AntiCorrelated(_))));
        let none = ValidMask::from_bools(3, gt.grid(), &vec![false; gt.len()]).unwrap();
        assert_eq!(align_scale_points(&gt, &gt, &none), Err(Error::EmptyMask));
    }

    #[test]
    fn exact_affine_depth() {
        let (gt, mask) = random_points(3);
        let z = gt.map(|p| p.z);
        let a = align_scale_shift_depth(&z.map(|&v| (v - 3.0) / 2.0), &z, &mask).unwrap();
        assert!((a.scale - 2.0).abs() < 1e-12 && (a.shift - 3.0).abs() < 1e-12);
        assert!(a.objective < 1e-24);
        let a = align_scale_shift_depth(&z, &z, &mask).unwrap();
        assert!((a.scale - 1.0).abs() < 1e-14 && a.shift.abs() < 1e-14);
        let flat = z.map(|_| 2.0);
        assert_eq!(align_scale_shift_depth(&flat, &z, &mask), Err(Error::DegeneratePrediction));
    }

    #[test]
    fn disparity_alignment_recovers_affine_disparity() {
        let (gt, mask) = random_points(4);
        let z = gt.map(|p| p.z);
        // 1/ẑ = (1/z − 0.1) / 3
        let pred = z.map(|&v| 3.0 / (1.0 / v - 0.1));
        let a = align_scale_shift_disparity(&pred, &z, &mask).unwrap();
        assert!((a.scale - 3.0).abs() < 1e-10 && (a.shift - 0.1).abs() < 1e-10);
        let m = evaluate_depth(&pred, &z, &mask, DepthAlignment::ScaleShiftDisparity).unwrap();
        assert!(m.depth.unwrap().rel_d < 1e-8);
    }

    #[test]
    fn perfect_and_uniform_errors() {
        let (gt, mask) = random_points(5);
        let m = eval_points(&gt, &gt, &mask).unwrap();
        assert_eq!((m.rel_p, m.delta_p), (0.0, 100.0));
        let off = eval_points(&gt.map(|p| p * 1.3), &gt, &mask).unwrap();
        assert!((off.rel_p - 30.0).abs() < 1e-9);
        assert_eq!(off.delta_p, 0.0);
        let z = gt.map(|p| p.z);
        let d = eval_depth(&z, &z, &mask).unwrap();
        assert_eq!((d.rel_d, d.delta_d), (0.0, 100.0));
    }

    #[test]
    fn depth_threshold_is_strict() {
        let grid = FrameGrid::new(2, 1).unwrap();
        let z = FrameStack::from_vec(1, grid, vec![4.0, 8.0]).unwrap();
        let mask = ValidMask::all_valid(1, grid);
        let d = eval_depth(&z.map(|&v| v * 1.25), &z, &mask).unwrap();
        assert_eq!(d.delta_d, 0.0);
        assert!((d.rel_d - 25.0).abs() < 1e-12);
    }

    #[test]
    fn exclusions_are_counted() {
        let grid = FrameGrid::new(3, 1).unwrap();
        let gt = FrameStack::from_vec(1, grid, vec![Vector3::zeros(), Vector3::z(), Vector3::z() * 2.0]).unwrap();
        let mask = ValidMask::all_valid(1, grid);
        let m = eval_points(&gt, &gt, &mask).unwrap();
        assert_eq!((m.valid, m.excluded), (2, 1));
        let z = FrameStack::from_vec(1, grid, vec![-1.0, 1.0, 2.0]).unwrap();
        let d = eval_depth(&z, &z, &mask).unwrap();
        assert_eq!((d.valid, d.excluded), (2, 1));
        let bad = FrameStack::from_vec(1, grid, vec![-1.0, 0.0, -2.0]).unwrap();
        assert_eq!(eval_depth(&bad, &bad, &mask), Err(Error::EmptyMask));
    }

    #[test]
    fn median_scale_on_exact_scaling() {
        let (gt, mask) = random_points(6);
        let a = align_median_scale_points(&gt.map(|p| p * 4.0), &gt, &mask).unwrap();
        assert!((a.scale - 0.25).abs() < 1e-15);
        let r = evaluate_points(&gt.map(|p| p * 4.0), &gt, &mask, PointAlignment::MedianScale).unwrap();
        assert!(r.points.unwrap().rel_p < 1e-12);
    }
}

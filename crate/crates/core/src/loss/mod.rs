//! Training losses for the point-map autoencoder, each returning its value
//! together with the analytic gradient with respect to the prediction.
//!
//! Every sum is normalized by the number of contributing pixels so values are
//! comparable across resolutions. L1 subgradients at exact ties are 0.

pub mod gradcheck;
mod schedule;

pub use schedule::{edm_weight, sample_sigma, NoiseSchedule};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{derive_normals, derive_normals_backward, DepthMap, FrameGrid, FrameStack, NormalMap, ValidMask};
use crate::repr::{decode_decoupled, DecoupledMap};

/// Weights of the combined autoencoder objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_n: f64,
    pub lambda_mask: f64,
    /// Patch subdivision factors `α` of the multi-scale loss.
    pub ms_scales: Vec<usize>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_n: 1.0,
            lambda_mask: 1.0,
            ms_scales: vec![1, 2, 4, 8, 16],
        }
    }
}

impl LossWeights {
    pub fn validate(&self, grid: FrameGrid) -> Result<()> {
        if !(self.lambda_n >= 0.0 && self.lambda_mask >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        validate_scales(&self.ms_scales, grid)
    }
}

fn validate_scales(scales: &[usize], grid: FrameGrid) -> Result<()> {
    if scales.is_empty() {
        return Err(Error::Config("multi-scale loss needs at least one scale".into()));
    }
    for &alpha in scales {
        if alpha == 0 || alpha > grid.width || alpha > grid.height {
            return Err(Error::Config(format!(
                "scale {alpha} does not yield patches of at least 1x1 on a {}x{} grid",
                grid.width, grid.height
            )));
        }
    }
    Ok(())
}

/// A scalar loss with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored<G> {
    pub value: f64,
    pub grad: G,
}

#[inline]
fn l1_sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of [`loss_recon`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReconGrad {
    pub log_depth: FrameStack<f64>,
    pub theta_diag: Vec<f64>,
}

/// L1 distance between predicted and reference log depth and field of view
/// over valid pixels, averaged over the valid-pixel count.
pub fn loss_recon(pred: &DecoupledMap, gt: &DecoupledMap, mask: &ValidMask) -> Result<Scored<ReconGrad>> {
    pred.log_depth.check_shape(&gt.log_depth, "loss_recon prediction vs target")?;
    mask.check_shape(&pred.log_depth, "loss_recon mask")?;
    if pred.theta_diag.len() != pred.frames() || gt.theta_diag.len() != gt.frames() {
        return Err(Error::shape("loss_recon field-of-view count differs from frame count"));
    }
    let n = mask.count_valid();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad_depth = FrameStack::filled(pred.frames(), pred.grid(), 0.0);
    for i in mask.valid_indices() {
        let diff = pred.log_depth.data()[i] - gt.log_depth.data()[i];
        value += diff.abs();
        grad_depth.data_mut()[i] = l1_sign(diff) * inv_n;
    }
    let mut grad_theta = vec![0.0; pred.frames()];
    for (t, g) in grad_theta.iter_mut().enumerate() {
        let count = mask.count_valid_in_frame(t) as f64;
        let diff = pred.theta_diag[t] - gt.theta_diag[t];
        value += count * diff.abs();
        *g = count * l1_sign(diff) * inv_n;
    }
    Ok(Scored {
        value: value * inv_n,
        grad: ReconGrad {
            log_depth: grad_depth,
            theta_diag: grad_theta,
        },
    })
}

/// Mean of `1 - n·n̂` over valid pixels where both normals are defined.
/// The gradient is with respect to the predicted normal vectors.
pub fn loss_normal(pred_n: &NormalMap, gt_n: &NormalMap, mask: &ValidMask) -> Result<Scored<FrameStack<Vector3<f64>>>> {
    pred_n.check_shape(gt_n, "loss_normal prediction vs target")?;
    mask.check_shape(pred_n, "loss_normal mask")?;
    let joint: Vec<(usize, Vector3<f64>, Vector3<f64>)> = mask
        .valid_indices()
        .filter_map(|i| match (pred_n.data()[i], gt_n.data()[i]) {
            (Some(p), Some(g)) => Some((i, p, g)),
            _ => None,
        })
        .collect();
    if joint.is_empty() {
        return Err(Error::EmptyMask);
    }
    let inv_n = 1.0 / joint.len() as f64;
    let mut grad = FrameStack::filled(pred_n.frames(), pred_n.grid(), Vector3::zeros());
    let mut value = 0.0;
    for (i, p, g) in joint {
        value += 1.0 - p.dot(&g);
        grad.data_mut()[i] = -g * inv_n;
    }
    Ok(Scored {
        value: value * inv_n,
        grad,
    })
}

/// [`loss_normal`] on normals derived from a predicted point map, with the
/// gradient carried back to the points.
pub fn loss_normal_from_points(
    pred: &FrameStack<Vector3<f64>>,
    gt_n: &NormalMap,
    mask: &ValidMask,
) -> Result<Scored<FrameStack<Vector3<f64>>>> {
    let pred_n = derive_normals(pred, mask)?;
    let scored = loss_normal(&pred_n, gt_n, mask)?;
    let grad = derive_normals_backward(pred, mask, &scored.grad)?;
    Ok(Scored {
        value: scored.value,
        grad,
    })
}

/// Half-open pixel ranges of the `α` non-overlapping patches along an axis
/// of length `len`.
pub fn patch_bounds(len: usize, alpha: usize) -> Vec<(usize, usize)> {
    (0..alpha).map(|k| (k * len / alpha, (k + 1) * len / alpha)).collect()
}

fn patch_lookup(len: usize, alpha: usize) -> Vec<usize> {
    let mut ids = vec![0; len];
    for (k, (lo, hi)) in patch_bounds(len, alpha).into_iter().enumerate() {
        ids[lo..hi].fill(k);
    }
    ids
}

/// Multi-scale local depth loss. Each frame is split into `α × α` patches of
/// size `W/α × H/α`; within a patch the mean-removed prediction is compared
/// with the mean-removed target in L1, means taken over valid pixels.
/// Patches without valid pixels are skipped. The total is divided by the
/// number of (pixel, scale) contributions.
pub fn loss_multiscale(
    pred_z: &DepthMap,
    gt_z: &DepthMap,
    mask: &ValidMask,
    scales: &[usize],
) -> Result<Scored<DepthMap>> {
    pred_z.check_shape(gt_z, "loss_multiscale prediction vs target")?;
    mask.check_shape(pred_z, "loss_multiscale mask")?;
    let grid = pred_z.grid();
    validate_scales(scales, grid)?;

    let frames = pred_z.frames();
    let mut value = 0.0;
    let mut contributions = 0usize;
    let mut grad = FrameStack::filled(frames, grid, 0.0);

    for &alpha in scales {
        let row_ids = patch_lookup(grid.height, alpha);
        let col_ids = patch_lookup(grid.width, alpha);
        let patches = frames * alpha * alpha;
        let patch_of = |i: usize| {
            let (t, v, u) = pred_z.coords(i);
            (t * alpha + row_ids[v]) * alpha + col_ids[u]
        };

        let mut count = vec![0usize; patches];
        let mut sum_pred = vec![0.0; patches];
        let mut sum_gt = vec![0.0; patches];
        for i in mask.valid_indices() {
            let k = patch_of(i);
            count[k] += 1;
            sum_pred[k] += pred_z.data()[i];
            sum_gt[k] += gt_z.data()[i];
        }
        let mean_pred: Vec<f64> = sum_pred.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
        let mean_gt: Vec<f64> = sum_gt.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();

        let mut sign_sum = vec![0.0; patches];
        let mut signs = Vec::new();
        for i in mask.valid_indices() {
            let k = patch_of(i);
            let r = (pred_z.data()[i] - mean_pred[k]) - (gt_z.data()[i] - mean_gt[k]);
            value += r.abs();
            let s = l1_sign(r);
            sign_sum[k] += s;
            signs.push((i, k, s));
        }
        contributions += signs.len();
        // d/dẑ_q Σ_p |r_p| = sign(r_q) - mean_p sign(r_p) within q's patch
        for (i, k, s) in signs {
            grad.data_mut()[i] += s - sign_sum[k] / count[k] as f64;
        }
    }

    if contributions == 0 {
        return Err(Error::EmptyMask);
    }
    let inv = 1.0 / contributions as f64;
    grad.data_mut().iter_mut().for_each(|g| *g *= inv);
    Ok(Scored {
        value: value * inv,
        grad,
    })
}

/// Mean squared error over all pixels between the normalized disparity and
/// the frozen base decoder's reconstruction of it. The gradient is with
/// respect to `decoded`.
pub fn loss_identity(disp_norm: &FrameStack<f64>, decoded: &FrameStack<f64>) -> Result<Scored<FrameStack<f64>>> {
    mse(decoded, disp_norm, "loss_identity")
}

/// Mean squared error between predicted and reference masks over all pixels.
pub fn loss_mask(pred_m: &ValidMask, gt_m: &ValidMask) -> Result<Scored<FrameStack<f64>>> {
    mse(pred_m.values(), gt_m.values(), "loss_mask")
}

fn mse(pred: &FrameStack<f64>, target: &FrameStack<f64>, what: &str) -> Result<Scored<FrameStack<f64>>> {
    pred.check_shape(target, what)?;
    if pred.is_empty() {
        return Err(Error::EmptyMask);
    }
    let inv_n = 1.0 / pred.len() as f64;
    let mut value = 0.0;
    let mut grad = FrameStack::filled(pred.frames(), pred.grid(), 0.0);
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        value += d * d;
        *g = 2.0 * d * inv_n;
    }
    Ok(Scored {
        value: value * inv_n,
        grad,
    })
}

/// Everything the combined autoencoder objective looks at.
#[derive(Debug, Clone, Copy)]
pub struct VaeLossInputs<'a> {
    pub pred: &'a DecoupledMap,
    pub pred_mask: &'a ValidMask,
    pub gt: &'a DecoupledMap,
    pub gt_mask: &'a ValidMask,
    /// Normals of the reference point map, see [`derive_normals`].
    pub gt_normals: &'a NormalMap,
    pub disp_norm: &'a FrameStack<f64>,
    /// Base decoder output for the composed latent.
    pub decoded_disp: &'a FrameStack<f64>,
}

/// Gradients of the combined objective with respect to every predicted input.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeGradients {
    pub log_depth: FrameStack<f64>,
    pub theta_diag: Vec<f64>,
    pub mask: FrameStack<f64>,
    pub decoded_disp: FrameStack<f64>,
}

/// Per-term values of the autoencoder objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon: f64,
    pub multiscale: f64,
    pub normal: f64,
    pub identity: f64,
    pub mask: f64,
    /// `recon + multiscale + λ_n normal`
    pub pmap: f64,
    /// `identity + pmap + λ_mask mask`
    pub total: f64,
    #[serde(skip)]
    pub gradients: Option<VaeGradients>,
}

impl LossReport {
    pub fn without_gradients(mut self) -> Self {
        self.gradients = None;
        self
    }
}

/// Assembles the full autoencoder objective and its gradient with respect
/// to the decoupled prediction, the predicted mask and the base decoder
/// output. Depth-based terms are evaluated on the reference mask.
pub fn loss_vae(inputs: &VaeLossInputs<'_>, weights: &LossWeights) -> Result<LossReport> {
    let grid = inputs.gt.grid();
    weights.validate(grid)?;
    let mask = inputs.gt_mask;

    let recon = loss_recon(inputs.pred, inputs.gt, mask)?;

    let pred_z = inputs.pred.log_depth.map(|l| l.exp());
    let gt_z = inputs.gt.log_depth.map(|l| l.exp());
    let ms = loss_multiscale(&pred_z, &gt_z, mask, &weights.ms_scales)?;

    let pred_points = decode_decoupled(inputs.pred, grid)?;
    let normal = loss_normal_from_points(&pred_points, inputs.gt_normals, mask)?;

    let identity = loss_identity(inputs.disp_norm, inputs.decoded_disp)?;
    let mask_term = loss_mask(inputs.pred_mask, inputs.gt_mask)?;

    let mut g_depth = recon.grad.log_depth;
    let mut g_theta = recon.grad.theta_diag;
    let px = grid.pixels();
    for (i, g) in g_depth.data_mut().iter_mut().enumerate() {
        // z = exp(l) and every point coordinate is proportional to z
        *g += ms.grad.data()[i] * pred_z.data()[i];
        let p = pred_points.data()[i];
        let gp = normal.grad.data()[i] * weights.lambda_n;
        *g += gp.dot(&p);
        // x = (u - cx) z θ / half_diag, so ∂x/∂θ = x / θ (same for y)
        let t = i / px;
        g_theta[t] += (gp.x * p.x + gp.y * p.y) / inputs.pred.theta_diag[t];
    }
    let g_mask = mask_term.grad.map(|g| g * weights.lambda_mask);

    let pmap = recon.value + ms.value + weights.lambda_n * normal.value;
    let total = identity.value + pmap + weights.lambda_mask * mask_term.value;
    Ok(LossReport {
        recon: recon.value,
        multiscale: ms.value,
        normal: normal.value,
        identity: identity.value,
        mask: mask_term.value,
        pmap,
        total,
        gradients: Some(VaeGradients {
            log_depth: g_depth,
            theta_diag: g_theta,
            mask: g_mask,
            decoded_disp: identity.grad,
        }),
    })
}

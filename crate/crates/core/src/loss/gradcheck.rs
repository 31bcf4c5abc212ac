//! Central finite-difference checks for the analytic loss gradients.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{derive_normals, unproject, FrameGrid, FrameStack, Intrinsics, NormalMap, PointMap, ValidMask};
use crate::loss::{
    loss_identity, loss_mask, loss_multiscale, loss_normal, loss_normal_from_points, loss_recon, loss_vae,
    patch_bounds, LossWeights, VaeLossInputs,
};
use crate::repr::DecoupledMap;

/// Denominator floor of the relative error. Central differences at step
/// 1e-6 carry about 1e-10 of rounding noise on O(1) losses, so entries
/// smaller than this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub evaluated: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` against `(f(x + h e_i) - f(x - h e_i)) / 2h` for
/// every coordinate.
pub fn check_gradient<F>(f: F, x: &[f64], analytic: &[f64], step: f64) -> Result<GradCheck>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if x.len() != analytic.len() {
        return Err(Error::shape(format!("{} gradient entries for {} inputs", analytic.len(), x.len())));
    }
    let mut probe = x.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        evaluated: x.len(),
    };
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = f(&probe)?;
        probe[i] = x[i] - step;
        let minus = f(&probe)?;
        probe[i] = x[i];
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFiniteLoss { index: i });
        }
        let numeric = (plus - minus) / (2.0 * step);
        let rel = relative_error(analytic[i], numeric);
        report.max_abs_error = report.max_abs_error.max((analytic[i] - numeric).abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}

/// Settings of the randomized gradient suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub instances: usize,
    pub width: usize,
    pub height: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Minimum distance of every L1 argument from its kink.
    pub kink_margin: f64,
    pub ms_scales: Vec<usize>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            width: 8,
            height: 8,
            step: 1e-6,
            tolerance: 1e-5,
            kink_margin: 1e-3,
            ms_scales: vec![1, 2, 4],
        }
    }
}

/// Outcome for one loss term across all random instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermCheck {
    pub term: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

struct Accumulator {
    term: &'static str,
    instances: usize,
    max_rel: f64,
    max_abs: f64,
}

impl Accumulator {
    fn new(term: &'static str) -> Self {
        Self {
            term,
            instances: 0,
            max_rel: 0.0,
            max_abs: 0.0,
        }
    }

    fn add(&mut self, check: GradCheck) {
        self.instances += 1;
        self.max_rel = self.max_rel.max(check.max_rel_error);
        self.max_abs = self.max_abs.max(check.max_abs_error);
    }

    fn finish(self, tolerance: f64) -> TermCheck {
        TermCheck {
            term: self.term.to_string(),
            instances: self.instances,
            max_rel_error: self.max_rel,
            max_abs_error: self.max_abs,
            passed: self.max_rel < tolerance,
        }
    }
}

fn random_mask(rng: &mut ChaCha8Rng, grid: FrameGrid, p_valid: f64) -> ValidMask {
    let valid: Vec<bool> = (0..grid.pixels()).map(|_| rng.random_bool(p_valid)).collect();
    ValidMask::from_bools(1, grid, &valid).expect("shape")
}

fn kinked_offset(rng: &mut ChaCha8Rng, margin: f64) -> f64 {
    let mag = rng.random_range(10.0 * margin..0.5);
    if rng.random_bool(0.5) {
        mag
    } else {
        -mag
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// A gently curved camera-facing surface with random relief.
fn random_surface(rng: &mut ChaCha8Rng, grid: FrameGrid) -> PointMap {
    let k = Intrinsics { focal: 6.0 };
    let a = rng.random_range(-0.2..0.2);
    let b = rng.random_range(-0.2..0.2);
    FrameStack::from_fn(1, grid, |_, v, u| {
        let z = 3.0 + a * u as f64 + b * v as f64 + rng.random_range(-0.05..0.05);
        unproject(&Vector2::new(u as f64, v as f64), z, &k, grid).expect("positive depth")
    })
}

/// Smallest `|r_p|` over all multi-scale residuals of patches holding at
/// least two valid pixels (single-pixel patches are identically zero).
fn min_ms_residual(pred: &FrameStack<f64>, gt: &FrameStack<f64>, mask: &ValidMask, scales: &[usize]) -> f64 {
    let grid = pred.grid();
    let mut min = f64::INFINITY;
    for t in 0..pred.frames() {
        for &alpha in scales {
            for &(r0, r1) in &patch_bounds(grid.height, alpha) {
                for &(c0, c1) in &patch_bounds(grid.width, alpha) {
                    let px: Vec<(usize, usize)> = (r0..r1)
                        .flat_map(|v| (c0..c1).map(move |u| (v, u)))
                        .filter(|&(v, u)| mask.is_valid_at(t, v, u))
                        .collect();
                    if px.len() < 2 {
                        continue;
                    }
                    let n = px.len() as f64;
                    let mp = px.iter().map(|&(v, u)| pred.get(t, v, u)).sum::<f64>() / n;
                    let mg = px.iter().map(|&(v, u)| gt.get(t, v, u)).sum::<f64>() / n;
                    for &(v, u) in &px {
                        min = min.min(((pred.get(t, v, u) - mp) - (gt.get(t, v, u) - mg)).abs());
                    }
                }
            }
        }
    }
    min
}

fn flatten3(stack: &FrameStack<Vector3<f64>>) -> Vec<f64> {
    stack.data().iter().flat_map(|v| [v.x, v.y, v.z]).collect()
}

fn unflatten3(x: &[f64], like: &FrameStack<Vector3<f64>>) -> FrameStack<Vector3<f64>> {
    let data = x.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
    FrameStack::from_vec(like.frames(), like.grid(), data).expect("shape")
}

fn with_values(like: &FrameStack<f64>, x: &[f64]) -> FrameStack<f64> {
    FrameStack::from_vec(like.frames(), like.grid(), x.to_vec()).expect("shape")
}

/// Runs every loss term's gradient check on `instances` random inputs.
pub fn run_gradient_suite(config: &SuiteConfig) -> Result<Vec<TermCheck>> {
    let grid = FrameGrid::new(config.width, config.height)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let step = config.step;
    let margin = config.kink_margin;

    let mut recon = Accumulator::new("recon");
    let mut normal = Accumulator::new("normal");
    let mut normal_points = Accumulator::new("normal_points");
    let mut multiscale = Accumulator::new("multiscale");
    let mut identity = Accumulator::new("identity");
    let mut mask_acc = Accumulator::new("mask");
    let mut vae = Accumulator::new("vae_total");

    for _ in 0..config.instances {
        // reconstruction: log depth and field of view
        {
            let mask = random_mask(&mut rng, grid, 0.8);
            let gt = DecoupledMap {
                theta_diag: vec![rng.random_range(0.3..1.5)],
                log_depth: FrameStack::from_fn(1, grid, |_, _, _| rng.random_range(-1.0..2.0)),
            };
            let pred = DecoupledMap {
                theta_diag: vec![gt.theta_diag[0] + kinked_offset(&mut rng, margin)],
                log_depth: gt.log_depth.map(|l| l + kinked_offset(&mut rng, margin)),
            };
            let scored = loss_recon(&pred, &gt, &mask)?;
            let mut x = pred.log_depth.data().to_vec();
            x.push(pred.theta_diag[0]);
            let mut g = scored.grad.log_depth.data().to_vec();
            g.push(scored.grad.theta_diag[0]);
            let n = grid.pixels();
            recon.add(check_gradient(
                |x| {
                    let p = DecoupledMap {
                        theta_diag: vec![x[n]],
                        log_depth: with_values(&pred.log_depth, &x[..n]),
                    };
                    Ok(loss_recon(&p, &gt, &mask)?.value)
                },
                &x,
                &g,
                step,
            )?);
        }

        // normals as free vectors
        {
            let mask = random_mask(&mut rng, grid, 0.8);
            let pred: FrameStack<Vector3<f64>> = FrameStack::from_fn(1, grid, |_, _, _| random_unit(&mut rng));
            let gt: NormalMap = FrameStack::from_fn(1, grid, |_, _, _| Some(random_unit(&mut rng)));
            let as_normals = |p: &FrameStack<Vector3<f64>>| p.map(|v| Some(*v));
            let scored = loss_normal(&as_normals(&pred), &gt, &mask)?;
            normal.add(check_gradient(
                |x| Ok(loss_normal(&as_normals(&unflatten3(x, &pred)), &gt, &mask)?.value),
                &flatten3(&pred),
                &flatten3(&scored.grad),
                step,
            )?);
        }

        // normals derived from points, gradient carried to the points
        {
            let mask = ValidMask::all_valid(1, grid);
            let pred = random_surface(&mut rng, grid);
            let gt_points = random_surface(&mut rng, grid);
            let gt = derive_normals(&gt_points, &mask)?;
            let scored = loss_normal_from_points(&pred, &gt, &mask)?;
            normal_points.add(check_gradient(
                |x| Ok(loss_normal_from_points(&unflatten3(x, &pred), &gt, &mask)?.value),
                &flatten3(&pred),
                &flatten3(&scored.grad),
                step,
            )?);
        }

        // multi-scale depth, resampled until no residual sits near a kink
        {
            let mask = random_mask(&mut rng, grid, 0.85);
            let (pred, gt) = loop {
                let gt = FrameStack::from_fn(1, grid, |_, _, _| rng.random_range(1.0..3.0));
                let pred = FrameStack::from_fn(1, grid, |_, _, _| rng.random_range(1.0..3.0));
                if min_ms_residual(&pred, &gt, &mask, &config.ms_scales) > margin {
                    break (pred, gt);
                }
            };
            let scored = loss_multiscale(&pred, &gt, &mask, &config.ms_scales)?;
            multiscale.add(check_gradient(
                |x| Ok(loss_multiscale(&with_values(&pred, x), &gt, &mask, &config.ms_scales)?.value),
                pred.data(),
                scored.grad.data(),
                step,
            )?);
        }

        // identity (MSE through the frozen decoder output)
        {
            let target = FrameStack::from_fn(1, grid, |_, _, _| rng.random_range(-1.0..1.0));
            let decoded = FrameStack::from_fn(1, grid, |_, _, _| rng.random_range(-1.2..1.2));
            let scored = loss_identity(&target, &decoded)?;
            identity.add(check_gradient(
                |x| Ok(loss_identity(&target, &with_values(&decoded, x))?.value),
                decoded.data(),
                scored.grad.data(),
                step,
            )?);
        }

        // mask MSE
        {
            let gt = random_mask(&mut rng, grid, 0.6);
            let pred = FrameStack::from_fn(1, grid, |_, _, _| rng.random_range(0.05..0.95));
            let scored = loss_mask(&ValidMask::new(pred.clone())?, &gt)?;
            mask_acc.add(check_gradient(
                |x| Ok(loss_mask(&ValidMask::new(with_values(&pred, x))?, &gt)?.value),
                pred.data(),
                scored.grad.data(),
                step,
            )?);
        }

        // the combined objective with respect to log depth and field of view
        {
            let gt_mask = ValidMask::all_valid(1, grid);
            let gt_points = random_surface(&mut rng, grid);
            let (gt, _) = crate::repr::encode_decoupled(&gt_points, &gt_mask)?;
            let gt_normals = derive_normals(&gt_points, &gt_mask)?;
            let weights = LossWeights {
                lambda_n: 0.7,
                lambda_mask: 1.3,
                ms_scales: config.ms_scales.clone(),
            };
            let gt_z = gt.log_depth.map(|l| l.exp());
            let pred = loop {
                let p = DecoupledMap {
                    theta_diag: vec![gt.theta_diag[0] + kinked_offset(&mut rng, margin)],
                    log_depth: gt.log_depth.map(|l| l + kinked_offset(&mut rng, margin) * 0.2),
                };
                let pz = p.log_depth.map(|l| l.exp());
                if min_ms_residual(&pz, &gt_z, &gt_mask, &weights.ms_scales) > margin {
                    break p;
                }
            };
            let pred_mask = ValidMask::new(FrameStack::from_fn(1, grid, |_, _, _| rng.random_range(0.1..0.9)))?;
            let disp = FrameStack::from_fn(1, grid, |_, _, _| rng.random_range(-1.0..1.0));
            let decoded = disp.map(|d| d + rng.random_range(-0.1..0.1));
            let eval = |p: &DecoupledMap| {
                loss_vae(
                    &VaeLossInputs {
                        pred: p,
                        pred_mask: &pred_mask,
                        gt: &gt,
                        gt_mask: &gt_mask,
                        gt_normals: &gt_normals,
                        disp_norm: &disp,
                        decoded_disp: &decoded,
                    },
                    &weights,
                )
            };
            let report = eval(&pred)?;
            let grads = report.gradients.expect("loss_vae returns gradients");
            let mut x = pred.log_depth.data().to_vec();
            x.push(pred.theta_diag[0]);
            let mut g = grads.log_depth.data().to_vec();
            g.push(grads.theta_diag[0]);
            let n = grid.pixels();
            vae.add(check_gradient(
                |x| {
                    let p = DecoupledMap {
                        theta_diag: vec![x[n]],
                        log_depth: with_values(&pred.log_depth, &x[..n]),
                    };
                    Ok(eval(&p)?.total)
                },
                &x,
                &g,
                step,
            )?);
        }
    }

    Ok([recon, normal, normal_points, multiscale, identity, mask_acc, vae]
        .into_iter()
        .map(|a| a.finish(config.tolerance))
        .collect())
}

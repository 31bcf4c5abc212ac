//! Dual-encoder latent composition.
//!
//! A frozen base autoencoder maps normalized disparity to a diagonal
//! Gaussian latent. A residual encoder sees the full point map and adds a
//! scaled offset to the latent mean only; the variance is passed through.
//! A point-map decoder reads the composed latent back into a decoupled
//! point map and a soft valid mask.
//!
//! The networks are trait objects. The toy implementations here are small
//! dense maps with hand-written gradients, enough to exercise the contract
//! and the identity regularizer at desk scale.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{derive_normals, FrameGrid, FrameStack, NormalMap, PointMap, ValidMask};
use crate::loss::{loss_identity, loss_vae, LossReport, LossWeights, VaeGradients, VaeLossInputs};
use crate::repr::{encode_decoupled, normalize_sequence, normalized_disparity_of, DecoupledMap};

/// Per-frame diagonal Gaussian; entry `(t, j)` lives at `t * dim + j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub frames: usize,
    pub dim: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl LatentCode {
    pub fn new(frames: usize, dim: usize, mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != frames * dim || variance.len() != frames * dim {
            return Err(Error::shape(format!(
                "latent of {frames}x{dim} needs {} entries, got mean {} / variance {}",
                frames * dim,
                mean.len(),
                variance.len()
            )));
        }
        if let Some(index) = mean.iter().position(|m| !m.is_finite()) {
            return Err(Error::InvalidInput { index });
        }
        if let Some(index) = variance.iter().position(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidInput { index });
        }
        Ok(Self {
            frames,
            dim,
            mean,
            variance,
        })
    }

    pub fn frame_mean(&self, t: usize) -> &[f64] {
        &self.mean[t * self.dim..(t + 1) * self.dim]
    }
}

/// Base encoder: normalized disparity to latent.
pub trait LatentEncoder: Send + Sync {
    fn encode(&self, disp_norm: &FrameStack<f64>) -> Result<LatentCode>;
}

/// Base decoder: latent to normalized disparity.
pub trait LatentDecoder: Send + Sync {
    fn decode(&self, code: &LatentCode) -> Result<FrameStack<f64>>;
    /// Pulls a gradient on the decoded disparity back to the latent mean.
    fn decode_vjp(&self, code: &LatentCode, grad: &FrameStack<f64>) -> Result<Vec<f64>>;
}

/// Residual encoder: emits a mean offset shaped like the latent mean.
pub trait ResidualEncoder {
    fn offset(&self, points: &PointMap, mask: &ValidMask, disp_norm: &FrameStack<f64>) -> Result<Vec<f64>>;
}

/// Point-map decoder: latent to decoupled point map plus soft mask.
pub trait PointMapDecoder {
    fn decode(&self, code: &LatentCode) -> Result<(DecoupledMap, ValidMask)>;
}

/// Base codec plus the trainable residual encoder and point-map decoder.
/// The base halves are shared, immutable handles.
#[derive(Clone)]
pub struct CodecBundle<R, P> {
    base_encoder: Arc<dyn LatentEncoder>,
    base_decoder: Arc<dyn LatentDecoder>,
    pub residual_encoder: R,
    pub pmap_decoder: P,
    pub offset_scale: f64,
}

pub const DEFAULT_OFFSET_SCALE: f64 = 0.1;

impl<R: ResidualEncoder, P: PointMapDecoder> CodecBundle<R, P> {
    pub fn new(
        base_encoder: Arc<dyn LatentEncoder>,
        base_decoder: Arc<dyn LatentDecoder>,
        residual_encoder: R,
        pmap_decoder: P,
    ) -> Self {
        Self {
            base_encoder,
            base_decoder,
            residual_encoder,
            pmap_decoder,
            offset_scale: DEFAULT_OFFSET_SCALE,
        }
    }

    pub fn base_encoder(&self) -> &dyn LatentEncoder {
        self.base_encoder.as_ref()
    }

    pub fn base_decoder(&self) -> &dyn LatentDecoder {
        self.base_decoder.as_ref()
    }

    /// `mean = base_mean + offset_scale · offset`, variance untouched.
    pub fn encode(&self, points: &PointMap, mask: &ValidMask, disp_norm: &FrameStack<f64>) -> Result<LatentCode> {
        let base = self.base_encoder.encode(disp_norm)?;
        let offset = self.residual_encoder.offset(points, mask, disp_norm)?;
        compose(base, &offset, self.offset_scale)
    }

    /// Identity regularizer of the composed latent seen through the frozen
    /// base decoder.
    pub fn identity_probe(&self, points: &PointMap, mask: &ValidMask, disp_norm: &FrameStack<f64>) -> Result<f64> {
        let code = self.encode(points, mask, disp_norm)?;
        let decoded = self.base_decoder.decode(&code)?;
        Ok(loss_identity(disp_norm, &decoded)?.value)
    }
}

/// Adds a scaled offset to the latent mean. Entries whose scaled offset is
/// zero are left untouched, so a zero offset keeps the base latent
/// bit-identical (including signed zeros).
pub fn compose(mut base: LatentCode, offset: &[f64], scale: f64) -> Result<LatentCode> {
    if offset.len() != base.mean.len() {
        return Err(Error::shape(format!(
            "residual offset has {} entries, latent mean has {}",
            offset.len(),
            base.mean.len()
        )));
    }
    for (m, &o) in base.mean.iter_mut().zip(offset) {
        let d = scale * o;
        if d != 0.0 {
            *m += d;
        }
    }
    Ok(base)
}

/// Random orthogonal down-projection `B` (rows orthonormal) as encoder and
/// its transpose as decoder: a deterministic, lossy linear autoencoder.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoCodec {
    basis: DMatrix<f64>,
    variance: f64,
}

impl OrthoCodec {
    pub fn random(pixels: usize, dim: usize, variance: f64, seed: u64) -> Result<Self> {
        if dim == 0 || dim > pixels {
            return Err(Error::Config(format!("latent dim must be in 1..={pixels}, got {dim}")));
        }
        if !(variance >= 0.0) {
            return Err(Error::Config("latent variance must be non-negative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gauss = DMatrix::from_fn(pixels, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = gauss.qr().q();
        Ok(Self {
            basis: q.transpose(),
            variance,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn pixels(&self) -> usize {
        self.basis.ncols()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    fn check_pixels(&self, grid: FrameGrid) -> Result<()> {
        if grid.pixels() != self.pixels() {
            return Err(Error::shape(format!(
                "codec expects {} pixels per frame, got {}",
                self.pixels(),
                grid.pixels()
            )));
        }
        Ok(())
    }
}

impl LatentEncoder for OrthoCodec {
    fn encode(&self, disp_norm: &FrameStack<f64>) -> Result<LatentCode> {
        self.check_pixels(disp_norm.grid())?;
        let frames = disp_norm.frames();
        let mut mean = Vec::with_capacity(frames * self.dim());
        for t in 0..frames {
            let x = DVector::from_column_slice(disp_norm.frame(t));
            mean.extend((&self.basis * x).iter());
        }
        LatentCode::new(frames, self.dim(), mean, vec![self.variance; frames * self.dim()])
    }
}

/// Decoder half of [`OrthoCodec`]; needs the grid to shape its output.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoDecoder {
    pub codec: OrthoCodec,
    pub grid: FrameGrid,
}

impl LatentDecoder for OrthoDecoder {
    fn decode(&self, code: &LatentCode) -> Result<FrameStack<f64>> {
        self.codec.check_pixels(self.grid)?;
        if code.dim != self.codec.dim() {
            return Err(Error::shape("latent dim does not match the codec"));
        }
        let mut out = Vec::with_capacity(code.frames * self.grid.pixels());
        for t in 0..code.frames {
            let z = DVector::from_column_slice(code.frame_mean(t));
            out.extend((self.codec.basis.transpose() * z).iter());
        }
        FrameStack::from_vec(code.frames, self.grid, out)
    }

    fn decode_vjp(&self, code: &LatentCode, grad: &FrameStack<f64>) -> Result<Vec<f64>> {
        self.codec.check_pixels(grad.grid())?;
        if grad.frames() != code.frames {
            return Err(Error::shape("gradient frames do not match the latent"));
        }
        let mut out = Vec::with_capacity(code.mean.len());
        for t in 0..code.frames {
            let g = DVector::from_column_slice(grad.frame(t));
            out.extend((&self.codec.basis * g).iter());
        }
        Ok(out)
    }
}

/// Builds the shared base halves for a grid.
pub fn ortho_base(grid: FrameGrid, dim: usize, variance: f64, seed: u64) -> Result<(Arc<dyn LatentEncoder>, Arc<dyn LatentDecoder>)> {
    let codec = OrthoCodec::random(grid.pixels(), dim, variance, seed)?;
    let decoder = OrthoDecoder {
        codec: codec.clone(),
        grid,
    };
    Ok((Arc::new(codec), Arc::new(decoder)))
}

/// Per-frame features `[log z (0 off-mask), mask, disparity, 1]`, divided
/// by the square root of their count so the vector has O(1) norm.
fn residual_features(points: &PointMap, mask: &ValidMask, disp_norm: &FrameStack<f64>, t: usize) -> DVector<f64> {
    let n = points.grid().pixels();
    let mut f = DVector::zeros(3 * n + 1);
    let base = t * n;
    for p in 0..n {
        let valid = mask.is_valid(base + p);
        let z = points.data()[base + p].z;
        f[p] = if valid && z > 0.0 { z.ln() } else { 0.0 };
        f[n + p] = mask.values().data()[base + p];
        f[2 * n + p] = disp_norm.data()[base + p];
    }
    f[3 * n] = 1.0;
    f / ((3 * n + 1) as f64).sqrt()
}

/// Linear residual encoder over [`residual_features`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyResidual {
    pub weights: DMatrix<f64>,
}

impl ToyResidual {
    /// Zero-initialized, so the composed latent starts at the base latent.
    pub fn zeros(pixels: usize, dim: usize) -> Self {
        Self {
            weights: DMatrix::zeros(dim, 3 * pixels + 1),
        }
    }

    pub fn random(pixels: usize, dim: usize, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            weights: DMatrix::from_fn(dim, 3 * pixels + 1, |_, _| std * rng.sample::<f64, _>(StandardNormal)),
        }
    }
}

impl ResidualEncoder for ToyResidual {
    fn offset(&self, points: &PointMap, mask: &ValidMask, disp_norm: &FrameStack<f64>) -> Result<Vec<f64>> {
        mask.check_shape(points, "residual encoder mask")?;
        if !disp_norm.same_shape(points) {
            return Err(Error::shape("disparity and point map differ in shape"));
        }
        if self.weights.ncols() != 3 * points.grid().pixels() + 1 {
            return Err(Error::shape("residual encoder width does not match the grid"));
        }
        let mut out = Vec::with_capacity(points.frames() * self.weights.nrows());
        for t in 0..points.frames() {
            out.extend((&self.weights * residual_features(points, mask, disp_norm, t)).iter());
        }
        Ok(out)
    }
}

/// Linear heads on the rescaled latent `ẑ = g z`: `log z = A ẑ + a`,
/// `θ = exp(c·ẑ + c0)`, `mask = sigmoid(M ẑ + m)`. The gain `g = 1/√pixels`
/// bounds `|ẑ|` by one for disparities in [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPmapDecoder {
    pub grid: FrameGrid,
    pub gain: f64,
    pub depth_w: DMatrix<f64>,
    pub depth_b: DVector<f64>,
    pub theta_w: DVector<f64>,
    pub theta_b: f64,
    pub mask_w: DMatrix<f64>,
    pub mask_b: DVector<f64>,
}

impl ToyPmapDecoder {
    /// Starts at unit depth, θ = 1 and a 0.5 mask everywhere.
    pub fn zeros(grid: FrameGrid, dim: usize) -> Self {
        let n = grid.pixels();
        Self {
            grid,
            gain: 1.0 / (n as f64).sqrt(),
            depth_w: DMatrix::zeros(n, dim),
            depth_b: DVector::zeros(n),
            theta_w: DVector::zeros(dim),
            theta_b: 0.0,
            mask_w: DMatrix::zeros(n, dim),
            mask_b: DVector::zeros(n),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl PointMapDecoder for ToyPmapDecoder {
    fn decode(&self, code: &LatentCode) -> Result<(DecoupledMap, ValidMask)> {
        if code.dim != self.depth_w.ncols() {
            return Err(Error::shape("latent dim does not match the point-map decoder"));
        }
        let n = self.grid.pixels();
        let mut log_depth = Vec::with_capacity(code.frames * n);
        let mut mask = Vec::with_capacity(code.frames * n);
        let mut theta_diag = Vec::with_capacity(code.frames);
        for t in 0..code.frames {
            let z = DVector::from_column_slice(code.frame_mean(t)) * self.gain;
            log_depth.extend((&self.depth_w * &z + &self.depth_b).iter());
            mask.extend((&self.mask_w * &z + &self.mask_b).iter().map(|&x| sigmoid(x)));
            theta_diag.push((self.theta_w.dot(&z) + self.theta_b).exp());
        }
        Ok((
            DecoupledMap {
                theta_diag,
                log_depth: FrameStack::from_vec(code.frames, self.grid, log_depth)?,
            },
            ValidMask::new(FrameStack::from_vec(code.frames, self.grid, mask)?)?,
        ))
    }
}

/// One ground-truth clip prepared for training: sequence-normalized point
/// map, its decoupled encoding, derived normals and normalized disparity.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingClip {
    pub points: PointMap,
    pub mask: ValidMask,
    pub decoupled: DecoupledMap,
    pub normals: NormalMap,
    pub disp_norm: FrameStack<f64>,
}

impl TrainingClip {
    pub fn from_points(points: &PointMap, mask: &ValidMask) -> Result<Self> {
        let (points, _) = normalize_sequence(points, mask)?;
        let (decoupled, _) = encode_decoupled(&points, mask)?;
        let normals = derive_normals(&points, mask)?;
        let disp_norm = normalized_disparity_of(&points, mask)?.values;
        Ok(Self {
            points,
            mask: mask.clone(),
            decoupled,
            normals,
            disp_norm,
        })
    }
}

pub type ToyBundle = CodecBundle<ToyResidual, ToyPmapDecoder>;

/// Zero-initialized toy bundle around a fresh orthogonal base codec.
pub fn toy_bundle(grid: FrameGrid, dim: usize, seed: u64) -> Result<ToyBundle> {
    let (enc, dec) = ortho_base(grid, dim, 1e-2, seed)?;
    Ok(CodecBundle::new(
        enc,
        dec,
        ToyResidual::zeros(grid.pixels(), dim),
        ToyPmapDecoder::zeros(grid, dim),
    ))
}

/// Gradients of `L_VAE` with respect to every trainable toy parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyGradients {
    pub residual: DMatrix<f64>,
    pub depth_w: DMatrix<f64>,
    pub depth_b: DVector<f64>,
    pub theta_w: DVector<f64>,
    pub theta_b: f64,
    pub mask_w: DMatrix<f64>,
    pub mask_b: DVector<f64>,
}

/// Forward pass through the bundle and `L_VAE` on one clip, with the
/// gradients chained back to the toy parameters.
pub fn toy_loss(bundle: &ToyBundle, clip: &TrainingClip, weights: &LossWeights) -> Result<(LossReport, ToyGradients)> {
    let code = bundle.encode(&clip.points, &clip.mask, &clip.disp_norm)?;
    let decoded = bundle.base_decoder().decode(&code)?;
    let (pred, pred_mask) = bundle.pmap_decoder.decode(&code)?;
    let report = loss_vae(
        &VaeLossInputs {
            pred: &pred,
            pred_mask: &pred_mask,
            gt: &clip.decoupled,
            gt_mask: &clip.mask,
            gt_normals: &clip.normals,
            disp_norm: &clip.disp_norm,
            decoded_disp: &decoded,
        },
        weights,
    )?;
    let VaeGradients {
        log_depth: g_ld,
        theta_diag: g_theta,
        mask: g_mask,
        decoded_disp: g_dec,
    } = report.gradients.clone().expect("loss_vae returns gradients");

    let dec = &bundle.pmap_decoder;
    let n = dec.grid.pixels();
    let dim = code.dim;
    let mut grads = ToyGradients {
        residual: DMatrix::zeros(bundle.residual_encoder.weights.nrows(), bundle.residual_encoder.weights.ncols()),
        depth_w: DMatrix::zeros(n, dim),
        depth_b: DVector::zeros(n),
        theta_w: DVector::zeros(dim),
        theta_b: 0.0,
        mask_w: DMatrix::zeros(n, dim),
        mask_b: DVector::zeros(n),
    };
    let g_latent_dec = bundle.base_decoder().decode_vjp(&code, &g_dec)?;
    for t in 0..code.frames {
        let z = DVector::from_column_slice(code.frame_mean(t)) * dec.gain;
        let gl = DVector::from_column_slice(g_ld.frame(t));
        let gm = DVector::from_iterator(
            n,
            g_mask
                .frame(t)
                .iter()
                .zip(pred_mask.values().frame(t))
                .map(|(g, m)| g * m * (1.0 - m)),
        );
        let gth = g_theta[t] * pred.theta_diag[t];

        grads.depth_w += &gl * z.transpose();
        grads.depth_b += &gl;
        grads.theta_w += &z * gth;
        grads.theta_b += gth;
        grads.mask_w += &gm * z.transpose();
        grads.mask_b += &gm;

        let mut gz = (dec.depth_w.transpose() * &gl + &dec.theta_w * gth + dec.mask_w.transpose() * &gm) * dec.gain;
        gz += DVector::from_column_slice(&g_latent_dec[t * dim..(t + 1) * dim]);
        let feats = residual_features(&clip.points, &clip.mask, &clip.disp_norm, t);
        grads.residual += (gz * bundle.offset_scale) * feats.transpose();
    }
    Ok((report, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyFitConfig {
    pub steps: usize,
    pub seed: u64,
    pub learning_rate: f64,
    /// Extra factor on the learning rate of per-pixel head parameters.
    pub pixel_rate: f64,
    /// Factor on the learning rate of the field-of-view head.
    pub theta_rate: f64,
    pub weights: LossWeights,
}

impl Default for ToyFitConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            seed: 0,
            learning_rate: 0.5,
            pixel_rate: 1.0,
            theta_rate: 0.01,
            weights: LossWeights::default(),
        }
    }
}

/// Loss above which a toy run is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    LossReport {
        recon: avg(|r| r.recon),
        multiscale: avg(|r| r.multiscale),
        normal: avg(|r| r.normal),
        identity: avg(|r| r.identity),
        mask: avg(|r| r.mask),
        pmap: avg(|r| r.pmap),
        total: avg(|r| r.total),
        gradients: None,
    }
}

/// Dataset-mean loss report of a bundle, without gradients.
pub fn evaluate_toy(bundle: &ToyBundle, data: &[TrainingClip], weights: &LossWeights) -> Result<LossReport> {
    let reports = data
        .iter()
        .map(|c| toy_loss(bundle, c, weights).map(|(r, _)| r))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_report(&reports))
}

/// Stochastic gradient descent on `L_VAE` over the residual encoder and the
/// point-map decoder, one seeded clip per step; the base codec stays frozen.
/// Parameter groups may scale the learning rate (`pixel_rate` for the
/// per-pixel head rows and biases, `theta_rate` for the single
/// field-of-view head, whose sign gradient otherwise makes it oscillate).
/// Returns the trained bundle and the
/// dataset-mean loss before the first step and after every step.
pub fn toy_fit(template: &ToyBundle, data: &[TrainingClip], config: &ToyFitConfig) -> Result<(ToyBundle, Vec<LossReport>)> {
    if data.is_empty() {
        return Err(Error::EmptyClip);
    }
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", config.learning_rate)));
    }
    config.weights.validate(template.pmap_decoder.grid)?;
    let mut bundle = template.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut curve = Vec::with_capacity(config.steps + 1);
    let check = |step: usize, r: &LossReport| {
        if !(r.total <= DIVERGENCE_LIMIT) {
            Err(Error::Divergence { step, value: r.total })
        } else {
            Ok(())
        }
    };
    let first = evaluate_toy(&bundle, data, &config.weights)?;
    check(0, &first)?;
    curve.push(first);
    let lr = config.learning_rate;
    let lr_px = lr * config.pixel_rate;
    for step in 1..=config.steps {
        let clip = &data[rng.random_range(0..data.len())];
        let (_, g) = toy_loss(&bundle, clip, &config.weights)?;
        bundle.residual_encoder.weights -= g.residual * lr;
        let dec = &mut bundle.pmap_decoder;
        dec.depth_w -= g.depth_w * lr_px;
        dec.depth_b -= g.depth_b * lr_px;
        dec.theta_w -= g.theta_w * (lr * config.theta_rate);
        dec.theta_b -= g.theta_b * (lr * config.theta_rate);
        dec.mask_w -= g.mask_w * lr_px;
        dec.mask_b -= g.mask_b * lr_px;
        let report = match evaluate_toy(&bundle, data, &config.weights) {
            Ok(r) => r,
            // a blown-up head shows up as an invalid field of view or as
            // degenerate geometry with no defined normals
            Err(Error::InvalidFov(v)) => return Err(Error::Divergence { step, value: v }),
            Err(Error::EmptyMask) => return Err(Error::Divergence { step, value: f64::NAN }),
            Err(e) => return Err(e),
        };
        check(step, &report)?;
        curve.push(report);
    }
    Ok((bundle, curve))
}

/// Training clips cut from a rendered orbit around the synthetic room.
pub fn toy_dataset(grid: FrameGrid, clips: usize, frames_per_clip: usize, focal: f64) -> Result<Vec<TrainingClip>> {
    let total = clips * frames_per_clip;
    let spec = crate::synth::SceneSpec::orbit_room(grid, total, focal, 0)?;
    let r = crate::synth::render(&spec)?;
    let n = grid.pixels();
    (0..clips)
        .map(|c| {
            let range = c * frames_per_clip * n..(c + 1) * frames_per_clip * n;
            let pts = FrameStack::from_vec(frames_per_clip, grid, r.points.data()[range.clone()].to_vec())?;
            let mask = ValidMask::new(FrameStack::from_vec(
                frames_per_clip,
                grid,
                r.mask.values().data()[range].to_vec(),
            )?)?;
            TrainingClip::from_points(&pts, &mask)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ToyFitConfig {
        ToyFitConfig {
            weights: LossWeights {
                ms_scales: vec![1, 2, 4],
                ..LossWeights::default()
            },
            ..ToyFitConfig::default()
        }
    }

    fn setup() -> (ToyBundle, Vec<TrainingClip>) {
        let grid = FrameGrid::new(8, 8).unwrap();
        (toy_bundle(grid, 6, 1).unwrap(), toy_dataset(grid, 2, 2, 7.0).unwrap())
    }

    #[test]
    fn zero_residual_is_bit_identical() {
        let (bundle, data) = setup();
        let c = &data[0];
        let mut disp = c.disp_norm.clone();
        disp.data_mut()[0] = -0.0;
        let base = bundle.base_encoder().encode(&disp).unwrap();
        let composed = bundle.encode(&c.points, &c.mask, &disp).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&composed.mean), bits(&base.mean));
        assert_eq!(bits(&composed.variance), bits(&base.variance));
    }

    #[test]
    fn variance_passes_through() {
        let (mut bundle, data) = setup();
        bundle.residual_encoder = ToyResidual::random(64, 6, 0.3, 9);
        let c = &data[1];
        let base = bundle.base_encoder().encode(&c.disp_norm).unwrap();
        let composed = bundle.encode(&c.points, &c.mask, &c.disp_norm).unwrap();
        assert_eq!(composed.variance, base.variance);
        assert_ne!(composed.mean, base.mean);
    }

    #[test]
    fn offset_shape_mismatch() {
        let base = LatentCode::new(1, 2, vec![0.0; 2], vec![1.0; 2]).unwrap();
        assert!(matches!(compose(base, &[1.0; 3], 0.1), Err(Error::Shape(_))));
        assert!(LatentCode::new(1, 2, vec![0.0; 2], vec![-1.0, 1.0]).is_err());
    }

    #[test]
    fn probe_matches_codec_reconstruction() {
        let (bundle, data) = setup();
        let c = &data[0];
        let probe = bundle.identity_probe(&c.points, &c.mask, &c.disp_norm).unwrap();
        // independent: x − BᵀBx through dense algebra
        let b = match OrthoCodec::random(64, 6, 1e-2, 1) {
            Ok(codec) => codec.basis().clone(),
            Err(e) => panic!("{e}"),
        };
        let mut sq = 0.0;
        for t in 0..c.disp_norm.frames() {
            let x = DVector::from_column_slice(c.disp_norm.frame(t));
            sq += (b.transpose() * (&b * &x) - &x).norm_squared();
        }
        let mse = sq / c.disp_norm.len() as f64;
        assert!((probe - mse).abs() < 1e-12, "{probe} vs {mse}");
        assert!(probe > 0.0);
    }

    #[test]
    fn lossless_codec_probe_is_zero() {
        let grid = FrameGrid::new(4, 4).unwrap();
        let bundle = toy_bundle(grid, 16, 3).unwrap();
        let disp = FrameStack::from_fn(2, grid, |t, v, u| ((t + v * u) as f64 * 0.37).sin());
        let pts = FrameStack::filled(2, grid, nalgebra::Vector3::new(0.0, 0.0, 1.0));
        let mask = ValidMask::all_valid(2, grid);
        assert!(bundle.identity_probe(&pts, &mask, &disp).unwrap() < 1e-28);
    }

    #[test]
    fn probe_monotone_in_offset_scale() {
        let (mut bundle, data) = setup();
        bundle.residual_encoder = ToyResidual::random(64, 6, 0.2, 4);
        let c = &data[0];
        let mut last = -1.0;
        for k in 0..=20 {
            bundle.offset_scale = 0.05 * k as f64;
            let p = bundle.identity_probe(&c.points, &c.mask, &c.disp_norm).unwrap();
            assert!(p >= last - 1e-15);
            last = p;
        }
    }

    #[test]
    fn chained_gradients_match_finite_differences() {
        let (mut bundle, data) = setup();
        bundle.residual_encoder = ToyResidual::random(64, 6, 0.05, 5);
        bundle.pmap_decoder.depth_w = DMatrix::from_fn(64, 6, |i, j| 0.01 * ((i * 7 + j) as f64).sin());
        bundle.pmap_decoder.theta_w = DVector::from_fn(6, |j, _| 0.02 * (j as f64 - 2.0));
        bundle.pmap_decoder.mask_w = DMatrix::from_fn(64, 6, |i, j| 0.03 * ((i + 3 * j) as f64).cos());
        let weights = LossWeights {
            ms_scales: vec![1, 2],
            ..LossWeights::default()
        };
        let clip = &data[0];
        let (_, g) = toy_loss(&bundle, clip, &weights).unwrap();
        let h = 1e-6;
        let total = |b: &ToyBundle| toy_loss(b, clip, &weights).unwrap().0.total;
        let fd = |edit: &dyn Fn(&mut ToyBundle, f64)| {
            let mut p = bundle.clone();
            edit(&mut p, h);
            let mut m = bundle.clone();
            edit(&mut m, -h);
            (total(&p) - total(&m)) / (2.0 * h)
        };
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
        let checks: Vec<(f64, f64)> = vec![
            (g.theta_b, fd(&|b, d| b.pmap_decoder.theta_b += d)),
            (g.theta_w[2], fd(&|b, d| b.pmap_decoder.theta_w[2] += d)),
            (g.depth_b[20], fd(&|b, d| b.pmap_decoder.depth_b[20] += d)),
            (g.depth_w[(33, 4)], fd(&|b, d| b.pmap_decoder.depth_w[(33, 4)] += d)),
            (g.mask_b[5], fd(&|b, d| b.pmap_decoder.mask_b[5] += d)),
            (g.mask_w[(40, 1)], fd(&|b, d| b.pmap_decoder.mask_w[(40, 1)] += d)),
            (g.residual[(3, 10)], fd(&|b, d| b.residual_encoder.weights[(3, 10)] += d)),
            (g.residual[(0, 150)], fd(&|b, d| b.residual_encoder.weights[(0, 150)] += d)),
            (g.residual[(5, 192)], fd(&|b, d| b.residual_encoder.weights[(5, 192)] += d)),
        ];
        for (k, (a, n)) in checks.into_iter().enumerate() {
            assert!(rel(a, n) < 1e-5, "check {k}: analytic {a} numeric {n}");
        }
    }

    #[test]
    fn zero_steps_and_determinism() {
        let (bundle, data) = setup();
        let cfg = ToyFitConfig {
            steps: 0,
            ..small_cfg()
        };
        let (same, curve) = toy_fit(&bundle, &data, &cfg).unwrap();
        assert_eq!(curve.len(), 1);
        assert_eq!(same.residual_encoder, bundle.residual_encoder);
        assert_eq!(same.pmap_decoder, bundle.pmap_decoder);
        let cfg = ToyFitConfig {
            steps: 5,
            seed: 11,
            ..small_cfg()
        };
        let (_, a) = toy_fit(&bundle, &data, &cfg).unwrap();
        let (_, b) = toy_fit(&bundle, &data, &cfg).unwrap();
        let bits = |c: &[LossReport]| c.iter().map(|r| r.total.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.len(), 6);
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let (bundle, data) = setup();
        let cfg = ToyFitConfig {
            steps: 50,
            learning_rate: 1e4,
            ..small_cfg()
        };
        assert!(matches!(toy_fit(&bundle, &data, &cfg), Err(Error::Divergence { .. })));
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Log-normal noise-level distribution and loss weighting for diffusion
/// training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub p_mean: f64,
    pub p_std: f64,
    pub sigma_data: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            p_mean: 0.7,
            p_std: 1.6,
            sigma_data: 0.5,
        }
    }
}

impl NoiseSchedule {
    pub fn new(p_mean: f64, p_std: f64, sigma_data: f64) -> Result<Self> {
        if !(p_std > 0.0 && sigma_data > 0.0 && p_mean.is_finite()) {
            return Err(Error::Config(format!(
                "noise schedule needs p_std > 0 and sigma_data > 0 (got {p_std}, {sigma_data})"
            )));
        }
        Ok(Self {
            p_mean,
            p_std,
            sigma_data,
        })
    }
}

/// Draws `count` noise levels with `ln σ ~ N(p_mean, p_std)`.
pub fn sample_sigma(schedule: &NoiseSchedule, seed: u64, count: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(schedule.p_mean, schedule.p_std).expect("validated schedule");
    (0..count).map(|_| normal.sample(&mut rng).exp()).collect()
}

/// `λ(σ) = (σ² + σ_data²) / (σ σ_data)²`.
pub fn edm_weight(sigma: f64, schedule: &NoiseSchedule) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidSigma(sigma));
    }
    let sd = schedule.sigma_data;
    Ok((sigma * sigma + sd * sd) / (sigma * sd).powi(2))
}

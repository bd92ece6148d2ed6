//! FedAvg over canonical parameter vectors and client-side update privatization.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Platform;

/// One client's trained parameters for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: String,
    pub round: u64,
    pub params: Vec<f64>,
    pub num_examples: u64,
    pub platform: Platform,
}

/// Client-side Gaussian DP settings for model updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DPConfig {
    pub enabled: bool,
    pub clip_norm: f64,
    pub epsilon: f64,
    pub delta: f64,
    #[serde(default)]
    pub sigma_override: Option<f64>,
}

impl DPConfig {
    pub fn disabled() -> Self {
        DPConfig {
            enabled: false,
            clip_norm: 1.0,
            epsilon: 1.0,
            delta: 1e-5,
            sigma_override: None,
        }
    }

    pub fn gaussian(clip_norm: f64, epsilon: f64, delta: f64) -> Self {
        DPConfig {
            enabled: true,
            clip_norm,
            epsilon,
            delta,
            sigma_override: None,
        }
    }

    pub fn validate(&self) -> Result<(), AggregationError> {
        if !self.enabled {
            return Ok(());
        }
        if !(self.clip_norm > 0.0) {
            return Err(AggregationError::InvalidBudget(format!(
                "clip_norm {} must be > 0",
                self.clip_norm
            )));
        }
        if let Some(s) = self.sigma_override {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(AggregationError::InvalidBudget(format!(
                    "sigma_override {s} must be >= 0"
                )));
            }
            return Ok(());
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(AggregationError::InvalidBudget(format!(
                "epsilon {} must be > 0",
                self.epsilon
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(AggregationError::InvalidBudget(format!(
                "delta {} must lie in (0, 1)",
                self.delta
            )));
        }
        Ok(())
    }
}

impl Default for DPConfig {
    fn default() -> Self {
        Self::disabled()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AggregationError {
    #[error("no updates to aggregate")]
    EmptyUpdateSet,
    #[error("parameter length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("updates from rounds {0} and {1} cannot be mixed")]
    MixedRounds(u64, u64),
    #[error("client {0:?} contributed more than one update")]
    DuplicateClient(String),
    #[error("update from {0:?} has num_examples = 0")]
    ZeroWeight(String),
    #[error("invalid DP budget: {0}")]
    InvalidBudget(String),
}

/// Example-weighted coordinate mean. Updates are summed in ascending
/// `client_id` order so the result does not depend on arrival order.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<Vec<f64>, AggregationError> {
    let first = updates.first().ok_or(AggregationError::EmptyUpdateSet)?;
    let dim = first.params.len();
    for u in updates {
        if u.round != first.round {
            return Err(AggregationError::MixedRounds(first.round, u.round));
        }
        if u.params.len() != dim {
            return Err(AggregationError::LengthMismatch {
                expected: dim,
                actual: u.params.len(),
            });
        }
        if u.num_examples == 0 {
            return Err(AggregationError::ZeroWeight(u.client_id.clone()));
        }
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    if let Some(w) = sorted.windows(2).find(|w| w[0].client_id == w[1].client_id) {
        return Err(AggregationError::DuplicateClient(w[0].client_id.clone()));
    }

    let total: f64 = sorted.iter().map(|u| u.num_examples as f64).sum();
    let mut acc = vec![0.0; dim];
    for u in &sorted {
        let w = u.num_examples as f64;
        for (a, p) in acc.iter_mut().zip(&u.params) {
            *a += w * p;
        }
    }
    for a in &mut acc {
        *a /= total;
    }
    Ok(acc)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `delta` down to L2 norm `clip_norm` when it is longer.
pub fn clip_l2(delta: &[f64], clip_norm: f64) -> Vec<f64> {
    let norm = l2_norm(delta);
    if norm <= clip_norm || norm == 0.0 {
        return delta.to_vec();
    }
    let scale = clip_norm / norm;
    delta.iter().map(|x| x * scale).collect()
}

/// Noise scale of the classic Gaussian mechanism, `C * sqrt(2 ln(1.25/delta)) / epsilon`,
/// unless `sigma_override` is set.
pub fn gaussian_sigma(dp: &DPConfig) -> Result<f64, AggregationError> {
    if !dp.enabled {
        return Err(AggregationError::InvalidBudget("DP is disabled".into()));
    }
    dp.validate()?;
    if let Some(s) = dp.sigma_override {
        return Ok(s);
    }
    Ok(dp.clip_norm * (2.0 * (1.25 / dp.delta).ln()).sqrt() / dp.epsilon)
}

/// Clips the local update delta and adds Gaussian noise before upload.
///
/// Returns `base + clip(trained - base) + N(0, sigma^2)` per coordinate. When no
/// clipping occurs the result is formed as `trained + noise`, so a zero-noise,
/// unclipped pipeline returns `trained` bit-for-bit.
pub fn privatize_update<R: Rng + ?Sized>(
    base: &[f64],
    trained: &[f64],
    dp: &DPConfig,
    rng: &mut R,
) -> Result<Vec<f64>, AggregationError> {
    if base.len() != trained.len() {
        return Err(AggregationError::LengthMismatch {
            expected: base.len(),
            actual: trained.len(),
        });
    }
    if !dp.enabled {
        return Ok(trained.to_vec());
    }
    let sigma = gaussian_sigma(dp)?;
    let delta: Vec<f64> = trained.iter().zip(base).map(|(t, b)| t - b).collect();
    let norm = l2_norm(&delta);
    let mut out = if norm <= dp.clip_norm {
        trained.to_vec()
    } else {
        let scale = dp.clip_norm / norm;
        base.iter()
            .zip(&delta)
            .map(|(b, d)| b + d * scale)
            .collect()
    };
    if sigma > 0.0 {
        let normal =
            Normal::new(0.0, sigma).map_err(|e| AggregationError::InvalidBudget(e.to_string()))?;
        for x in &mut out {
            *x += normal.sample(rng);
        }
    }
    Ok(out)
}

//! Gradient release under the Gaussian mechanism: clip to `clip_norm`, add
//! `N(0, (σC)²)` per coordinate, report a naively composed ε.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DpError {
    #[error("invalid DP configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub delta: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig { clip_norm: 1.0, noise_multiplier: 1.1, delta: 1e-5 }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<(), DpError> {
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(DpError::InvalidConfig("clip_norm must be positive".into()));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(DpError::InvalidConfig("noise_multiplier must be nonnegative".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(DpError::InvalidConfig("delta must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Standard deviation of the per-coordinate noise, `σ·C`.
    pub fn noise_std(&self) -> f64 {
        self.noise_multiplier * self.clip_norm
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `grad` down to norm `clip_norm` if it is longer.
pub fn clip(grad: &[f64], clip_norm: f64) -> Vec<f64> {
    let norm = l2_norm(grad);
    if norm <= clip_norm {
        grad.to_vec()
    } else {
        let s = clip_norm / norm;
        grad.iter().map(|x| x * s).collect()
    }
}

/// `clip(grad, C) + z`, `z_i ~ N(0, (σC)²)`. With σ = 0 this is exactly `clip`.
pub fn privatize<R: Rng>(grad: &[f64], cfg: &DpConfig, rng: &mut R) -> Vec<f64> {
    let mut out = clip(grad, cfg.clip_norm);
    let std = cfg.noise_std();
    if std > 0.0 {
        let normal = Normal::new(0.0, std).expect("finite std");
        for x in &mut out {
            *x += normal.sample(rng);
        }
    }
    out
}

/// Gaussian-mechanism ε for one release at unit sensitivity.
pub fn epsilon_per_round(cfg: &DpConfig) -> f64 {
    if cfg.noise_multiplier == 0.0 {
        return f64::INFINITY;
    }
    (2.0 * (1.25 / cfg.delta).ln()).sqrt() / cfg.noise_multiplier
}

/// Loose upper bound after `rounds` releases, composed linearly.
/// Infinite when σ = 0 (no guarantee).
pub fn epsilon_report(cfg: &DpConfig, rounds: usize) -> f64 {
    epsilon_per_round(cfg) * rounds as f64
}

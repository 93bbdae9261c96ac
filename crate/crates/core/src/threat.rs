//! Poisoning clients and the robust aggregation rules that resist them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dp::l2_norm;
use crate::graph::Graph;
use crate::rng::derive_seed;

#[derive(Debug, Error, PartialEq)]
pub enum ThreatError {
    #[error("trim_k = {trim_k} needs more than {} clients, got {clients}", 2 * trim_k)]
    TooFewClients { trim_k: usize, clients: usize },
    #[error("update length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("weights and updates differ in count")]
    WeightCount,
    #[error("no updates")]
    Empty,
    #[error("invalid attack: {0}")]
    InvalidAttack(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    LabelFlip,
    #[default]
    GradScale,
    GradSign,
    GaussBlast,
}

impl std::str::FromStr for AttackKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "label_flip" => Ok(AttackKind::LabelFlip),
            "grad_scale" => Ok(AttackKind::GradScale),
            "grad_sign" => Ok(AttackKind::GradSign),
            "gauss_blast" => Ok(AttackKind::GaussBlast),
            other => Err(format!("unknown attack kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSpec {
    pub malicious_fraction: f64,
    pub kind: AttackKind,
    pub flip_fraction: f64,
    pub gamma: f64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec { malicious_fraction: 0.0, kind: AttackKind::GradScale, flip_fraction: 1.0, gamma: -10.0 }
    }
}

impl AttackSpec {
    pub fn validate(&self) -> Result<(), ThreatError> {
        if !(0.0..1.0).contains(&self.malicious_fraction) {
            return Err(ThreatError::InvalidAttack("malicious_fraction must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_fraction) {
            return Err(ThreatError::InvalidAttack("flip_fraction must lie in [0, 1]".into()));
        }
        if !self.gamma.is_finite() {
            return Err(ThreatError::InvalidAttack("gamma must be finite".into()));
        }
        Ok(())
    }

    /// The fixed malicious subset for a run: `round(fraction · K)` clients
    /// chosen by a seeded shuffle, returned sorted.
    pub fn malicious_clients(&self, num_clients: usize, seed: u64) -> Vec<usize> {
        let count = (self.malicious_fraction * num_clients as f64).round() as usize;
        let mut ids: Vec<usize> = (0..num_clients).collect();
        ids.shuffle(&mut ChaCha20Rng::seed_from_u64(derive_seed(seed, &[0xBAD])));
        let mut chosen = ids[..count.min(num_clients)].to_vec();
        chosen.sort_unstable();
        chosen
    }

    pub fn poisons_gradient(&self) -> bool {
        !matches!(self.kind, AttackKind::LabelFlip)
    }
}

/// Flips `ceil(flip_fraction · |train|)` seeded train labels to `(y + 1) mod k`.
/// Test labels are never touched.
pub fn apply_label_flip(g: &Graph, spec: &AttackSpec, seed: u64) -> Graph {
    let mut train = g.train_nodes();
    let count = ((spec.flip_fraction * train.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    train.shuffle(&mut ChaCha20Rng::seed_from_u64(derive_seed(seed, &[0xF11B])));
    let k = g.num_classes();
    let mut labels = g.labels().to_vec();
    for &v in &train[..count.min(train.len())] {
        labels[v] = (labels[v] + 1) % k;
    }
    g.clone().with_labels(labels).expect("labels stay in range")
}

/// Rewrites an outgoing update according to the attack kind. Label flipping
/// acts on data, so its updates pass through unchanged.
pub fn poison_gradient<R: Rng>(update: &[f64], spec: &AttackSpec, rng: &mut R) -> Vec<f64> {
    match spec.kind {
        AttackKind::LabelFlip => update.to_vec(),
        AttackKind::GradScale => update.iter().map(|x| spec.gamma * x).collect(),
        AttackKind::GradSign => update.iter().map(|x| -x).collect(),
        AttackKind::GaussBlast => {
            let mean_abs = update.iter().map(|x| x.abs()).sum::<f64>() / update.len().max(1) as f64;
            let std = 10.0 * mean_abs;
            if std == 0.0 || !std.is_finite() {
                return update.to_vec();
            }
            let normal = Normal::new(0.0, std).unwrap();
            update.iter().map(|x| x + normal.sample(rng)).collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RobustMode {
    #[default]
    Off,
    TrimmedMean,
    NormFilter,
}

impl std::str::FromStr for RobustMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "off" => Ok(RobustMode::Off),
            "trimmed_mean" => Ok(RobustMode::TrimmedMean),
            "norm_filter" => Ok(RobustMode::NormFilter),
            other => Err(format!("unknown robust mode {other:?} (off | trimmed_mean | norm_filter)")),
        }
    }
}

impl RobustMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RobustMode::Off => "off",
            RobustMode::TrimmedMean => "trimmed_mean",
            RobustMode::NormFilter => "norm_filter",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustOutcome {
    pub aggregate: Vec<f64>,
    /// Positions (in input order) discarded by the filter.
    pub excluded: Vec<usize>,
    /// Set when every client was filtered and a zero update was substituted.
    pub fell_back: bool,
}

/// `Σ wᵢ gᵢ / Σ wᵢ`.
pub fn weighted_mean(updates: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>, ThreatError> {
    let len = check_shapes(updates, weights)?;
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; len];
    for (u, &w) in updates.iter().zip(weights) {
        out.iter_mut().zip(u).for_each(|(o, x)| *o += w * x);
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(out)
}

fn check_shapes(updates: &[Vec<f64>], weights: &[f64]) -> Result<usize, ThreatError> {
    let len = updates.first().ok_or(ThreatError::Empty)?.len();
    if weights.len() != updates.len() {
        return Err(ThreatError::WeightCount);
    }
    if let Some(u) = updates.iter().find(|u| u.len() != len) {
        return Err(ThreatError::LengthMismatch { expected: len, got: u.len() });
    }
    Ok(len)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Coordinate-wise trimmed mean (unweighted) or median-norm filtering
/// (weighted mean of clients with `‖g‖ ≤ 3·median`).
pub fn robust_aggregate(
    updates: &[Vec<f64>],
    weights: &[f64],
    mode: RobustMode,
    trim_k: usize,
) -> Result<RobustOutcome, ThreatError> {
    let len = check_shapes(updates, weights)?;
    let k = updates.len();
    match mode {
        RobustMode::Off => Ok(RobustOutcome {
            aggregate: weighted_mean(updates, weights)?,
            excluded: vec![],
            fell_back: false,
        }),
        RobustMode::TrimmedMean => {
            if 2 * trim_k >= k {
                return Err(ThreatError::TooFewClients { trim_k, clients: k });
            }
            let mut column = vec![0.0; k];
            let aggregate = (0..len)
                .map(|j| {
                    for (c, u) in column.iter_mut().zip(updates) {
                        *c = u[j];
                    }
                    column.sort_by(f64::total_cmp);
                    let kept = &column[trim_k..k - trim_k];
                    kept.iter().sum::<f64>() / kept.len() as f64
                })
                .collect();
            Ok(RobustOutcome { aggregate, excluded: vec![], fell_back: false })
        }
        RobustMode::NormFilter => {
            let norms: Vec<f64> = updates.iter().map(|u| l2_norm(u)).collect();
            let cutoff = 3.0 * median(norms.clone());
            let (keep, excluded): (Vec<usize>, Vec<usize>) = (0..k).partition(|&i| norms[i] <= cutoff);
            if keep.is_empty() {
                return Ok(RobustOutcome { aggregate: vec![0.0; len], excluded, fell_back: true });
            }
            let kept: Vec<Vec<f64>> = keep.iter().map(|&i| updates[i].clone()).collect();
            let kept_w: Vec<f64> = keep.iter().map(|&i| weights[i]).collect();
            Ok(RobustOutcome { aggregate: weighted_mean(&kept, &kept_w)?, excluded, fell_back: false })
        }
    }
}

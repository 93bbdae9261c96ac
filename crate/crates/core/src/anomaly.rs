//! Suspicious-node detection from model embeddings: each node is scored by
//! how far it sits from the mean of its neighbors, then thresholded.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Graph;

#[derive(Debug, Error, PartialEq)]
pub enum AnomalyError {
    #[error("cosine distance is undefined for a zero vector")]
    ZeroVector,
    #[error("node {0} has no neighbors")]
    Isolated(usize),
    #[error("embedding rows ({rows}) differ from node count ({nodes})")]
    Shape { rows: usize, nodes: usize },
}

/// `1 − cos(h_u, h_v)`, in `[0, 2]`.
pub fn cosine_distance(h_u: ArrayView1<f64>, h_v: ArrayView1<f64>) -> Result<f64, AnomalyError> {
    let nu = h_u.dot(&h_u).sqrt();
    let nv = h_v.dot(&h_v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(AnomalyError::ZeroVector);
    }
    Ok((1.0 - h_u.dot(&h_v) / (nu * nv)).clamp(0.0, 2.0))
}

/// Mean embedding of `v`'s neighbors, self excluded.
pub fn neighborhood_mean(embeddings: &Array2<f64>, g: &Graph, v: usize) -> Result<Array1<f64>, AnomalyError> {
    let adj = g.adj(v);
    if adj.is_empty() {
        return Err(AnomalyError::Isolated(v));
    }
    let mut mean = Array1::zeros(embeddings.ncols());
    for &u in adj {
        mean += &embeddings.row(u);
    }
    Ok(mean / adj.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMetric {
    /// `‖h_v − ĥ_v‖²`
    #[default]
    SquaredDistance,
    /// Cosine distance between `h_v` and `ĥ_v`.
    Cosine,
}

/// Which layer-1 quantity is used as the node embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    /// `W1 x_v`, before attention aggregation and activation.
    #[default]
    Projection,
    /// Aggregated ELU output of layer 1.
    Hidden,
}

/// Per-node deviation scores. Isolated nodes score 0, as do zero vectors
/// under the cosine metric.
pub fn anomaly_scores(embeddings: &Array2<f64>, g: &Graph) -> Result<Vec<f64>, AnomalyError> {
    anomaly_scores_with(embeddings, g, ScoreMetric::SquaredDistance)
}

pub fn anomaly_scores_with(embeddings: &Array2<f64>, g: &Graph, metric: ScoreMetric) -> Result<Vec<f64>, AnomalyError> {
    if embeddings.nrows() != g.num_nodes() {
        return Err(AnomalyError::Shape { rows: embeddings.nrows(), nodes: g.num_nodes() });
    }
    Ok((0..g.num_nodes())
        .map(|v| match neighborhood_mean(embeddings, g, v) {
            Err(_) => 0.0,
            Ok(mean) => {
                let h = embeddings.row(v);
                match metric {
                    ScoreMetric::SquaredDistance => h.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum(),
                    ScoreMetric::Cosine => cosine_distance(h, mean.view()).unwrap_or(0.0),
                }
            }
        })
        .collect())
}

/// Nodes with `score > tau`, ascending.
pub fn flag(scores: &[f64], tau: f64) -> Vec<usize> {
    (0..scores.len()).filter(|&v| scores[v] > tau).collect()
}

/// Precision and recall, with 1.0 for an empty flagged set or empty truth.
pub fn precision_recall(flagged: &[usize], truth: &[usize]) -> (f64, f64) {
    let truth_set: BTreeSet<usize> = truth.iter().copied().collect();
    let flagged_set: BTreeSet<usize> = flagged.iter().copied().collect();
    let hits = flagged_set.intersection(&truth_set).count() as f64;
    let precision = if flagged_set.is_empty() { 1.0 } else { hits / flagged_set.len() as f64 };
    let recall = if truth_set.is_empty() { 1.0 } else { hits / truth_set.len() as f64 };
    (precision, recall)
}

fn sorted(scores: &[f64]) -> Vec<f64> {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Lower-rank empirical quantile: `sorted[floor(q · (n − 1))]`.
pub fn quantile(scores: &[f64], q: f64) -> f64 {
    let s = sorted(scores);
    if s.is_empty() {
        return 0.0;
    }
    let idx = (q.clamp(0.0, 1.0) * (s.len() - 1) as f64).floor() as usize;
    s[idx]
}

/// Default threshold: with a known anomaly fraction, the score below which
/// all but the top `ceil(fraction · n)` nodes fall; otherwise mean + 2·std.
pub fn default_threshold(scores: &[f64], known_fraction: Option<f64>) -> f64 {
    let n = scores.len();
    if n == 0 {
        return 0.0;
    }
    match known_fraction {
        Some(f) => {
            let m = crate::synthgen::planted_count(n, f).min(n);
            if m == 0 {
                return sorted(scores)[n - 1];
            }
            if m == n {
                return f64::NEG_INFINITY;
            }
            sorted(scores)[n - m - 1]
        }
        None => {
            let mean = scores.iter().sum::<f64>() / n as f64;
            let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
            mean + 2.0 * var.sqrt()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OperatingPoint {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Operating points at `num_points` evenly spaced score quantiles, with
/// duplicate thresholds collapsed.
pub fn threshold_sweep(scores: &[f64], truth: &[usize], num_points: usize) -> Vec<OperatingPoint> {
    let num_points = num_points.max(2);
    let mut taus: Vec<f64> = (0..num_points)
        .map(|i| quantile(scores, i as f64 / (num_points - 1) as f64))
        .collect();
    taus.dedup();
    taus.into_iter()
        .map(|tau| {
            let (precision, recall) = precision_recall(&flag(scores, tau), truth);
            OperatingPoint { tau, precision, recall }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyReport {
    pub scores: Vec<f64>,
    pub threshold: f64,
    pub flagged: Vec<usize>,
    pub precision: f64,
    pub recall: f64,
}

impl AnomalyReport {
    pub fn new(scores: Vec<f64>, threshold: f64, truth: &[usize]) -> Self {
        let flagged = flag(&scores, threshold);
        let (precision, recall) = precision_recall(&flagged, truth);
        AnomalyReport { scores, threshold, flagged, precision, recall }
    }

    /// `node_id,score,flagged,truth` rows.
    pub fn to_csv(&self, truth: &[usize]) -> String {
        let truth: BTreeSet<usize> = truth.iter().copied().collect();
        let flagged: BTreeSet<usize> = self.flagged.iter().copied().collect();
        let mut out = String::from("node_id,score,flagged,truth\n");
        for (v, s) in self.scores.iter().enumerate() {
            out.push_str(&format!(
                "{v},{s},{},{}\n",
                flagged.contains(&v) as u8,
                truth.contains(&v) as u8
            ));
        }
        out
    }
}

pub fn pr_curve_csv(points: &[OperatingPoint]) -> String {
    let mut out = String::from("tau,precision,recall\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.tau, p.precision, p.recall));
    }
    out
}

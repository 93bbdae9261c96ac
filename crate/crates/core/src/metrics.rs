//! Evaluation and accounting: accuracy, pooled loss, communication cost,
//! protection overhead and wall-time scaling fits.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::Serialize;
use thiserror::Error;

use crate::gat::predict;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("accuracy mask selects no nodes")]
    EmptyMask,
    #[error("{what}: expected {expected}, got {got}")]
    Length { what: &'static str, expected: usize, got: usize },
    #[error("need at least {need} points for a fit, got {got}")]
    TooFewPoints { need: usize, got: usize },
}

/// Telemetry for one communication round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub train_loss_avg: f64,
    pub test_accuracy: f64,
    /// Uplink bytes: every UPDATE frame, headers included.
    pub bytes_up: u64,
    /// Downlink bytes: GLOBAL_MODEL and ROUND_DONE frames.
    pub bytes_down: u64,
    /// `K · size(update payload)`, uplink only.
    pub comm_cost: u64,
    pub wall_ms: f64,
    pub epsilon: f64,
    pub backend: String,
    pub notes: String,
}

/// Header of `metrics.csv`. Wall time is kept out so that reruns are
/// byte-identical; it goes to `timing.csv` instead.
pub const METRICS_HEADER: &str =
    "round,train_loss_avg,test_accuracy,bytes_up,bytes_down,comm_cost,epsilon,backend,notes";

fn fmt_real(x: f64) -> String {
    if x.is_infinite() && x > 0.0 {
        "inf".into()
    } else {
        format!("{x}")
    }
}

impl RoundRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.round,
            fmt_real(self.train_loss_avg),
            fmt_real(self.test_accuracy),
            self.bytes_up,
            self.bytes_down,
            self.comm_cost,
            fmt_real(self.epsilon),
            self.backend,
            self.notes.replace([',', '\n'], ";")
        )
    }

    pub fn timing_row(&self) -> String {
        format!("{},{:.3}", self.round, self.wall_ms)
    }
}

pub fn metrics_csv(records: &[RoundRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Fraction of `mask` nodes whose argmax logit equals the label. Ties go to
/// the lower class index.
pub fn accuracy(logits: &Array2<f64>, labels: &[usize], mask: &[usize]) -> Result<f64, MetricsError> {
    let (hits, total) = accuracy_counts(logits, labels, mask)?;
    Ok(hits as f64 / total as f64)
}

/// `(correct, total)` over `mask`, for pooling across clients.
pub fn accuracy_counts(logits: &Array2<f64>, labels: &[usize], mask: &[usize]) -> Result<(usize, usize), MetricsError> {
    if mask.is_empty() {
        return Err(MetricsError::EmptyMask);
    }
    if labels.len() != logits.nrows() {
        return Err(MetricsError::Length { what: "labels", expected: logits.nrows(), got: labels.len() });
    }
    let pred = predict(logits);
    Ok((mask.iter().filter(|&&v| pred[v] == labels[v]).count(), mask.len()))
}

/// Node-count weighted mean of per-client mean losses.
pub fn global_avg_loss(per_client: &[(f64, usize)]) -> f64 {
    let total: usize = per_client.iter().map(|&(_, n)| n).sum();
    if total == 0 {
        return 0.0;
    }
    per_client.iter().map(|&(l, n)| l * n as f64).sum::<f64>() / total as f64
}

/// Uplink cost of one round from the measured serialized update sizes,
/// i.e. `K · size` when every client sends the same number of bytes.
pub fn comm_cost(update_sizes: &[u64]) -> u64 {
    update_sizes.iter().sum()
}

/// `protected / plain − 1`.
pub fn overhead_ratio(protected_bytes: u64, plain_bytes: u64) -> f64 {
    protected_bytes as f64 / plain_bytes as f64 - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn linear_fit(points: &[(f64, f64)]) -> Result<LinearFit, MetricsError> {
    if points.len() < 2 {
        return Err(MetricsError::TooFewPoints { need: 2, got: points.len() });
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(LinearFit { slope, intercept, r_squared })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingPoint {
    pub num_nodes: usize,
    pub wall_ms: f64,
    pub final_accuracy: f64,
}

pub fn scaling_csv(points: &[ScalingPoint], fit: Option<&LinearFit>) -> String {
    let mut out = String::from("num_nodes,wall_ms,final_accuracy\n");
    for p in points {
        let _ = writeln!(out, "{},{:.3},{}", p.num_nodes, p.wall_ms, p.final_accuracy);
    }
    if let Some(f) = fit {
        let _ = writeln!(out, "# slope_ms_per_node={} intercept_ms={} r_squared={}", f.slope, f.intercept, f.r_squared);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gat::{node_losses, ModelParams, GatHyper, model_forward};
    use crate::graph::build_graph;
    use crate::synthgen::{generate_client_graph, GenSpec};
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn accuracy_examples() {
        let logits = array![[2.0, 1.0], [0.0, 3.0]];
        assert_eq!(accuracy(&logits, &[0, 1], &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&logits, &[1, 0], &[0, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&logits, &[0, 0], &[0, 1]).unwrap(), 0.5);
        assert_eq!(accuracy(&logits, &[0, 0], &[]), Err(MetricsError::EmptyMask));
        // tie resolves to class 0
        assert_eq!(accuracy(&array![[1.0, 1.0]], &[0], &[0]).unwrap(), 1.0);
    }

    #[test]
    fn global_loss_examples() {
        assert!((global_avg_loss(&[(0.7, 5), (0.7, 9)]) - 0.7).abs() < 1e-15);
        assert_eq!(global_avg_loss(&[(1.0, 100), (3.0, 300)]), 2.5);
    }

    #[test]
    fn global_loss_matches_pooled_nodes() {
        let spec = GenSpec { num_nodes: 150, ..GenSpec::default() };
        let params = ModelParams::glorot(spec.feature_dim, spec.num_classes, GatHyper::default(), 5);
        let mut per_client = vec![];
        let mut pooled = vec![];
        for c in 0..3 {
            let g = generate_client_graph(&spec, c).unwrap();
            let trace = model_forward(&g, &params).unwrap();
            let client = node_losses(&trace, g.labels(), &g.train_nodes());
            per_client.push((client.iter().sum::<f64>() / client.len() as f64, client.len()));
            pooled.extend(client);
        }
        let oracle = pooled.iter().sum::<f64>() / pooled.len() as f64;
        assert!((global_avg_loss(&per_client) - oracle).abs() < 1e-12);
    }

    #[test]
    fn cost_and_overhead_examples() {
        assert_eq!(comm_cost(&[1000; 10]), 10_000);
        assert_eq!(overhead_ratio(1000, 1000), 0.0);
        assert!((overhead_ratio(1180, 1000) - 0.18).abs() < 1e-12);
    }

    #[test]
    fn linear_fit_examples() {
        let exact = linear_fit(&[(1.0, 3.0), (2.0, 5.0), (4.0, 9.0)]).unwrap();
        assert!((exact.slope - 2.0).abs() < 1e-12 && (exact.intercept - 1.0).abs() < 1e-12);
        assert!((exact.r_squared - 1.0).abs() < 1e-12);
        let flat = linear_fit(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]).unwrap();
        assert!(flat.r_squared < 1e-12);
        assert!(linear_fit(&[(1.0, 1.0)]).is_err());
    }

    #[test]
    fn csv_row_format() {
        let r = RoundRecord {
            round: 3,
            train_loss_avg: 0.5,
            test_accuracy: 0.75,
            bytes_up: 10,
            bytes_down: 20,
            comm_cost: 8,
            wall_ms: 1.5,
            epsilon: f64::INFINITY,
            backend: "plain".into(),
            notes: "a,b".into(),
        };
        assert_eq!(r.csv_row(), "3,0.5,0.75,10,20,8,inf,plain,a;b");
        assert_eq!(METRICS_HEADER.split(',').count(), r.csv_row().split(',').count());
        let g = build_graph(&[], Array2::zeros((1, 1)), vec![0]).unwrap();
        assert_eq!(g.num_nodes(), 1);
    }

    proptest! {
        #[test]
        fn pooled_loss_identity(clients in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 1..20), 1..6)) {
            let per_client: Vec<(f64, usize)> = clients.iter()
                .map(|c| (c.iter().sum::<f64>() / c.len() as f64, c.len()))
                .collect();
            let all: Vec<f64> = clients.concat();
            let oracle = all.iter().sum::<f64>() / all.len() as f64;
            prop_assert!((global_avg_loss(&per_client) - oracle).abs() < 1e-9);
        }
    }
}

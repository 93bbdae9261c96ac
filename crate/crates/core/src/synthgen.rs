//! Synthetic covert-network generator: a stochastic block model with a dense
//! threat block, class-conditional Gaussian features and Dirichlet-skewed
//! class proportions per client.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{build_graph, Graph, GraphError};
use crate::rng::{client_seed, derive_seed};

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("degree target {target} infeasible for {num_nodes} nodes ({reason})")]
    InfeasibleDegree { target: f64, num_nodes: usize, reason: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Fraction of nodes placed in the training mask.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub num_nodes: usize,
    /// When set, each client's size is drawn uniformly from `num_nodes..=max_nodes`.
    pub max_nodes: Option<usize>,
    pub target_avg_degree: f64,
    pub threat_fraction: f64,
    pub intra_threat_boost: f64,
    pub feature_dim: usize,
    pub class_separation: f64,
    pub dirichlet_alpha: f64,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            num_nodes: 2000,
            max_nodes: None,
            target_avg_degree: 7.3,
            threat_fraction: 0.1,
            intra_threat_boost: 8.0,
            feature_dim: 16,
            class_separation: 2.5,
            dirichlet_alpha: 10.0,
            num_classes: 2,
            seed: 42,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::InvalidSpec(m.to_string()));
        if self.num_nodes < 2 {
            return bad("num_nodes must be at least 2");
        }
        if matches!(self.max_nodes, Some(m) if m < self.num_nodes) {
            return bad("max_nodes below num_nodes");
        }
        if !(self.threat_fraction > 0.0 && self.threat_fraction < 1.0) {
            return bad("threat_fraction must lie in (0, 1)");
        }
        if !(self.intra_threat_boost >= 1.0) {
            return bad("intra_threat_boost must be >= 1");
        }
        if !(self.dirichlet_alpha > 0.0) {
            return bad("dirichlet_alpha must be positive");
        }
        if !(self.class_separation >= 0.0) {
            return bad("class_separation must be nonnegative");
        }
        if self.num_classes < 2 || self.num_classes > self.feature_dim {
            return bad("num_classes must be in 2..=feature_dim");
        }
        if !(self.target_avg_degree >= 0.0) || self.target_avg_degree >= (self.num_nodes - 1) as f64 {
            return Err(GenError::InfeasibleDegree {
                target: self.target_avg_degree,
                num_nodes: self.num_nodes,
                reason: "target must be in [0, num_nodes - 1)".into(),
            });
        }
        Ok(())
    }

    /// Expected class proportions: benign first, threat mass split evenly.
    fn base_proportions(&self) -> Vec<f64> {
        let k = self.num_classes;
        let mut p = vec![self.threat_fraction / (k - 1) as f64; k];
        p[0] = 1.0 - self.threat_fraction;
        p
    }

    /// Class means: scaled simplex vertices, centred, pairwise `class_separation` apart.
    pub fn class_means(&self) -> Array2<f64> {
        let k = self.num_classes;
        let s = self.class_separation / std::f64::consts::SQRT_2;
        let mut means = Array2::zeros((k, self.feature_dim));
        for c in 0..k {
            for j in 0..k {
                means[[c, j]] = s * (if c == j { 1.0 } else { 0.0 } - 1.0 / k as f64);
            }
        }
        means
    }
}

/// Draws class proportions from `Dirichlet(alpha * base)` via normalized gammas.
fn dirichlet<R: Rng>(alpha: f64, base: &[f64], rng: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = base
        .iter()
        .map(|&b| Gamma::new(alpha * b, 1.0).expect("positive shape").sample(rng))
        .collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.iter().map(|d| d / total).collect()
    } else {
        base.to_vec()
    }
}

/// Splits `n` into class counts, each class keeping at least one node.
fn class_counts(n: usize, proportions: &[f64]) -> Vec<usize> {
    let k = proportions.len();
    let mut counts: Vec<usize> = proportions.iter().map(|p| (p * n as f64).round() as usize).collect();
    for c in counts.iter_mut().skip(1) {
        *c = (*c).clamp(1, n.saturating_sub(k - 1));
    }
    let threat: usize = counts[1..].iter().sum();
    counts[0] = n.saturating_sub(threat).max(1);
    // Shave any excess off the largest threat class.
    while counts.iter().sum::<usize>() > n {
        let (i, _) = counts.iter().enumerate().skip(1).max_by_key(|(_, &c)| c).unwrap();
        counts[i] -= 1;
    }
    counts
}

/// Emits pair indices of a Bernoulli(p) subset of `0..total` by geometric skipping.
fn bernoulli_indices<R: Rng>(total: u64, p: f64, rng: &mut R, mut emit: impl FnMut(u64)) {
    if p <= 0.0 || total == 0 {
        return;
    }
    if p >= 1.0 {
        (0..total).for_each(emit);
        return;
    }
    let log_q = (1.0 - p).ln();
    let mut idx: u64 = 0;
    let mut first = true;
    loop {
        let u: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
        let skip = (u.ln() / log_q).floor();
        if !skip.is_finite() || skip >= total as f64 {
            return;
        }
        idx = if first { skip as u64 } else { idx.saturating_add(skip as u64 + 1) };
        first = false;
        if idx >= total {
            return;
        }
        emit(idx);
    }
}

/// Draws one client's graph.
pub fn generate_client_graph(spec: &GenSpec, client_id: usize) -> Result<Graph, GenError> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(client_seed(spec.seed, client_id));
    let n = match spec.max_nodes {
        Some(max) => rng.random_range(spec.num_nodes..=max),
        None => spec.num_nodes,
    };
    if spec.target_avg_degree >= (n - 1) as f64 {
        return Err(GenError::InfeasibleDegree {
            target: spec.target_avg_degree,
            num_nodes: n,
            reason: "target must be below num_nodes - 1".into(),
        });
    }
    let k = spec.num_classes;
    let proportions = dirichlet(spec.dirichlet_alpha, &spec.base_proportions(), &mut rng);
    let counts = class_counts(n, &proportions);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut blocks: Vec<Vec<usize>> = Vec::with_capacity(k);
    let mut labels = vec![0usize; n];
    let mut start = 0;
    for (c, &count) in counts.iter().enumerate() {
        let members = order[start..start + count].to_vec();
        for &v in &members {
            labels[v] = c;
        }
        blocks.push(members);
        start += count;
    }

    // Base probability p such that the expected average degree hits the target.
    let block_weight = |c: usize, d: usize| if c == d && c > 0 { spec.intra_threat_boost } else { 1.0 };
    let mut weighted_pairs = 0.0;
    for c in 0..k {
        let s = blocks[c].len() as f64;
        weighted_pairs += block_weight(c, c) * s * (s - 1.0) / 2.0;
        for d in c + 1..k {
            weighted_pairs += s * blocks[d].len() as f64;
        }
    }
    let p = spec.target_avg_degree * n as f64 / 2.0 / weighted_pairs;
    if p * spec.intra_threat_boost > 1.0 {
        return Err(GenError::InfeasibleDegree {
            target: spec.target_avg_degree,
            num_nodes: n,
            reason: format!("threat-block edge probability {} exceeds 1", p * spec.intra_threat_boost),
        });
    }

    let mut edges = Vec::new();
    for c in 0..k {
        let bc = &blocks[c];
        let s = bc.len() as u64;
        // Within-block pairs (i, j), i < j, indexed row-major over j.
        bernoulli_indices(s * s.saturating_sub(1) / 2, p * block_weight(c, c), &mut rng, |idx| {
            let j = ((1.0 + (1.0 + 8.0 * idx as f64).sqrt()) / 2.0).floor() as u64;
            let mut j = j.max(1);
            while j * (j - 1) / 2 > idx {
                j -= 1;
            }
            while (j + 1) * j / 2 <= idx {
                j += 1;
            }
            let i = idx - j * (j - 1) / 2;
            edges.push((bc[i as usize], bc[j as usize]));
        });
        for d in c + 1..k {
            let bd = &blocks[d];
            let cols = bd.len() as u64;
            bernoulli_indices(s * cols, p, &mut rng, |idx| {
                edges.push((bc[(idx / cols) as usize], bd[(idx % cols) as usize]));
            });
        }
    }

    let means = spec.class_means();
    let mut features = Array2::zeros((n, spec.feature_dim));
    for v in 0..n {
        for j in 0..spec.feature_dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            features[[v, j]] = means[[labels[v], j]] + z;
        }
    }

    let mut split: Vec<usize> = (0..n).collect();
    split.shuffle(&mut rng);
    let n_train = (TRAIN_FRACTION * n as f64).floor() as usize;
    let mut train = vec![false; n];
    let mut test = vec![false; n];
    for (rank, &v) in split.iter().enumerate() {
        if rank < n_train {
            train[v] = true;
        } else {
            test[v] = true;
        }
    }

    Ok(build_graph(&edges, features, labels)?
        .with_num_classes(k)?
        .with_masks(train, test)?)
}

/// Generates `num_clients` graphs; client `i` uses seed `mix(spec.seed, i)`
/// (see [`crate::rng::client_seed`]).
pub fn generate_federation(spec: &GenSpec, num_clients: usize) -> Result<Vec<Graph>, GenError> {
    (0..num_clients).map(|i| generate_client_graph(spec, i)).collect()
}

/// Shifts the features of `ceil(fraction * n)` random nodes by a random
/// direction of norm `magnitude`. Returns the modified graph and the sorted
/// ground-truth node set.
pub fn plant_anomalies(
    g: &Graph,
    fraction: f64,
    magnitude: f64,
    seed: u64,
) -> Result<(Graph, Vec<usize>), GenError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(GenError::InvalidSpec("anomaly fraction must lie in (0, 1)".into()));
    }
    let n = g.num_nodes();
    let count = planted_count(n, fraction);
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, &[0xA0A0]));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut truth: Vec<usize> = order[..count].to_vec();
    truth.sort_unstable();

    let mut features = g.features().clone();
    let dim = g.feature_dim();
    for &v in &truth {
        let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        for (j, d) in dir.iter().enumerate() {
            features[[v, j]] += magnitude * d / norm;
        }
    }
    Ok((g.clone().with_features(features)?, truth))
}

/// `ceil(fraction * n)`, tolerant of floating-point fuzz in the product.
pub fn planted_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::graph_to_json;
    use std::collections::BTreeSet;

    fn threat_fraction(g: &Graph) -> f64 {
        g.labels().iter().filter(|&&l| l == 1).count() as f64 / g.num_nodes() as f64
    }

    #[test]
    fn default_degree_near_target() {
        let g = generate_client_graph(&GenSpec::default(), 0).unwrap();
        let (avg, _) = g.degree_stats();
        assert!((6.8..=7.8).contains(&avg), "avg degree {avg}");
        g.validate().unwrap();
    }

    #[test]
    fn degree_calibration_over_20_seeds() {
        let mean: f64 = (0..20)
            .map(|s| {
                let spec = GenSpec { num_nodes: 1000, seed: s, ..GenSpec::default() };
                generate_client_graph(&spec, 0).unwrap().degree_stats().0
            })
            .sum::<f64>()
            / 20.0;
        assert!((mean - 7.3).abs() / 7.3 < 0.05, "mean {mean}");
    }

    #[test]
    fn huge_alpha_pins_threat_fraction() {
        let spec = GenSpec { dirichlet_alpha: 1e6, ..GenSpec::default() };
        for g in generate_federation(&spec, 10).unwrap() {
            assert!((threat_fraction(&g) - 0.1).abs() < 0.01);
        }
    }

    #[test]
    fn threat_fraction_matches_beta_sampling_oracle() {
        // Oracle: Beta(alpha f, alpha (1 - f)) drawn independently of the generator.
        let spec = GenSpec { num_nodes: 300, dirichlet_alpha: 10.0, ..GenSpec::default() };
        let fracs: Vec<f64> = (0..200)
            .map(|c| threat_fraction(&generate_client_graph(&spec, c).unwrap()))
            .collect();
        let beta = rand_distr::Beta::new(1.0, 9.0).unwrap();
        let mut orng = ChaCha20Rng::seed_from_u64(99);
        let oracle: Vec<f64> = (0..20000).map(|_| beta.sample(&mut orng)).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64]| {
            let m = mean(v);
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        let se = (var(&oracle) / 200.0).sqrt();
        assert!((mean(&fracs) - mean(&oracle)).abs() < 3.0 * se + 1.0 / 300.0);
        let ratio = var(&fracs) / var(&oracle);
        assert!((0.6..1.6).contains(&ratio), "variance ratio {ratio}");
    }

    #[test]
    fn determinism_and_client_variation() {
        let spec = GenSpec { num_nodes: 500, ..GenSpec::default() };
        let a = generate_federation(&spec, 3).unwrap();
        let b = generate_federation(&spec, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(graph_to_json(x), graph_to_json(y));
        }
        let e0: BTreeSet<_> = a[0].edges().into_iter().collect();
        let e1: BTreeSet<_> = a[1].edges().into_iter().collect();
        assert_ne!(e0, e1);
    }

    #[test]
    fn max_nodes_range_respected() {
        let spec = GenSpec { num_nodes: 2000, max_nodes: Some(10000), ..GenSpec::default() };
        let sizes: Vec<usize> = (0..10)
            .map(|c| generate_client_graph(&spec, c).unwrap().num_nodes())
            .collect();
        assert!(sizes.iter().all(|n| (2000..=10000).contains(n)));
        assert!(sizes.iter().collect::<BTreeSet<_>>().len() > 1);
    }

    #[test]
    fn masks_split_80_20() {
        let g = generate_client_graph(&GenSpec { num_nodes: 1000, ..GenSpec::default() }, 2).unwrap();
        assert_eq!(g.train_nodes().len(), 800);
        assert_eq!(g.test_nodes().len(), 200);
    }

    #[test]
    fn zero_separation_probe_is_at_chance() {
        // Logistic-regression probe on raw features, balanced classes.
        let spec = GenSpec {
            num_nodes: 2000,
            threat_fraction: 0.5,
            dirichlet_alpha: 1e6,
            intra_threat_boost: 1.0,
            class_separation: 0.0,
            ..GenSpec::default()
        };
        let g = generate_client_graph(&spec, 0).unwrap();
        let x = g.features();
        let y = g.labels();
        let d = g.feature_dim();
        let mut w = vec![0.0; d + 1];
        let train = g.train_nodes();
        for _ in 0..300 {
            let mut grad = vec![0.0; d + 1];
            for &v in &train {
                let z: f64 = w[d] + (0..d).map(|j| w[j] * x[[v, j]]).sum::<f64>();
                let err = 1.0 / (1.0 + (-z).exp()) - y[v] as f64;
                for j in 0..d {
                    grad[j] += err * x[[v, j]];
                }
                grad[d] += err;
            }
            for j in 0..=d {
                w[j] -= 0.5 * grad[j] / train.len() as f64;
            }
        }
        let test = g.test_nodes();
        let correct = test
            .iter()
            .filter(|&&v| {
                let z: f64 = w[d] + (0..d).map(|j| w[j] * x[[v, j]]).sum::<f64>();
                (z > 0.0) as usize == y[v]
            })
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc <= 0.55, "probe accuracy {acc}");
    }

    #[test]
    fn class_means_are_separated() {
        let spec = GenSpec { num_classes: 3, class_separation: 2.0, ..GenSpec::default() };
        let m = spec.class_means();
        for a in 0..3 {
            for b in a + 1..3 {
                let d = (&m.row(a) - &m.row(b)).mapv(|x| x * x).sum().sqrt();
                assert!((d - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn infeasible_specs_rejected() {
        let spec = GenSpec { num_nodes: 8, target_avg_degree: 7.3, ..GenSpec::default() };
        assert!(matches!(generate_client_graph(&spec, 0), Err(GenError::InfeasibleDegree { .. })));
        let spec = GenSpec { num_nodes: 30, target_avg_degree: 20.0, intra_threat_boost: 50.0, ..GenSpec::default() };
        assert!(matches!(generate_client_graph(&spec, 0), Err(GenError::InfeasibleDegree { .. })));
        let spec = GenSpec { threat_fraction: 1.0, ..GenSpec::default() };
        assert!(generate_client_graph(&spec, 0).is_err());
    }

    #[test]
    fn anomaly_planting() {
        let g = generate_client_graph(&GenSpec::default(), 0).unwrap();
        let (planted, truth) = plant_anomalies(&g, 0.05, 4.0, 1).unwrap();
        assert_eq!(truth.len(), 100);
        for v in 0..g.num_nodes() {
            let shift = (&planted.features().row(v) - &g.features().row(v)).mapv(|x| x * x).sum().sqrt();
            if truth.binary_search(&v).is_ok() {
                assert!((shift - 4.0).abs() < 1e-9);
            } else {
                assert_eq!(shift, 0.0);
            }
        }
        let (same, _) = plant_anomalies(&g, 0.05, 0.0, 1).unwrap();
        assert_eq!(same, g);
        assert!(plant_anomalies(&g, 0.0, 1.0, 1).is_err());
    }
}

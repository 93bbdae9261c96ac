//! Attributed undirected graphs in compressed sparse row form.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("edge ({u}, {v}) references a node outside 0..{num_nodes}")]
    EndpointOutOfRange { u: usize, v: usize, num_nodes: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("node {v} out of range (graph has {num_nodes} nodes)")]
    NodeOutOfRange { v: usize, num_nodes: usize },
    #[error("label {label} at node {node} is not below num_classes {num_classes}")]
    LabelOutOfRange { node: usize, label: usize, num_classes: usize },
    #[error("node {0} is in both the train and the test mask")]
    MaskOverlap(usize),
    #[error("invalid CSR structure: {0}")]
    InvalidCsr(String),
    #[error("graph file: {0}")]
    Io(String),
}

/// A client's private attributed graph.
///
/// Edges are stored in both directions with sorted, duplicate-free adjacency
/// lists. Self-loops are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    offsets: Vec<usize>,
    targets: Vec<usize>,
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    train_mask: Vec<bool>,
    test_mask: Vec<bool>,
}

/// Builds a symmetric deduplicated CSR graph. Self-loops in `edges` are
/// dropped. Masks start empty; see [`Graph::with_masks`].
pub fn build_graph(
    edges: &[(usize, usize)],
    features: Array2<f64>,
    labels: Vec<usize>,
) -> Result<Graph, GraphError> {
    let n = features.nrows();
    if labels.len() != n {
        return Err(GraphError::DimensionMismatch(format!(
            "{} feature rows but {} labels",
            n,
            labels.len()
        )));
    }
    let mut degree = vec![0usize; n];
    let mut directed = Vec::with_capacity(edges.len() * 2);
    for &(u, v) in edges {
        if u >= n || v >= n {
            return Err(GraphError::EndpointOutOfRange { u, v, num_nodes: n });
        }
        if u == v {
            continue;
        }
        directed.push((u, v));
        directed.push((v, u));
    }
    directed.sort_unstable();
    directed.dedup();
    for &(u, _) in &directed {
        degree[u] += 1;
    }
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    for d in degree {
        offsets.push(offsets.last().unwrap() + d);
    }
    let targets = directed.into_iter().map(|(_, v)| v).collect();
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1);
    Ok(Graph {
        num_nodes: n,
        offsets,
        targets,
        features,
        labels,
        num_classes,
        train_mask: vec![false; n],
        test_mask: vec![false; n],
    })
}

impl Graph {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn train_mask(&self) -> &[bool] {
        &self.train_mask
    }

    pub fn test_mask(&self) -> &[bool] {
        &self.test_mask
    }

    pub fn csr_offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn csr_targets(&self) -> &[usize] {
        &self.targets
    }

    /// Number of stored (directed) adjacency entries, i.e. twice the edge count.
    pub fn num_directed_edges(&self) -> usize {
        self.targets.len()
    }

    /// Sorted neighbors of `v`, self excluded.
    pub fn neighbors(&self, v: usize) -> Result<&[usize], GraphError> {
        if v >= self.num_nodes {
            return Err(GraphError::NodeOutOfRange {
                v,
                num_nodes: self.num_nodes,
            });
        }
        Ok(self.adj(v))
    }

    /// Unchecked variant used on hot paths.
    #[inline]
    pub(crate) fn adj(&self, v: usize) -> &[usize] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    /// `(average degree, max degree)`; `(0.0, 0)` for an empty graph.
    pub fn degree_stats(&self) -> (f64, usize) {
        if self.num_nodes == 0 {
            return (0.0, 0);
        }
        let max = (0..self.num_nodes).map(|v| self.degree(v)).max().unwrap_or(0);
        (self.targets.len() as f64 / self.num_nodes as f64, max)
    }

    /// Each undirected edge once, as `(u, v)` with `u < v`, in CSR order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.num_nodes)
            .flat_map(|u| self.adj(u).iter().filter(move |&&v| u < v).map(move |&v| (u, v)))
            .collect()
    }

    pub fn with_masks(mut self, train: Vec<bool>, test: Vec<bool>) -> Result<Self, GraphError> {
        if train.len() != self.num_nodes || test.len() != self.num_nodes {
            return Err(GraphError::DimensionMismatch(
                "mask length differs from node count".into(),
            ));
        }
        if let Some(v) = (0..self.num_nodes).find(|&v| train[v] && test[v]) {
            return Err(GraphError::MaskOverlap(v));
        }
        self.train_mask = train;
        self.test_mask = test;
        Ok(self)
    }

    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self, GraphError> {
        if let Some((node, &label)) = self.labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(GraphError::LabelOutOfRange { node, label, num_classes });
        }
        self.num_classes = num_classes;
        Ok(self)
    }

    /// Replaces labels, keeping structure. Used by label-flip attacks.
    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self, GraphError> {
        if labels.len() != self.num_nodes {
            return Err(GraphError::DimensionMismatch("label count".into()));
        }
        self.labels = labels;
        let k = self.num_classes;
        self.with_num_classes(k)
    }

    /// Replaces the feature matrix, keeping structure.
    pub fn with_features(mut self, features: Array2<f64>) -> Result<Self, GraphError> {
        if features.nrows() != self.num_nodes {
            return Err(GraphError::DimensionMismatch("feature rows".into()));
        }
        self.features = features;
        Ok(self)
    }

    pub fn train_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes).filter(|&v| self.train_mask[v]).collect()
    }

    pub fn test_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes).filter(|&v| self.test_mask[v]).collect()
    }

    /// Re-checks every structural invariant.
    pub fn validate(&self) -> Result<(), GraphError> {
        let n = self.num_nodes;
        if self.offsets.len() != n + 1 || self.offsets[0] != 0 {
            return Err(GraphError::InvalidCsr("offset array shape".into()));
        }
        if self.offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(GraphError::InvalidCsr("offsets decrease".into()));
        }
        if self.offsets[n] != self.targets.len() {
            return Err(GraphError::InvalidCsr("final offset != target count".into()));
        }
        for v in 0..n {
            let adj = self.adj(v);
            if adj.windows(2).any(|w| w[0] >= w[1]) {
                return Err(GraphError::InvalidCsr(format!("adjacency of {v} unsorted or duplicated")));
            }
            for &u in adj {
                if u >= n || u == v {
                    return Err(GraphError::InvalidCsr(format!("bad target {u} at node {v}")));
                }
                if self.adj(u).binary_search(&v).is_err() {
                    return Err(GraphError::InvalidCsr(format!("edge ({v}, {u}) not symmetric")));
                }
            }
        }
        if self.features.nrows() != n || self.labels.len() != n {
            return Err(GraphError::DimensionMismatch("features/labels".into()));
        }
        if let Some(v) = (0..n).find(|&v| self.labels[v] >= self.num_classes) {
            return Err(GraphError::LabelOutOfRange {
                node: v,
                label: self.labels[v],
                num_classes: self.num_classes,
            });
        }
        if let Some(v) = (0..n).find(|&v| self.train_mask[v] && self.test_mask[v]) {
            return Err(GraphError::MaskOverlap(v));
        }
        Ok(())
    }

    /// Relabels node `v` as `perm[v]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Graph, GraphError> {
        let n = self.num_nodes;
        if perm.len() != n || perm.iter().collect::<BTreeSet<_>>().len() != n || perm.iter().any(|&p| p >= n) {
            return Err(GraphError::DimensionMismatch("not a permutation".into()));
        }
        let edges: Vec<_> = self.edges().into_iter().map(|(u, v)| (perm[u], perm[v])).collect();
        let mut features = Array2::zeros(self.features.raw_dim());
        let mut labels = vec![0; n];
        let mut train = vec![false; n];
        let mut test = vec![false; n];
        for v in 0..n {
            features.row_mut(perm[v]).assign(&self.features.row(v));
            labels[perm[v]] = self.labels[v];
            train[perm[v]] = self.train_mask[v];
            test[perm[v]] = self.test_mask[v];
        }
        build_graph(&edges, features, labels)?
            .with_num_classes(self.num_classes)?
            .with_masks(train, test)
    }
}

/// On-disk JSON representation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub num_nodes: usize,
    pub edges: Vec<[usize; 2]>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub train_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

impl From<&Graph> for GraphFile {
    fn from(g: &Graph) -> Self {
        GraphFile {
            num_nodes: g.num_nodes,
            edges: g.edges().into_iter().map(|(u, v)| [u, v]).collect(),
            features: g.features.rows().into_iter().map(|r| r.to_vec()).collect(),
            labels: g.labels.clone(),
            train_mask: g.train_mask.clone(),
            test_mask: g.test_mask.clone(),
            num_classes: Some(g.num_classes),
        }
    }
}

impl TryFrom<GraphFile> for Graph {
    type Error = GraphError;

    fn try_from(f: GraphFile) -> Result<Self, GraphError> {
        let n = f.num_nodes;
        if f.features.len() != n {
            return Err(GraphError::DimensionMismatch(format!(
                "num_nodes {} but {} feature rows",
                n,
                f.features.len()
            )));
        }
        let dim = f.features.first().map_or(0, Vec::len);
        if f.features.iter().any(|r| r.len() != dim) {
            return Err(GraphError::DimensionMismatch("ragged feature rows".into()));
        }
        if f.features.iter().flatten().any(|x| !x.is_finite()) {
            return Err(GraphError::DimensionMismatch("non-finite feature".into()));
        }
        let flat: Vec<f64> = f.features.into_iter().flatten().collect();
        let features = Array2::from_shape_vec((n, dim), flat)
            .map_err(|e| GraphError::DimensionMismatch(e.to_string()))?;
        let edges: Vec<(usize, usize)> = f.edges.iter().map(|e| (e[0], e[1])).collect();
        let mut g = build_graph(&edges, features, f.labels)?;
        if let Some(k) = f.num_classes {
            g = g.with_num_classes(k)?;
        }
        let g = g.with_masks(f.train_mask, f.test_mask)?;
        g.validate()?;
        Ok(g)
    }
}

/// Parses and validates a graph from JSON bytes.
pub fn graph_from_json(bytes: &[u8]) -> Result<Graph, GraphError> {
    let file: GraphFile = serde_json::from_slice(bytes).map_err(|e| GraphError::Io(e.to_string()))?;
    Graph::try_from(file)
}

pub fn graph_to_json(g: &Graph) -> String {
    serde_json::to_string(&GraphFile::from(g)).expect("graph serialization is infallible")
}

pub fn load_graph(path: &Path) -> Result<Graph, GraphError> {
    let bytes = std::fs::read(path).map_err(|e| GraphError::Io(format!("{}: {e}", path.display())))?;
    graph_from_json(&bytes)
}

pub fn save_graph(g: &Graph, path: &Path) -> Result<(), GraphError> {
    std::fs::write(path, graph_to_json(g)).map_err(|e| GraphError::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::{BTreeMap, BTreeSet};

    fn feats(n: usize) -> Array2<f64> {
        Array2::zeros((n, 2))
    }

    fn triangle() -> Graph {
        build_graph(&[(0, 1), (1, 2), (2, 0)], feats(3), vec![0, 1, 0]).unwrap()
    }

    /// Adjacency-set oracle: symmetric closure without self-loops.
    fn set_oracle(n: usize, edges: &[(usize, usize)]) -> BTreeMap<usize, BTreeSet<usize>> {
        let mut adj: BTreeMap<usize, BTreeSet<usize>> = (0..n).map(|v| (v, BTreeSet::new())).collect();
        for &(u, v) in edges {
            if u != v {
                adj.get_mut(&u).unwrap().insert(v);
                adj.get_mut(&v).unwrap().insert(u);
            }
        }
        adj
    }

    #[test]
    fn single_node_no_edges() {
        let g = build_graph(&[], feats(1), vec![0]).unwrap();
        assert_eq!(g.degree(0), 0);
        assert_eq!(g.degree_stats(), (0.0, 0));
        assert!(g.neighbors(0).unwrap().is_empty());
    }

    #[test]
    fn triangle_queries() {
        let g = triangle();
        assert_eq!(g.degree_stats(), (2.0, 2));
        assert_eq!(g.neighbors(0).unwrap(), &[1, 2]);
        assert!(matches!(g.neighbors(3), Err(GraphError::NodeOutOfRange { .. })));
        g.validate().unwrap();
    }

    #[test]
    fn path_and_isolated() {
        let g = build_graph(&[(0, 1), (1, 2)], feats(4), vec![0; 4]).unwrap();
        assert_eq!(g.neighbors(1).unwrap(), &[0, 2]);
        assert!(g.neighbors(3).unwrap().is_empty());
    }

    #[test]
    fn self_loops_dropped_and_errors() {
        let g = build_graph(&[(0, 0), (0, 1), (1, 0)], feats(2), vec![0, 0]).unwrap();
        assert_eq!(g.num_directed_edges(), 2);
        assert!(matches!(
            build_graph(&[(0, 5)], feats(2), vec![0, 0]),
            Err(GraphError::EndpointOutOfRange { .. })
        ));
        assert!(matches!(
            build_graph(&[], feats(2), vec![0]),
            Err(GraphError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn mask_overlap_rejected() {
        let err = triangle().with_masks(vec![true, false, false], vec![true, false, false]);
        assert_eq!(err.unwrap_err(), GraphError::MaskOverlap(0));
    }

    #[test]
    fn random_50_node_graph_with_duplicates_matches_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(50);
        let edges: Vec<(usize, usize)> = (0..300)
            .map(|_| (rng.random_range(0..50), rng.random_range(0..50)))
            .chain([(3, 4), (4, 3), (3, 4)])
            .collect();
        let g = build_graph(&edges, feats(50), vec![0; 50]).unwrap();
        let oracle = set_oracle(50, &edges);
        for v in 0..50 {
            let got: BTreeSet<usize> = g.neighbors(v).unwrap().iter().copied().collect();
            assert_eq!(got, oracle[&v], "node {v}");
        }
    }

    #[test]
    fn json_round_trip() {
        let g = triangle()
            .with_masks(vec![true, false, false], vec![false, true, false])
            .unwrap();
        let back = graph_from_json(graph_to_json(&g).as_bytes()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn json_loader_rejects_bad_input() {
        let bad_edge = r#"{"num_nodes":2,"edges":[[0,2]],"features":[[0],[0]],"labels":[0,0],"train_mask":[true,false],"test_mask":[false,true]}"#;
        assert!(graph_from_json(bad_edge.as_bytes()).is_err());
        let overlap = r#"{"num_nodes":1,"edges":[],"features":[[0]],"labels":[0],"train_mask":[true],"test_mask":[true]}"#;
        assert!(graph_from_json(overlap.as_bytes()).is_err());
        let unknown = r#"{"num_nodes":1,"edges":[],"features":[[0]],"labels":[0],"train_mask":[true],"test_mask":[false],"x":1}"#;
        assert!(graph_from_json(unknown.as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn csr_matches_set_oracle(n in 1usize..100, raw in prop::collection::vec((0usize..100, 0usize..100), 0..300)) {
            let edges: Vec<_> = raw.into_iter().map(|(u, v)| (u % n, v % n)).collect();
            let g = build_graph(&edges, feats(n), vec![0; n]).unwrap();
            g.validate().unwrap();
            let oracle = set_oracle(n, &edges);
            for v in 0..n {
                let got: BTreeSet<usize> = g.neighbors(v).unwrap().iter().copied().collect();
                prop_assert_eq!(&got, &oracle[&v]);
            }
            let round_trip: BTreeSet<(usize, usize)> = g.edges().into_iter().collect();
            let expected: BTreeSet<(usize, usize)> = oracle
                .iter()
                .flat_map(|(&u, s)| s.iter().filter(move |&&v| u < v).map(move |&v| (u, v)))
                .collect();
            prop_assert_eq!(round_trip, expected);
        }
    }
}

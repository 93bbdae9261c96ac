//! Two-layer single-head graph attention network with hand-written
//! reverse-mode gradients.
//!
//! Every node attends over its closed neighborhood N⁺(v) = {v} ∪ N(v); the
//! self-loop is injected here rather than stored in the graph.

mod params;

pub use params::{param_count, GatHyper, ModelParams, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use ndarray::{Array2, ArrayView1, ArrayView2};
use thiserror::Error;

use crate::graph::Graph;

#[derive(Debug, Error, PartialEq)]
pub enum GatError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("loss over an empty node mask is undefined")]
    EmptyMask,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu if x <= 0.0 => x.exp_m1(),
            _ => x,
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Elu if x <= 0.0 => x.exp(),
            _ => 1.0,
        }
    }
}

#[inline]
fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// `LeakyReLU(a · [W h_u ‖ W h_v])`.
pub fn attention_logits(
    h_u: ArrayView1<f64>,
    h_v: ArrayView1<f64>,
    w: ArrayView2<f64>,
    a: ArrayView1<f64>,
    leaky_slope: f64,
) -> Result<f64, GatError> {
    let out = w.nrows();
    if h_u.len() != w.ncols() || h_v.len() != w.ncols() || a.len() != 2 * out {
        return Err(GatError::DimensionMismatch(format!(
            "h: {}/{}, W: {}x{}, a: {}",
            h_u.len(),
            h_v.len(),
            w.nrows(),
            w.ncols(),
            a.len()
        )));
    }
    let zu = w.dot(&h_u);
    let zv = w.dot(&h_v);
    let pre = a.slice(ndarray::s![..out]).dot(&zu) + a.slice(ndarray::s![out..]).dot(&zv);
    Ok(leaky_relu(pre, leaky_slope))
}

/// Everything one attention layer computed, kept for the backward pass.
///
/// Per-target edge lists use an extended CSR: the range
/// `offsets[v]..offsets[v + 1]` lists the sources of `v`, self first.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub input: Array2<f64>,
    /// `W h_u` for every node.
    pub projected: Array2<f64>,
    pub src_score: Vec<f64>,
    pub dst_score: Vec<f64>,
    pub offsets: Vec<usize>,
    pub sources: Vec<usize>,
    /// Attention pre-activation `a · [z_u ‖ z_v]` per edge.
    pub raw_logits: Vec<f64>,
    /// Attention logits `e_uv` per edge.
    pub logits: Vec<f64>,
    /// Attention weights `α_uv` per edge.
    pub alpha: Vec<f64>,
    pub pre_activation: Array2<f64>,
    pub output: Array2<f64>,
    pub activation: Activation,
    pub leaky_slope: f64,
}

impl LayerTrace {
    /// Attention weights of all sources of `v`, self first.
    pub fn attention_of(&self, v: usize) -> (&[usize], &[f64]) {
        let r = self.offsets[v]..self.offsets[v + 1];
        (&self.sources[r.clone()], &self.alpha[r])
    }
}

fn closed_neighborhoods(g: &Graph) -> (Vec<usize>, Vec<usize>) {
    let n = g.num_nodes();
    let mut offsets = Vec::with_capacity(n + 1);
    let mut sources = Vec::with_capacity(g.num_directed_edges() + n);
    offsets.push(0);
    for v in 0..n {
        sources.push(v);
        sources.extend_from_slice(g.adj(v));
        offsets.push(sources.len());
    }
    (offsets, sources)
}

/// One attention layer: softmax-normalized attention over N⁺(v), weighted sum
/// of projected sources, then `activation`.
pub fn layer_forward(
    h: &Array2<f64>,
    g: &Graph,
    w: &Array2<f64>,
    a: &ndarray::Array1<f64>,
    activation: Activation,
    leaky_slope: f64,
) -> Result<LayerTrace, GatError> {
    let n = g.num_nodes();
    let out_dim = w.nrows();
    if h.nrows() != n || h.ncols() != w.ncols() || a.len() != 2 * out_dim {
        return Err(GatError::DimensionMismatch(format!(
            "H {}x{}, W {}x{}, a {}, nodes {n}",
            h.nrows(),
            h.ncols(),
            w.nrows(),
            w.ncols(),
            a.len()
        )));
    }
    let projected = h.dot(&w.t());
    let a_src = a.slice(ndarray::s![..out_dim]);
    let a_dst = a.slice(ndarray::s![out_dim..]);
    let src_score: Vec<f64> = projected.rows().into_iter().map(|z| z.dot(&a_src)).collect();
    let dst_score: Vec<f64> = projected.rows().into_iter().map(|z| z.dot(&a_dst)).collect();

    let (offsets, sources) = closed_neighborhoods(g);
    let m = sources.len();
    let mut raw_logits = vec![0.0; m];
    let mut logits = vec![0.0; m];
    let mut alpha = vec![0.0; m];
    let mut pre_activation = Array2::zeros((n, out_dim));
    for v in 0..n {
        let range = offsets[v]..offsets[v + 1];
        let mut max = f64::NEG_INFINITY;
        for k in range.clone() {
            let raw = src_score[sources[k]] + dst_score[v];
            raw_logits[k] = raw;
            logits[k] = leaky_relu(raw, leaky_slope);
            max = max.max(logits[k]);
        }
        let mut total = 0.0;
        for k in range.clone() {
            alpha[k] = (logits[k] - max).exp();
            total += alpha[k];
        }
        let mut row = pre_activation.row_mut(v);
        for k in range {
            alpha[k] /= total;
            row.scaled_add(alpha[k], &projected.row(sources[k]));
        }
    }
    let output = pre_activation.mapv(|x| activation.apply(x));
    Ok(LayerTrace {
        input: h.clone(),
        projected,
        src_score,
        dst_score,
        offsets,
        sources,
        raw_logits,
        logits,
        alpha,
        pre_activation,
        output,
        activation,
        leaky_slope,
    })
}

struct LayerGrads {
    w: Array2<f64>,
    a: Vec<f64>,
    input: Array2<f64>,
}

fn layer_backward(trace: &LayerTrace, w: &Array2<f64>, a: &ndarray::Array1<f64>, d_out: &Array2<f64>) -> LayerGrads {
    let n = trace.output.nrows();
    let out_dim = w.nrows();
    let act = trace.activation;
    let d_pre = ndarray::Zip::from(d_out)
        .and(&trace.pre_activation)
        .map_collect(|&d, &x| d * act.derivative(x));

    let mut d_proj = Array2::<f64>::zeros((n, out_dim));
    let mut d_src = vec![0.0; n];
    let mut d_dst = vec![0.0; n];
    let mut d_alpha = Vec::new();
    for v in 0..n {
        let range = trace.offsets[v]..trace.offsets[v + 1];
        let dp = d_pre.row(v);
        d_alpha.clear();
        d_alpha.extend(range.clone().map(|k| dp.dot(&trace.projected.row(trace.sources[k]))));
        let weighted: f64 = range.clone().zip(&d_alpha).map(|(k, da)| trace.alpha[k] * da).sum();
        for (k, &da) in range.zip(&d_alpha) {
            let u = trace.sources[k];
            let alpha = trace.alpha[k];
            d_proj.row_mut(u).scaled_add(alpha, &dp);
            let d_logit = alpha * (da - weighted);
            let d_raw = if trace.raw_logits[k] > 0.0 { d_logit } else { trace.leaky_slope * d_logit };
            d_src[u] += d_raw;
            d_dst[v] += d_raw;
        }
    }
    let a_src = a.slice(ndarray::s![..out_dim]);
    let a_dst = a.slice(ndarray::s![out_dim..]);
    let mut d_a = vec![0.0; 2 * out_dim];
    for u in 0..n {
        let z = trace.projected.row(u);
        for j in 0..out_dim {
            d_a[j] += d_src[u] * z[j];
            d_a[out_dim + j] += d_dst[u] * z[j];
        }
        let mut row = d_proj.row_mut(u);
        row.scaled_add(d_src[u], &a_src);
        row.scaled_add(d_dst[u], &a_dst);
    }
    LayerGrads {
        w: d_proj.t().dot(&trace.input),
        a: d_a,
        input: d_proj.dot(w),
    }
}

/// Forward pass retained for backpropagation and for embedding consumers.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub hidden: LayerTrace,
    pub output: LayerTrace,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Array2<f64> {
        &self.output.output
    }

    /// Layer-1 hidden states after aggregation and ELU.
    pub fn hidden_states(&self) -> &Array2<f64> {
        &self.hidden.output
    }

    /// Layer-1 node projections `W1 x_v`, before attention aggregation.
    pub fn hidden_projections(&self) -> &Array2<f64> {
        &self.hidden.projected
    }
}

/// ELU hidden layer, identity output layer.
pub fn model_forward(g: &Graph, p: &ModelParams) -> Result<ForwardTrace, GatError> {
    if g.feature_dim() != p.feature_dim() {
        return Err(GatError::DimensionMismatch(format!(
            "graph features have {} dims, model expects {}",
            g.feature_dim(),
            p.feature_dim()
        )));
    }
    let slope = p.hyper.leaky_slope;
    let hidden = layer_forward(g.features(), g, &p.w1, &p.a1, Activation::Elu, slope)?;
    let output = layer_forward(&hidden.output, g, &p.w2, &p.a2, Activation::Identity, slope)?;
    Ok(ForwardTrace { hidden, output })
}

/// Softmax cross-entropy of one logit row, log-sum-exp stabilized.
pub fn cross_entropy(logits: ArrayView1<f64>, label: usize) -> f64 {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Per-node cross-entropy for the given nodes.
pub fn node_losses(trace: &ForwardTrace, labels: &[usize], nodes: &[usize]) -> Vec<f64> {
    nodes
        .iter()
        .map(|&v| cross_entropy(trace.logits().row(v), labels[v]))
        .collect()
}

fn mask_nodes(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(v, _)| v).collect()
}

/// Mean cross-entropy over the masked nodes.
pub fn masked_loss(trace: &ForwardTrace, labels: &[usize], mask: &[bool]) -> Result<f64, GatError> {
    loss_over(trace, labels, &mask_nodes(mask))
}

pub fn loss_over(trace: &ForwardTrace, labels: &[usize], nodes: &[usize]) -> Result<f64, GatError> {
    if nodes.is_empty() {
        return Err(GatError::EmptyMask);
    }
    Ok(node_losses(trace, labels, nodes).iter().sum::<f64>() / nodes.len() as f64)
}

/// Exact gradient of [`masked_loss`], flattened as W1, a1, W2, a2.
pub fn backward(g: &Graph, p: &ModelParams, labels: &[usize], mask: &[bool]) -> Result<Vec<f64>, GatError> {
    Ok(loss_and_gradient(g, p, labels, &mask_nodes(mask))?.1)
}

/// Mean loss over `nodes` and its gradient.
pub fn loss_and_gradient(
    g: &Graph,
    p: &ModelParams,
    labels: &[usize],
    nodes: &[usize],
) -> Result<(f64, Vec<f64>), GatError> {
    if nodes.is_empty() {
        return Err(GatError::EmptyMask);
    }
    if labels.len() != g.num_nodes() {
        return Err(GatError::DimensionMismatch("label count".into()));
    }
    let trace = model_forward(g, p)?;
    let logits = trace.logits();
    let k = p.num_classes();
    let scale = 1.0 / nodes.len() as f64;
    let mut loss = 0.0;
    let mut d_logits = Array2::zeros((g.num_nodes(), k));
    for &v in nodes {
        let row = logits.row(v);
        loss += cross_entropy(row, labels[v]);
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
        for c in 0..k {
            let prob = (row[c] - max).exp() / total;
            d_logits[[v, c]] += scale * (prob - if c == labels[v] { 1.0 } else { 0.0 });
        }
    }
    let out_grads = layer_backward(&trace.output, &p.w2, &p.a2, &d_logits);
    let hid_grads = layer_backward(&trace.hidden, &p.w1, &p.a1, &out_grads.input);

    let mut flat = Vec::with_capacity(p.param_count());
    flat.extend(hid_grads.w.iter());
    flat.extend(hid_grads.a);
    flat.extend(out_grads.w.iter());
    flat.extend(out_grads.a);
    Ok((loss * scale, flat))
}

/// `p − lr · grad`.
pub fn sgd_step(p: &ModelParams, grad: &[f64], lr: f64) -> Result<ModelParams, GatError> {
    if grad.len() != p.param_count() {
        return Err(GatError::DimensionMismatch(format!(
            "gradient has {} entries, model has {}",
            grad.len(),
            p.param_count()
        )));
    }
    let flat: Vec<f64> = p.flatten().iter().zip(grad).map(|(x, g)| x - lr * g).collect();
    p.unflatten(&flat)
}

/// Class predictions; ties go to the lower class index.
pub fn predict(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests;

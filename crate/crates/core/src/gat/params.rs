//! Learnable tensors of the two-layer network and the checkpoint format.
//!
//! Checkpoint layout (all little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `FGAT` |
//! | 4     | version (u32, currently 1) |
//! | 4×3   | feature_dim, hidden_dim, num_classes (u32) |
//! | 8     | leaky_slope (f64) |
//! | 8×N   | parameters in flatten order W1, a1, W2, a2 |

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::GatError;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FGAT";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 12 + 8;
/// Dimension cap applied when decoding untrusted checkpoints.
const MAX_DIM: u32 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatHyper {
    pub hidden_dim: usize,
    pub leaky_slope: f64,
}

impl Default for GatHyper {
    fn default() -> Self {
        GatHyper { hidden_dim: 64, leaky_slope: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// hidden_dim × feature_dim
    pub w1: Array2<f64>,
    /// 2·hidden_dim: source half then target half.
    pub a1: Array1<f64>,
    /// num_classes × hidden_dim
    pub w2: Array2<f64>,
    /// 2·num_classes
    pub a2: Array1<f64>,
    pub hyper: GatHyper,
}

fn glorot<R: Rng>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

impl ModelParams {
    pub fn zeros(feature_dim: usize, num_classes: usize, hyper: GatHyper) -> Self {
        let h = hyper.hidden_dim;
        ModelParams {
            w1: Array2::zeros((h, feature_dim)),
            a1: Array1::zeros(2 * h),
            w2: Array2::zeros((num_classes, h)),
            a2: Array1::zeros(2 * num_classes),
            hyper,
        }
    }

    /// Glorot-uniform initialization of every tensor.
    pub fn glorot(feature_dim: usize, num_classes: usize, hyper: GatHyper, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let h = hyper.hidden_dim;
        let w1 = glorot(h, feature_dim, feature_dim, h, &mut rng);
        let a1 = glorot(1, 2 * h, 2 * h, 1, &mut rng).into_shape_with_order(2 * h).unwrap();
        let w2 = glorot(num_classes, h, h, num_classes, &mut rng);
        let a2 = glorot(1, 2 * num_classes, 2 * num_classes, 1, &mut rng)
            .into_shape_with_order(2 * num_classes)
            .unwrap();
        ModelParams { w1, a1, w2, a2, hyper }
    }

    pub fn feature_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.w2.nrows()
    }

    pub fn param_count(&self) -> usize {
        param_count(self.feature_dim(), self.hidden_dim(), self.num_classes())
    }

    /// Flattens in the order W1 (row-major), a1, W2 (row-major), a2.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend(self.w1.iter());
        out.extend(self.a1.iter());
        out.extend(self.w2.iter());
        out.extend(self.a2.iter());
        out
    }

    /// Inverse of [`ModelParams::flatten`] for a model of the same shape.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ModelParams, GatError> {
        Self::from_flat(self.feature_dim(), self.num_classes(), self.hyper, flat)
    }

    pub fn from_flat(
        feature_dim: usize,
        num_classes: usize,
        hyper: GatHyper,
        flat: &[f64],
    ) -> Result<ModelParams, GatError> {
        let h = hyper.hidden_dim;
        let expected = param_count(feature_dim, h, num_classes);
        if flat.len() != expected {
            return Err(GatError::DimensionMismatch(format!(
                "flat vector has {} entries, model needs {expected}",
                flat.len()
            )));
        }
        let (w1, rest) = flat.split_at(h * feature_dim);
        let (a1, rest) = rest.split_at(2 * h);
        let (w2, a2) = rest.split_at(num_classes * h);
        Ok(ModelParams {
            w1: Array2::from_shape_vec((h, feature_dim), w1.to_vec()).unwrap(),
            a1: Array1::from(a1.to_vec()),
            w2: Array2::from_shape_vec((num_classes, h), w2.to_vec()).unwrap(),
            a2: Array1::from(a2.to_vec()),
            hyper,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|x| x.is_finite())
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.param_count());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for d in [self.feature_dim(), self.hidden_dim(), self.num_classes()] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.hyper.leaky_slope.to_le_bytes());
        for x in self.flatten() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<ModelParams, GatError> {
        let bad = |m: &str| GatError::Checkpoint(m.to_string());
        if bytes.len() < HEADER_LEN {
            return Err(bad("truncated header"));
        }
        if bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != CHECKPOINT_VERSION {
            return Err(GatError::Checkpoint(format!("unsupported version {version}")));
        }
        let (f, h, k) = (u32_at(8), u32_at(12), u32_at(16));
        if f == 0 || h == 0 || k == 0 || f > MAX_DIM || h > MAX_DIM || k > MAX_DIM {
            return Err(bad("dimension out of range"));
        }
        let slope = f64::from_le_bytes(bytes[20..28].try_into().unwrap());
        if !slope.is_finite() {
            return Err(bad("non-finite leaky slope"));
        }
        let (f, h, k) = (f as usize, h as usize, k as usize);
        let count = param_count(f, h, k);
        let body = &bytes[HEADER_LEN..];
        if body.len() != count * 8 {
            return Err(GatError::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                count * 8,
                body.len()
            )));
        }
        let flat: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if flat.iter().any(|x| !x.is_finite()) {
            return Err(bad("non-finite parameter"));
        }
        Self::from_flat(f, k, GatHyper { hidden_dim: h, leaky_slope: slope }, &flat)
    }
}

pub fn param_count(feature_dim: usize, hidden_dim: usize, num_classes: usize) -> usize {
    hidden_dim * feature_dim + 2 * hidden_dim + num_classes * hidden_dim + 2 * num_classes
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_model_has_1284_parameters() {
        let p = ModelParams::glorot(16, 2, GatHyper::default(), 1);
        assert_eq!(p.param_count(), 1284);
        assert_eq!(p.flatten().len(), 1284);
    }

    #[test]
    fn checkpoint_round_trip_and_rejections() {
        let p = ModelParams::glorot(5, 3, GatHyper { hidden_dim: 4, leaky_slope: 0.1 }, 9);
        let bytes = p.to_checkpoint();
        assert_eq!(bytes.len(), HEADER_LEN + 8 * p.param_count());
        assert_eq!(ModelParams::from_checkpoint(&bytes).unwrap(), p);
        assert!(ModelParams::from_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(ModelParams::from_checkpoint(&wrong).is_err());
        let mut wrong = bytes;
        wrong[4] = 2;
        assert!(ModelParams::from_checkpoint(&wrong).is_err());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_is_identity(f in 1usize..6, h in 1usize..6, k in 1usize..4, seed in any::<u64>()) {
            let p = ModelParams::glorot(f, k, GatHyper { hidden_dim: h, leaky_slope: 0.2 }, seed);
            let q = p.unflatten(&p.flatten()).unwrap();
            prop_assert_eq!(q, p);
        }
    }
}

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use super::SecAggError;

/// Fixed-point bridge from real gradients to integer plaintexts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixedPointCodec {
    pub scale_bits: u32,
    /// Inputs with `|x| >= max_magnitude` are rejected.
    pub max_magnitude: f64,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        FixedPointCodec { scale_bits: 20, max_magnitude: (2f64).powi(40 - 20) }
    }
}

/// Shift that makes every encoded `i64` nonnegative for Paillier.
pub(crate) const PAILLIER_OFFSET: u64 = 1 << 63;

impl FixedPointCodec {
    pub fn scale(&self) -> f64 {
        (2f64).powi(self.scale_bits as i32)
    }

    /// Worst-case per-coordinate rounding error of one encoding.
    pub fn resolution(&self) -> f64 {
        1.0 / self.scale()
    }

    /// `round(x · 2^scale_bits)` per coordinate.
    pub fn encode(&self, v: &[f64]) -> Result<Vec<i64>, SecAggError> {
        let scale = self.scale();
        v.iter()
            .enumerate()
            .map(|(index, &x)| {
                if !x.is_finite() || x.abs() >= self.max_magnitude {
                    return Err(SecAggError::Overflow { index, value: x, max: self.max_magnitude });
                }
                Ok((x * scale).round() as i64)
            })
            .collect()
    }

    pub fn decode(&self, v: &[i64]) -> Vec<f64> {
        let scale = self.scale();
        v.iter().map(|&x| x as f64 / scale).collect()
    }

    /// Two's-complement embedding into ℤ/2⁶⁴.
    pub fn to_ring(v: &[i64]) -> Vec<u64> {
        v.iter().map(|&x| x as u64).collect()
    }

    pub fn decode_ring(&self, v: &[u64]) -> Vec<f64> {
        self.decode(&v.iter().map(|&x| x as i64).collect::<Vec<_>>())
    }

    /// Nonnegative Paillier plaintext `x + 2⁶³`.
    pub fn to_paillier_plaintext(x: i64) -> BigUint {
        BigUint::from((x as u64) ^ PAILLIER_OFFSET)
    }

    /// Decodes a plaintext sum of `contributions` shifted encodings.
    pub fn decode_shifted_sum(&self, sum: &BigUint, contributions: usize) -> f64 {
        let shift = BigUint::from(PAILLIER_OFFSET) * BigUint::from(contributions);
        let value: i128 = if *sum >= shift {
            i128::try_from(sum - &shift).unwrap_or(i128::MAX)
        } else {
            -i128::try_from(&shift - sum).unwrap_or(i128::MAX)
        };
        value as f64 / self.scale()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn encode_examples() {
        let c = FixedPointCodec::default();
        assert_eq!(c.encode(&[0.5, -1.0]).unwrap(), vec![524_288, -1_048_576]);
        assert_eq!(FixedPointCodec::to_ring(&[-1_048_576])[0], (-1_048_576i64) as u64);
        match c.encode(&[0.0, 2e6]) {
            Err(SecAggError::Overflow { index: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(c.encode(&[f64::NAN]).is_err());
        assert!(c.encode(&[-(2f64.powi(20))]).is_err());
    }

    #[test]
    fn round_trip_within_resolution() {
        let c = FixedPointCodec::default();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..10_000).map(|_| rng.random_range(-1000.0..1000.0)).collect();
        let back = c.decode(&c.encode(&xs).unwrap());
        for (x, y) in xs.iter().zip(back) {
            assert!((x - y).abs() <= c.resolution());
        }
    }

    #[test]
    fn shifted_sum_decodes_signed_values() {
        let c = FixedPointCodec::default();
        let enc = c.encode(&[-3.25, 1.0, 0.5]).unwrap();
        let sum: BigUint = enc.iter().map(|&x| FixedPointCodec::to_paillier_plaintext(x)).sum();
        assert!((c.decode_shifted_sum(&sum, 3) + 1.75).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn encoded_sum_decodes_to_sum(x in -1e5f64..1e5, y in -1e5f64..1e5) {
            let c = FixedPointCodec::default();
            let e = c.encode(&[x, y]).unwrap();
            let ring = FixedPointCodec::to_ring(&e);
            let s = c.decode_ring(&[ring[0].wrapping_add(ring[1])])[0];
            prop_assert!((s - (x + y)).abs() <= 2.0 * c.resolution());
        }
    }
}

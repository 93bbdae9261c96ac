//! Additively homomorphic protection of client updates. The server only
//! ever learns the sum of the protected vectors.
//!
//! Two backends share a fixed-point codec: pairwise masking over ℤ/2⁶⁴ and
//! Paillier encryption with a separate key authority.

mod codec;
mod masking;
mod paillier;

pub use codec::FixedPointCodec;
pub use masking::{mask_stream, mask_update, unmask_sum, MaskingContext, PairwiseSecrets, Secret};
pub use paillier::{
    decrypt_aggregate, decode_ciphertexts, encode_ciphertexts, encrypt_vector, paillier_aggregate,
    paillier_keygen, read_ciphertext, write_ciphertext, Ciphertext, PaillierKeypair, PaillierPublicKey,
    PaillierSecretKey,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SecAggError {
    #[error("coordinate {index} = {value} exceeds the codec range ±{max}")]
    Overflow { index: usize, value: f64, max: f64 },
    #[error("no pairwise secret between clients {0} and {1}")]
    MissingSecret(usize, usize),
    #[error("client {0} did not contribute; aggregation aborted")]
    MissingParticipant(usize),
    #[error("unexpected contribution from client {0}")]
    UnexpectedParticipant(usize),
    #[error("vector length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("nothing to aggregate")]
    Empty,
    #[error("unsupported key size {0} (expected 1024 or 2048)")]
    KeySize(u64),
    #[error("prime generation failed after {0} candidates")]
    PrimeGeneration(usize),
    #[error("ciphertext is not a unit modulo n²")]
    InvalidCiphertext,
    #[error("malformed ciphertext encoding: {0}")]
    Wire(String),
}

/// Which protection the clients apply before upload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Plain,
    Masked,
    Paillier,
}

impl Backend {
    pub fn is_protected(self) -> bool {
        !matches!(self, Backend::Plain)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Plain => "plain",
            Backend::Masked => "masked",
            Backend::Paillier => "paillier",
        }
    }
}

impl std::str::FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "plain" => Ok(Backend::Plain),
            "masked" => Ok(Backend::Masked),
            "paillier" => Ok(Backend::Paillier),
            other => Err(format!("unknown backend {other:?} (plain | masked | paillier)")),
        }
    }
}

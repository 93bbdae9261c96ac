//! Pairwise additive masking over ℤ/2⁶⁴.
//!
//! Clients `i < j` share a 256-bit secret. Each round both expand it with
//! ChaCha20 into the same stream `s_ij`; client `i` adds it and client `j`
//! subtracts it, so all masks vanish from the ring sum.

use std::collections::{BTreeMap, BTreeSet};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use super::SecAggError;

pub type Secret = [u8; 32];

/// The pre-distributed secrets of a whole federation.
#[derive(Debug, Clone)]
pub struct PairwiseSecrets {
    secrets: BTreeMap<(usize, usize), Secret>,
}

impl PairwiseSecrets {
    /// Deterministic setup from a master seed. Key agreement is out of scope;
    /// this stands in for a trusted dealer.
    pub fn derive(master_seed: u64, client_ids: &[usize]) -> Self {
        let mut secrets = BTreeMap::new();
        for (a, &i) in client_ids.iter().enumerate() {
            for &j in &client_ids[a + 1..] {
                let (lo, hi) = (i.min(j), i.max(j));
                let mut h = Sha256::new();
                h.update(b"fedgraph/pairwise-secret/v1");
                h.update(master_seed.to_le_bytes());
                h.update((lo as u64).to_le_bytes());
                h.update((hi as u64).to_le_bytes());
                secrets.insert((lo, hi), h.finalize().into());
            }
        }
        PairwiseSecrets { secrets }
    }

    /// The view held by one client for one round.
    pub fn context(&self, client_id: usize, round: u64) -> MaskingContext {
        let pairwise = self
            .secrets
            .iter()
            .filter_map(|(&(lo, hi), s)| match client_id {
                c if c == lo => Some((hi, *s)),
                c if c == hi => Some((lo, *s)),
                _ => None,
            })
            .collect();
        MaskingContext { client_id, round, pairwise_secrets: pairwise }
    }
}

#[derive(Debug, Clone)]
pub struct MaskingContext {
    pub client_id: usize,
    pub round: u64,
    /// Peer id → shared secret.
    pub pairwise_secrets: BTreeMap<usize, Secret>,
}

/// Expands `secret` for `round` into `len` ring elements.
pub fn mask_stream(secret: &Secret, round: u64, len: usize) -> Vec<u64> {
    let mut h = Sha256::new();
    h.update(secret);
    h.update(round.to_le_bytes());
    let mut rng = ChaCha20Rng::from_seed(h.finalize().into());
    (0..len).map(|_| rng.next_u64()).collect()
}

/// `enc + Σ_{j≠i} ±s_ij (mod 2⁶⁴)`, `+` when `i < j`.
pub fn mask_update(enc: &[u64], ctx: &MaskingContext, all_client_ids: &[usize]) -> Result<Vec<u64>, SecAggError> {
    let mut out = enc.to_vec();
    for &peer in all_client_ids {
        if peer == ctx.client_id {
            continue;
        }
        let secret = ctx
            .pairwise_secrets
            .get(&peer)
            .ok_or(SecAggError::MissingSecret(ctx.client_id, peer))?;
        let stream = mask_stream(secret, ctx.round, enc.len());
        if ctx.client_id < peer {
            out.iter_mut().zip(stream).for_each(|(x, s)| *x = x.wrapping_add(s));
        } else {
            out.iter_mut().zip(stream).for_each(|(x, s)| *x = x.wrapping_sub(s));
        }
    }
    Ok(out)
}

/// Ring sum of every roster member's masked vector. Any missing or extra
/// contributor aborts: without all of them the masks do not cancel.
pub fn unmask_sum(masked: &[(usize, Vec<u64>)], roster: &[usize]) -> Result<Vec<u64>, SecAggError> {
    let present: BTreeSet<usize> = masked.iter().map(|(id, _)| *id).collect();
    if let Some(&missing) = roster.iter().find(|id| !present.contains(id)) {
        return Err(SecAggError::MissingParticipant(missing));
    }
    let expected: BTreeSet<usize> = roster.iter().copied().collect();
    if let Some(&(extra, _)) = masked.iter().find(|(id, _)| !expected.contains(id)) {
        return Err(SecAggError::UnexpectedParticipant(extra));
    }
    if masked.len() != expected.len() {
        return Err(SecAggError::UnexpectedParticipant(masked[0].0));
    }
    let len = masked.first().ok_or(SecAggError::Empty)?.1.len();
    let mut sum = vec![0u64; len];
    for (_, v) in masked {
        if v.len() != len {
            return Err(SecAggError::LengthMismatch { expected: len, got: v.len() });
        }
        sum.iter_mut().zip(v).for_each(|(s, x)| *s = s.wrapping_add(*x));
    }
    Ok(sum)
}

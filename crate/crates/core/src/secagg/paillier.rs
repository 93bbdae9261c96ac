//! Paillier encryption with `g = n + 1`.
//!
//! Clients hold only the public key. Decryption belongs to a key authority
//! that is not the aggregation server.

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{Rng, RngCore};

use super::codec::FixedPointCodec;
use super::SecAggError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaillierPublicKey {
    pub n: BigUint,
    pub n_squared: BigUint,
    /// Always `n + 1`.
    pub g: BigUint,
    pub key_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaillierSecretKey {
    pub lambda: BigUint,
    pub mu: BigUint,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaillierKeypair {
    pub public: PaillierPublicKey,
    pub secret: PaillierSecretKey,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext(pub BigUint);

const SMALL_PRIMES: [u32; 54] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107,
    109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193, 197, 199, 211, 223, 227,
    229, 233, 239, 241, 251, 257,
];
const MILLER_RABIN_ROUNDS: usize = 24;
const MAX_PRIME_CANDIDATES: usize = 100_000;

fn random_bits<R: RngCore>(bits: u64, rng: &mut R) -> BigUint {
    let bytes = bits.div_ceil(8) as usize;
    let mut buf = vec![0u8; bytes];
    rng.fill_bytes(&mut buf);
    let excess = bytes as u64 * 8 - bits;
    buf[0] &= 0xFF >> excess;
    BigUint::from_bytes_be(&buf)
}

/// Uniform in `[1, bound)`.
fn random_below<R: RngCore>(bound: &BigUint, rng: &mut R) -> BigUint {
    loop {
        let x = random_bits(bound.bits(), rng);
        if !x.is_zero() && &x < bound {
            return x;
        }
    }
}

fn is_probable_prime<R: RngCore>(n: &BigUint, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    for &p in &SMALL_PRIMES {
        let p = BigUint::from(p);
        if *n == p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    if n.is_even() {
        return *n == two;
    }
    let n_minus_one = n - 1u32;
    let s = n_minus_one.trailing_zeros().unwrap_or(0);
    let d = &n_minus_one >> s;
    let upper = n - 3u32;
    'witness: for _ in 0..MILLER_RABIN_ROUNDS {
        let a = random_below(&upper, rng) + 1u32; // [2, n-2]
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_one {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_one {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

fn random_prime<R: RngCore>(bits: u64, rng: &mut R) -> Result<BigUint, SecAggError> {
    for _ in 0..MAX_PRIME_CANDIDATES {
        let mut candidate = random_bits(bits, rng);
        // Top two bits set so the product has exactly 2·bits bits; odd.
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(bits - 2, true);
        candidate.set_bit(0, true);
        if is_probable_prime(&candidate, rng) {
            return Ok(candidate);
        }
    }
    Err(SecAggError::PrimeGeneration(MAX_PRIME_CANDIDATES))
}

/// Generates a keypair with an exactly `bits`-bit modulus. Deterministic for a
/// seeded `rng`.
pub fn paillier_keygen<R: RngCore>(bits: u64, rng: &mut R) -> Result<PaillierKeypair, SecAggError> {
    if bits != 1024 && bits != 2048 {
        return Err(SecAggError::KeySize(bits));
    }
    loop {
        let p = random_prime(bits / 2, rng)?;
        let q = random_prime(bits / 2, rng)?;
        if p == q {
            continue;
        }
        let n = &p * &q;
        let p1 = &p - 1u32;
        let q1 = &q - 1u32;
        if !n.gcd(&(&p1 * &q1)).is_one() {
            continue;
        }
        let lambda = p1.lcm(&q1);
        // With g = n + 1, L(g^λ mod n²) = λ mod n.
        let Some(mu) = (&lambda % &n).modinv(&n) else { continue };
        let n_squared = &n * &n;
        let g = &n + 1u32;
        return Ok(PaillierKeypair {
            public: PaillierPublicKey { n, n_squared, g, key_bits: bits },
            secret: PaillierSecretKey { lambda, mu },
        });
    }
}

impl PaillierPublicKey {
    /// `(1 + m·n) · r^n mod n²` for fresh `r`.
    pub fn encrypt<R: RngCore>(&self, m: &BigUint, rng: &mut R) -> Ciphertext {
        let r = loop {
            let r = random_below(&self.n, rng);
            if r.gcd(&self.n).is_one() {
                break r;
            }
        };
        let gm = (BigUint::one() + (m % &self.n) * &self.n) % &self.n_squared;
        Ciphertext(gm * r.modpow(&self.n, &self.n_squared) % &self.n_squared)
    }

    /// Homomorphic addition: `Dec(add(a, b)) = Dec(a) + Dec(b) mod n`.
    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Ciphertext {
        Ciphertext(&a.0 * &b.0 % &self.n_squared)
    }

    /// Serialized size of one ciphertext on the wire.
    pub fn ciphertext_wire_len(&self) -> usize {
        4 + (self.n_squared.bits() as usize).div_ceil(8)
    }

    fn check(&self, c: &Ciphertext) -> Result<(), SecAggError> {
        if c.0.is_zero() || c.0 >= self.n_squared || !c.0.gcd(&self.n).is_one() {
            return Err(SecAggError::InvalidCiphertext);
        }
        Ok(())
    }
}

impl PaillierKeypair {
    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint, SecAggError> {
        let pk = &self.public;
        pk.check(c)?;
        let u = c.0.modpow(&self.secret.lambda, &pk.n_squared);
        let l = (u - 1u32) / &pk.n;
        Ok(l * &self.secret.mu % &pk.n)
    }
}

/// Encrypts a fixed-point-encoded vector coordinate by coordinate, each
/// shifted by 2⁶³ into a nonnegative plaintext.
pub fn encrypt_vector<R: Rng>(pk: &PaillierPublicKey, encoded: &[i64], rng: &mut R) -> Vec<Ciphertext> {
    encoded
        .iter()
        .map(|&x| pk.encrypt(&FixedPointCodec::to_paillier_plaintext(x), rng))
        .collect()
}

/// Componentwise ciphertext product, i.e. the encrypted sum.
pub fn paillier_aggregate(vectors: &[Vec<Ciphertext>], pk: &PaillierPublicKey) -> Result<Vec<Ciphertext>, SecAggError> {
    let first = vectors.first().ok_or(SecAggError::Empty)?;
    let len = first.len();
    let mut acc: Vec<BigUint> = vec![BigUint::one(); len];
    for v in vectors {
        if v.len() != len {
            return Err(SecAggError::LengthMismatch { expected: len, got: v.len() });
        }
        for (a, c) in acc.iter_mut().zip(v) {
            *a = &*a * &c.0 % &pk.n_squared;
        }
    }
    Ok(acc.into_iter().map(Ciphertext).collect())
}

/// Key-authority step: decrypts an aggregate of `contributions` shifted
/// encodings back to the real-valued sum.
pub fn decrypt_aggregate(
    agg: &[Ciphertext],
    keypair: &PaillierKeypair,
    codec: &FixedPointCodec,
    contributions: usize,
) -> Result<Vec<f64>, SecAggError> {
    agg.iter()
        .map(|c| Ok(codec.decode_shifted_sum(&keypair.decrypt(c)?, contributions)))
        .collect()
}

/// Appends `u32` big-endian length then the big-endian magnitude.
pub fn write_ciphertext(c: &Ciphertext, out: &mut Vec<u8>) {
    let bytes = c.0.to_bytes_be();
    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(&bytes);
}

/// Largest ciphertext accepted from the wire (a 4096-bit n²).
const MAX_CIPHERTEXT_BYTES: usize = 512;

/// Reads one length-prefixed ciphertext; returns it and the bytes consumed.
pub fn read_ciphertext(bytes: &[u8]) -> Result<(Ciphertext, usize), SecAggError> {
    if bytes.len() < 4 {
        return Err(SecAggError::Wire("truncated length prefix".into()));
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
    if len > MAX_CIPHERTEXT_BYTES {
        return Err(SecAggError::Wire(format!("ciphertext of {len} bytes exceeds limit")));
    }
    let body = bytes
        .get(4..4 + len)
        .ok_or_else(|| SecAggError::Wire("truncated ciphertext body".into()))?;
    Ok((Ciphertext(BigUint::from_bytes_be(body)), 4 + len))
}

pub fn encode_ciphertexts(cs: &[Ciphertext]) -> Vec<u8> {
    let mut out = Vec::new();
    for c in cs {
        write_ciphertext(c, &mut out);
    }
    out
}

/// Decodes ciphertexts until the input is exhausted.
pub fn decode_ciphertexts(mut bytes: &[u8]) -> Result<Vec<Ciphertext>, SecAggError> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (c, used) = read_ciphertext(bytes)?;
        out.push(c);
        bytes = &bytes[used..];
    }
    Ok(out)
}

//! Textbook RSA: key generation, encryption, signatures, and the
//! multiplicative homomorphism of unpadded RSA.
//!
//! NOT semantically secure. There is no padding, so equal plaintexts give
//! equal ciphertexts and ciphertexts are malleable. The malleability is the
//! point here: `E(m1) * E(m2) mod N` decrypts to `m1 * m2 mod N`.

use std::fmt;
use std::io::BufRead;

use num_bigint::{BigInt, BigUint, RandBigInt, Sign};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

/// Miller-Rabin rounds used for every primality decision.
pub const MILLER_RABIN_ROUNDS: usize = 40;

/// Modulus size recommended outside of tests.
pub const DEFAULT_MODULUS_BITS: u64 = 2048;

const PRIME_RETRY_BUDGET: usize = 100_000;

const SMALL_PRIMES: [u32; 25] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
];

#[derive(Debug, Error)]
pub enum CryptoError {
    #[error("modulus must have at least 16 bits, got {0}")]
    ModulusTooSmall(u64),
    #[error("no prime found within the retry budget")]
    PrimeSearchExhausted,
    #[error("invalid key parameters: {0}")]
    InvalidKey(String),
    #[error("message {m} is not below the modulus {n}")]
    MessageOutOfRange { m: BigUint, n: BigUint },
    #[error("ciphertext modulus does not match the key")]
    KeyMismatch,
    #[error("key file line {line}: {msg}")]
    KeyFormat { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKey {
    pub n: BigUint,
    pub e: BigUint,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrivateKey {
    pub n: BigUint,
    pub d: BigUint,
}

#[derive(Clone, PartialEq, Eq)]
pub struct RsaKeyPair {
    pub p: BigUint,
    pub q: BigUint,
    pub n: BigUint,
    pub phi: BigUint,
    pub e: BigUint,
    pub d: BigUint,
}

impl fmt::Debug for RsaKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RsaKeyPair")
            .field("n", &self.n)
            .field("e", &self.e)
            .finish_non_exhaustive()
    }
}

/// An RSA ciphertext (or signature) tagged with the modulus it lives under.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext {
    value: BigUint,
    modulus: BigUint,
}

impl Ciphertext {
    pub fn new(value: BigUint, modulus: BigUint) -> Result<Self, CryptoError> {
        if value >= modulus {
            return Err(CryptoError::MessageOutOfRange { m: value, n: modulus });
        }
        Ok(Self { value, modulus })
    }

    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn modulus(&self) -> &BigUint {
        &self.modulus
    }
}

impl RsaKeyPair {
    /// Builds a key pair from two given primes. With `e = None` the smallest
    /// odd exponent `>= 3` coprime with `phi(N)` is used.
    pub fn from_primes(p: BigUint, q: BigUint, e: Option<BigUint>) -> Result<Self, CryptoError> {
        if p == q {
            return Err(CryptoError::InvalidKey("p and q must differ".into()));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        for x in [&p, &q] {
            if !is_probable_prime(x, MILLER_RABIN_ROUNDS, &mut rng) {
                return Err(CryptoError::InvalidKey(format!("{x} is not prime")));
            }
        }
        let n = &p * &q;
        let phi = (&p - 1u32) * (&q - 1u32);
        let e = match e {
            Some(e) => e,
            None => smallest_public_exponent(&phi).ok_or_else(|| CryptoError::InvalidKey("no valid e".into()))?,
        };
        if e.is_zero() || e >= phi || !e.gcd(&phi).is_one() {
            return Err(CryptoError::InvalidKey(format!("e = {e} is not a unit modulo phi(N)")));
        }
        let d = mod_inverse(&e, &phi).ok_or_else(|| CryptoError::InvalidKey("e has no inverse".into()))?;
        Ok(Self { p, q, n, phi, e, d })
    }

    pub fn public(&self) -> PublicKey {
        PublicKey {
            n: self.n.clone(),
            e: self.e.clone(),
        }
    }

    pub fn private(&self) -> PrivateKey {
        PrivateKey {
            n: self.n.clone(),
            d: self.d.clone(),
        }
    }
}

/// Generates a key pair whose modulus has exactly `bits` bits.
///
/// Each prime has its top two bits set, which pins the bit length of the
/// product. Deterministic for a fixed seed.
pub fn keygen(bits: u64, seed: u64) -> Result<RsaKeyPair, CryptoError> {
    keygen_with_exponent(bits, seed, None)
}

pub fn keygen_with_exponent(bits: u64, seed: u64, e: Option<BigUint>) -> Result<RsaKeyPair, CryptoError> {
    if bits < 16 {
        return Err(CryptoError::ModulusTooSmall(bits));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let p_bits = bits.div_ceil(2);
    let q_bits = bits / 2;
    for _ in 0..PRIME_RETRY_BUDGET {
        let p = random_prime(p_bits, &mut rng)?;
        let q = random_prime(q_bits, &mut rng)?;
        if p == q {
            continue;
        }
        // A caller-fixed e may share a factor with this phi(N); draw again.
        match RsaKeyPair::from_primes(p, q, e.clone()) {
            Ok(k) => {
                debug_assert_eq!(k.n.bits(), bits);
                return Ok(k);
            }
            Err(CryptoError::InvalidKey(_)) => continue,
            Err(other) => return Err(other),
        }
    }
    Err(CryptoError::PrimeSearchExhausted)
}

fn random_prime<R: Rng>(bits: u64, rng: &mut R) -> Result<BigUint, CryptoError> {
    for _ in 0..PRIME_RETRY_BUDGET {
        let mut candidate = rng.gen_biguint(bits);
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(bits - 2, true);
        candidate.set_bit(0, true);
        if is_probable_prime(&candidate, MILLER_RABIN_ROUNDS, rng) {
            return Ok(candidate);
        }
    }
    Err(CryptoError::PrimeSearchExhausted)
}

fn smallest_public_exponent(phi: &BigUint) -> Option<BigUint> {
    let mut e = BigUint::from(3u32);
    while &e < phi {
        if e.gcd(phi).is_one() {
            return Some(e);
        }
        e += 2u32;
    }
    None
}

/// Miller-Rabin with `rounds` random bases.
pub fn is_probable_prime<R: Rng>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    for &sp in &SMALL_PRIMES {
        let sp = BigUint::from(sp);
        if n == &sp {
            return true;
        }
        if (n % &sp).is_zero() {
            return false;
        }
    }
    let n_minus_one = n - 1u32;
    let s = n_minus_one.trailing_zeros().unwrap_or(0);
    let d = &n_minus_one >> s;
    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &n_minus_one);
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

/// Extended Euclid: returns `(g, x, y)` with `a*x + b*y = g = gcd(a, b)`.
pub fn extended_gcd(a: &BigInt, b: &BigInt) -> (BigInt, BigInt, BigInt) {
    let (mut old_r, mut r) = (a.clone(), b.clone());
    let (mut old_s, mut s) = (BigInt::one(), BigInt::zero());
    let (mut old_t, mut t) = (BigInt::zero(), BigInt::one());
    while !r.is_zero() {
        let quotient = &old_r / &r;
        let next_r = &old_r - &quotient * &r;
        old_r = std::mem::replace(&mut r, next_r);
        let next_s = &old_s - &quotient * &s;
        old_s = std::mem::replace(&mut s, next_s);
        let next_t = &old_t - &quotient * &t;
        old_t = std::mem::replace(&mut t, next_t);
    }
    (old_r, old_s, old_t)
}

/// Inverse of `a` modulo `m`, if it exists.
pub fn mod_inverse(a: &BigUint, m: &BigUint) -> Option<BigUint> {
    let a = BigInt::from_biguint(Sign::Plus, a.clone());
    let m = BigInt::from_biguint(Sign::Plus, m.clone());
    let (g, x, _) = extended_gcd(&a, &m);
    if !g.is_one() {
        return None;
    }
    x.mod_floor(&m).to_biguint()
}

/// `m^e mod N`.
pub fn encrypt(m: &BigUint, key: &PublicKey) -> Result<Ciphertext, CryptoError> {
    if m >= &key.n {
        return Err(CryptoError::MessageOutOfRange {
            m: m.clone(),
            n: key.n.clone(),
        });
    }
    Ok(Ciphertext {
        value: m.modpow(&key.e, &key.n),
        modulus: key.n.clone(),
    })
}

/// `c^d mod N`.
pub fn decrypt(c: &Ciphertext, key: &PrivateKey) -> Result<BigUint, CryptoError> {
    if c.modulus != key.n {
        return Err(CryptoError::KeyMismatch);
    }
    Ok(c.value.modpow(&key.d, &key.n))
}

/// Signature `m^d mod N`.
pub fn sign(m: &BigUint, key: &PrivateKey) -> Result<Ciphertext, CryptoError> {
    if m >= &key.n {
        return Err(CryptoError::MessageOutOfRange {
            m: m.clone(),
            n: key.n.clone(),
        });
    }
    Ok(Ciphertext {
        value: m.modpow(&key.d, &key.n),
        modulus: key.n.clone(),
    })
}

/// Accepts iff `sig^e mod N == m`.
pub fn verify(sig: &Ciphertext, m: &BigUint, key: &PublicKey) -> Result<bool, CryptoError> {
    if sig.modulus != key.n {
        return Err(CryptoError::KeyMismatch);
    }
    Ok(&sig.value.modpow(&key.e, &key.n) == m)
}

/// `(c1 * c2) mod N`, which decrypts to `(m1 * m2) mod N`.
pub fn homomorphic_multiply(c1: &Ciphertext, c2: &Ciphertext) -> Result<Ciphertext, CryptoError> {
    if c1.modulus != c2.modulus {
        return Err(CryptoError::KeyMismatch);
    }
    Ok(Ciphertext {
        value: (&c1.value * &c2.value) % &c1.modulus,
        modulus: c1.modulus.clone(),
    })
}

/// Writes `N = ..`, `e = ..` and, unless `public_only`, `d = ..` as decimal
/// integers, one per line.
pub fn write_key<W: std::io::Write>(mut w: W, key: &RsaKeyPair, public_only: bool) -> Result<(), CryptoError> {
    writeln!(w, "N = {}", key.n)?;
    writeln!(w, "e = {}", key.e)?;
    if !public_only {
        writeln!(w, "d = {}", key.d)?;
    }
    Ok(())
}

/// Key file contents: the public part is mandatory, `d` optional.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyFile {
    pub public: PublicKey,
    pub private: Option<PrivateKey>,
}

pub fn read_key<R: BufRead>(r: R) -> Result<KeyFile, CryptoError> {
    let (mut n, mut e, mut d) = (None, None, None);
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| CryptoError::KeyFormat {
            line: i + 1,
            msg: msg.to_string(),
        };
        let (k, v) = line.split_once('=').ok_or_else(|| bad("expected `key = value`"))?;
        let v: BigUint = v.trim().parse().map_err(|_| bad("value is not a decimal integer"))?;
        match k.trim() {
            "N" => n = Some(v),
            "e" => e = Some(v),
            "d" => d = Some(v),
            _ => return Err(bad("unknown field")),
        }
    }
    let missing = |f: &str| CryptoError::KeyFormat {
        line: 0,
        msg: format!("missing field {f}"),
    };
    let n = n.ok_or_else(|| missing("N"))?;
    let e = e.ok_or_else(|| missing("e"))?;
    Ok(KeyFile {
        private: d.map(|d| PrivateKey { n: n.clone(), d }),
        public: PublicKey { n, e },
    })
}

//! Paillier additive homomorphic encryption.
//!
//! Ciphertexts are residues modulo `n²`. Adding plaintexts is multiplying
//! ciphertexts; multiplying a plaintext by a constant `k` is raising the
//! ciphertext to `k`. The generator is fixed to `g = n + 1`, which makes
//! `g^m mod n² = 1 + m·n` and keeps encryption to two modular operations.

use num_bigint::{BigInt, BigUint, RandBigInt, Sign};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::RngCore;

use crate::error::{Error, Result};

/// Supported key sizes for [`keygen`]. Toy keys for exhaustive testing are
/// built through [`KeyPair::from_primes`] instead.
pub const SUPPORTED_KEY_BITS: [u32; 4] = [512, 1024, 2048, 3072];

const MILLER_RABIN_ROUNDS: u32 = 64;
const PRIME_ATTEMPT_LIMIT: u32 = 100_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKey {
    /// Modulus `n = p·q`.
    pub n: BigUint,
    /// Generator, always `n + 1` here.
    pub g: BigUint,
    /// Cached `n²`.
    pub n_squared: BigUint,
    /// Size of `n` in bits.
    pub bit_length: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecretKey {
    pub p: BigUint,
    pub q: BigUint,
    /// `lcm(p−1, q−1)`.
    pub lambda: BigUint,
    /// `L(g^λ mod n²)^{−1} mod n`, precomputed at key generation.
    pub mu: BigUint,
}

#[derive(Debug, Clone)]
pub struct KeyPair {
    pub public: PublicKey,
    pub secret: SecretKey,
}

/// A Paillier ciphertext: a residue in `[0, n²)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext {
    pub value: BigUint,
}

impl PublicKey {
    fn from_n(n: BigUint) -> Self {
        let n_squared = &n * &n;
        let bit_length = n.bits() as u32;
        let g = &n + 1u32;
        PublicKey {
            n,
            g,
            n_squared,
            bit_length,
        }
    }

    /// `L(x) = (x − 1) / n`.
    fn l_function(&self, x: &BigUint) -> BigUint {
        (x - 1u32) / &self.n
    }
}

impl KeyPair {
    /// Build a key pair from explicitly chosen primes. Used for toy keys
    /// where the plaintext space is small enough to test exhaustively.
    pub fn from_primes(p: BigUint, q: BigUint, rng: &mut impl RngCore) -> Result<KeyPair> {
        if p == q {
            return Err(Error::KeyGen("p and q must differ".into()));
        }
        if !is_probable_prime(&p, MILLER_RABIN_ROUNDS, rng)
            || !is_probable_prime(&q, MILLER_RABIN_ROUNDS, rng)
        {
            return Err(Error::KeyGen("p and q must be prime".into()));
        }
        let n = &p * &q;
        let phi = (&p - 1u32) * (&q - 1u32);
        if n.gcd(&phi) != BigUint::one() {
            return Err(Error::KeyGen("gcd(pq, (p-1)(q-1)) != 1".into()));
        }
        let public = PublicKey::from_n(n.clone());
        let lambda = (&p - 1u32).lcm(&(&q - 1u32));
        // g = n+1, so L(g^λ mod n²) = λ mod n; kept in the general form anyway.
        let g_lambda = public.g.modpow(&lambda, &public.n_squared);
        let mu = mod_inverse(&public.l_function(&g_lambda), &n)?;
        Ok(KeyPair {
            public,
            secret: SecretKey { p, q, lambda, mu },
        })
    }
}

/// Generate a fresh key pair. `bit_length` is the size of `n` and must be one
/// of [`SUPPORTED_KEY_BITS`].
pub fn keygen(bit_length: u32, rng: &mut impl RngCore) -> Result<KeyPair> {
    if !SUPPORTED_KEY_BITS.contains(&bit_length) {
        return Err(Error::Config(format!(
            "unsupported key size {bit_length}, expected one of {SUPPORTED_KEY_BITS:?}"
        )));
    }
    let half = (bit_length / 2) as u64;
    loop {
        let p = generate_prime(half, rng)?;
        let q = generate_prime(half, rng)?;
        if p == q {
            continue;
        }
        let n = &p * &q;
        let phi = (&p - 1u32) * (&q - 1u32);
        if n.gcd(&phi) != BigUint::one() {
            continue;
        }
        debug_assert_eq!(n.bits(), bit_length as u64);
        return KeyPair::from_primes(p, q, rng);
    }
}

/// Random prime with the top two bits set, so the product of two such primes
/// has exactly `2·bits` bits.
fn generate_prime(bits: u64, rng: &mut impl RngCore) -> Result<BigUint> {
    let top_bits = (BigUint::one() << (bits - 1)) | (BigUint::one() << (bits - 2));
    for _ in 0..PRIME_ATTEMPT_LIMIT {
        let mut candidate = rng.gen_biguint(bits);
        candidate |= &top_bits;
        candidate |= BigUint::one();
        if divisible_by_small_prime(&candidate) {
            continue;
        }
        if is_probable_prime(&candidate, MILLER_RABIN_ROUNDS, rng) {
            return Ok(candidate);
        }
    }
    Err(Error::KeyGen(format!(
        "no {bits}-bit prime found within {PRIME_ATTEMPT_LIMIT} attempts"
    )))
}

fn small_primes() -> &'static [u32] {
    use std::sync::OnceLock;
    static PRIMES: OnceLock<Vec<u32>> = OnceLock::new();
    PRIMES.get_or_init(|| {
        let limit = 2048usize;
        let mut sieve = vec![true; limit];
        let mut primes = Vec::new();
        for i in 2..limit {
            if sieve[i] {
                primes.push(i as u32);
                for j in (i * i..limit).step_by(i) {
                    sieve[j] = false;
                }
            }
        }
        primes
    })
}

fn divisible_by_small_prime(n: &BigUint) -> bool {
    small_primes()
        .iter()
        .any(|&p| (n % p).is_zero() && n != &BigUint::from(p))
}

/// Miller–Rabin with random bases.
pub fn is_probable_prime(n: &BigUint, rounds: u32, rng: &mut impl RngCore) -> bool {
    let two = BigUint::from(2u32);
    let three = BigUint::from(3u32);
    if *n < two {
        return false;
    }
    if *n == two || *n == three {
        return true;
    }
    if (n % 2u32).is_zero() {
        return false;
    }
    let n_minus_one = n - 1u32;
    let s = n_minus_one.trailing_zeros().unwrap_or(0);
    let d = &n_minus_one >> s;
    'outer: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &n_minus_one);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_one {
            continue;
        }
        for _ in 0..s.saturating_sub(1) {
            x = x.modpow(&two, n);
            if x == n_minus_one {
                continue 'outer;
            }
        }
        return false;
    }
    true
}

/// Multiplicative inverse of `a` modulo `n`.
pub fn mod_inverse(a: &BigUint, n: &BigUint) -> Result<BigUint> {
    let a = a % n;
    let ext = BigInt::from_biguint(Sign::Plus, a).extended_gcd(&BigInt::from_biguint(
        Sign::Plus,
        n.clone(),
    ));
    if !ext.gcd.is_one() {
        return Err(Error::NonInvertible);
    }
    let n_int = BigInt::from_biguint(Sign::Plus, n.clone());
    let x = ((ext.x % &n_int) + &n_int) % &n_int;
    Ok(x.to_biguint().expect("reduced to non-negative"))
}

/// Uniform element of `Z*_n`.
fn sample_unit(n: &BigUint, rng: &mut impl RngCore) -> BigUint {
    loop {
        let r = rng.gen_biguint_below(n);
        if !r.is_zero() && r.gcd(n).is_one() {
            return r;
        }
    }
}

/// Encrypt `m ∈ [0, n)` under `pk` with fresh randomness.
pub fn encrypt(m: &BigUint, pk: &PublicKey, rng: &mut impl RngCore) -> Result<Ciphertext> {
    if m >= &pk.n {
        return Err(Error::Domain(format!(
            "plaintext must be below n ({} bits)",
            pk.bit_length
        )));
    }
    let r = sample_unit(&pk.n, rng);
    // g^m mod n² = 1 + m·n for g = n+1.
    let g_m = (BigUint::one() + m * &pk.n) % &pk.n_squared;
    let r_n = r.modpow(&pk.n, &pk.n_squared);
    Ok(Ciphertext {
        value: (g_m * r_n) % &pk.n_squared,
    })
}

/// Fresh encryption of zero: `r^n mod n²`.
pub fn encrypt_zero(pk: &PublicKey, rng: &mut impl RngCore) -> Ciphertext {
    let r = sample_unit(&pk.n, rng);
    Ciphertext {
        value: r.modpow(&pk.n, &pk.n_squared),
    }
}

/// Decrypt to a residue in `[0, n)`.
pub fn decrypt(c: &Ciphertext, sk: &SecretKey, pk: &PublicKey) -> Result<BigUint> {
    if c.value >= pk.n_squared {
        return Err(Error::Domain("ciphertext must be below n²".into()));
    }
    let x = c.value.modpow(&sk.lambda, &pk.n_squared);
    Ok((pk.l_function(&x) * &sk.mu) % &pk.n)
}

/// Homomorphic addition: decrypts to `(m1 + m2) mod n`.
pub fn hadd(c1: &Ciphertext, c2: &Ciphertext, pk: &PublicKey) -> Ciphertext {
    Ciphertext {
        value: (&c1.value * &c2.value) % &pk.n_squared,
    }
}

/// Plaintext multiplication by a signed constant: decrypts to `(m·k) mod n`.
///
/// `k = 0` returns a fresh encryption of zero so the result is a well-formed
/// ciphertext; that is the only case consuming randomness.
pub fn hmul_plain(
    c: &Ciphertext,
    k: i128,
    pk: &PublicKey,
    rng: &mut impl RngCore,
) -> Result<Ciphertext> {
    if k == 0 {
        return Ok(encrypt_zero(pk, rng));
    }
    let mag = BigUint::from(k.unsigned_abs());
    if mag >= pk.n {
        return Err(Error::Domain("|k| must be below n".into()));
    }
    let powered = c.value.modpow(&mag, &pk.n_squared);
    if k > 0 {
        Ok(Ciphertext { value: powered })
    } else {
        // c^{-|k|}: group inverse instead of exponent n−|k|, same plaintext.
        Ok(Ciphertext {
            value: mod_inverse(&powered, &pk.n_squared)?,
        })
    }
}

/// Plaintext multiplication by a non-zero residue `e ∈ [1, n)`; used for the
/// unblinding exponent `τ⁻¹` which never fits a machine word.
pub fn hmul_plain_residue(c: &Ciphertext, e: &BigUint, pk: &PublicKey) -> Result<Ciphertext> {
    if e.is_zero() || e >= &pk.n {
        return Err(Error::Domain("residue exponent must be in [1, n)".into()));
    }
    Ok(Ciphertext {
        value: c.value.modpow(e, &pk.n_squared),
    })
}

/// Homomorphic subtraction: decrypts to `(m1 − m2) mod n`.
pub fn hsub(c1: &Ciphertext, c2: &Ciphertext, pk: &PublicKey) -> Result<Ciphertext> {
    let inv = mod_inverse(&c2.value, &pk.n_squared)?;
    Ok(Ciphertext {
        value: (&c1.value * inv) % &pk.n_squared,
    })
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

const KEY_MAGIC: &[u8; 4] = b"PPKY";
const KEY_VERSION: u16 = 1;
const KIND_PUBLIC: u8 = 0;
const KIND_SECRET: u8 = 1;

fn put_bigint(out: &mut Vec<u8>, v: &BigUint) {
    let bytes = v.to_bytes_be();
    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(&bytes);
}

fn get_bigint(input: &[u8], pos: &mut usize) -> Result<BigUint> {
    if input.len() < *pos + 4 {
        return Err(Error::Format("truncated integer length".into()));
    }
    let len = u32::from_be_bytes(input[*pos..*pos + 4].try_into().unwrap()) as usize;
    *pos += 4;
    if input.len() < *pos + len {
        return Err(Error::Format("truncated integer body".into()));
    }
    let v = BigUint::from_bytes_be(&input[*pos..*pos + len]);
    *pos += len;
    Ok(v)
}

impl Ciphertext {
    /// Minimal-length big-endian bytes, length-prefixed (u32 big-endian).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_bigint(&mut out, &self.value);
        out
    }

    pub fn from_bytes(input: &[u8]) -> Result<(Ciphertext, usize)> {
        let mut pos = 0;
        let value = get_bigint(input, &mut pos)?;
        Ok((Ciphertext { value }, pos))
    }
}

impl PublicKey {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(KEY_MAGIC);
        out.extend_from_slice(&KEY_VERSION.to_be_bytes());
        out.push(KIND_PUBLIC);
        put_bigint(&mut out, &self.n);
        put_bigint(&mut out, &self.g);
        out
    }

    pub fn from_bytes(input: &[u8]) -> Result<PublicKey> {
        let mut pos = check_key_header(input, KIND_PUBLIC)?;
        let n = get_bigint(input, &mut pos)?;
        let g = get_bigint(input, &mut pos)?;
        let pk = PublicKey::from_n(n);
        if pk.g != g {
            return Err(Error::Format("generator is not n+1".into()));
        }
        Ok(pk)
    }
}

impl SecretKey {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(KEY_MAGIC);
        out.extend_from_slice(&KEY_VERSION.to_be_bytes());
        out.push(KIND_SECRET);
        put_bigint(&mut out, &self.p);
        put_bigint(&mut out, &self.q);
        out
    }

    pub fn from_bytes(input: &[u8], rng: &mut impl RngCore) -> Result<KeyPair> {
        let mut pos = check_key_header(input, KIND_SECRET)?;
        let p = get_bigint(input, &mut pos)?;
        let q = get_bigint(input, &mut pos)?;
        KeyPair::from_primes(p, q, rng)
    }
}

fn check_key_header(input: &[u8], kind: u8) -> Result<usize> {
    if input.len() < 7 || &input[0..4] != KEY_MAGIC {
        return Err(Error::Format("bad key file magic".into()));
    }
    let version = u16::from_be_bytes(input[4..6].try_into().unwrap());
    if version != KEY_VERSION {
        return Err(Error::Format(format!("unsupported key version {version}")));
    }
    if input[6] != kind {
        return Err(Error::Format("wrong key kind".into()));
    }
    Ok(7)
}

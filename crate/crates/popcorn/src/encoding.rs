//! Signed and fixed-point encodings into `Z_n`, plus shaped tensors.
//!
//! Negative integers map to the upper half of the residue ring. The codec
//! carries two magnitude bounds: `plain_bound` on encoded values and
//! `blind_bound` on blinding factors, with `plain_bound · blind_bound < n/2`
//! so a blinded product never wraps and its residue still reveals its sign
//! to the key holder.

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::ToPrimitive;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::paillier::{self, Ciphertext, PublicKey, SecretKey};

pub const DEFAULT_PLAIN_BOUND: u128 = 1 << 96;
pub const DEFAULT_BLIND_BOUND: u128 = 1 << 64;

#[derive(Debug, Clone)]
pub struct SignedCodec {
    pub n: BigUint,
    pub half_n: BigUint,
    /// Maximum absolute encoded plaintext magnitude.
    pub plain_bound: u128,
    /// Maximum absolute blinding-factor magnitude.
    pub blind_bound: u128,
}

impl SignedCodec {
    pub fn new(n: &BigUint, plain_bound: u128, blind_bound: u128) -> Result<SignedCodec> {
        if plain_bound == 0 || blind_bound == 0 {
            return Err(Error::Config("bounds must be at least 1".into()));
        }
        let product = BigUint::from(plain_bound) * BigUint::from(blind_bound) * 2u32;
        if product >= *n {
            return Err(Error::Config(
                "plain_bound · blind_bound must stay below n/2".into(),
            ));
        }
        Ok(SignedCodec {
            n: n.clone(),
            half_n: n / 2u32,
            plain_bound,
            blind_bound,
        })
    }

    pub fn with_defaults(pk: &PublicKey) -> Result<SignedCodec> {
        SignedCodec::new(&pk.n, DEFAULT_PLAIN_BOUND, DEFAULT_BLIND_BOUND)
    }

    /// `x ≥ 0 → x`, `x < 0 → n + x`.
    pub fn encode_signed(&self, x: i128) -> Result<BigUint> {
        if x.unsigned_abs() > self.plain_bound {
            return Err(Error::BoundOverflow(format!(
                "|{x}| exceeds plain bound {}",
                self.plain_bound
            )));
        }
        Ok(encode_residue(x, &self.n))
    }

    /// Inverse of [`encode_signed`]; values above `⌊n/2⌋` are negative.
    pub fn decode_signed(&self, r: &BigUint) -> Result<BigInt> {
        if r >= &self.n {
            return Err(Error::Domain("residue must be below n".into()));
        }
        if r <= &self.half_n {
            Ok(BigInt::from_biguint(Sign::Plus, r.clone()))
        } else {
            Ok(BigInt::from_biguint(Sign::Plus, r.clone())
                - BigInt::from_biguint(Sign::Plus, self.n.clone()))
        }
    }

    pub fn decode_signed_i64(&self, r: &BigUint) -> Result<i64> {
        self.decode_signed(r)?
            .to_i64()
            .ok_or_else(|| Error::BoundOverflow("decoded value exceeds i64".into()))
    }
}

/// Residue encoding without a bound check; for exponents and internal use.
pub fn encode_residue(x: i128, n: &BigUint) -> BigUint {
    if x >= 0 {
        BigUint::from(x as u128) % n
    } else {
        n - (BigUint::from(x.unsigned_abs()) % n)
    }
}

/// Round half away from zero of `x · 2^f`, checked against the codec bound.
pub fn quantize_fixed(x: f64, scale_exp: i16, codec: &SignedCodec) -> Result<i64> {
    let scaled = x * (2f64).powi(scale_exp as i32);
    let rounded = scaled.round(); // f64::round is half-away-from-zero
    if !rounded.is_finite() || rounded.abs() as u128 > codec.plain_bound {
        return Err(Error::BoundOverflow(format!(
            "{x} at scale 2^{scale_exp} exceeds plain bound"
        )));
    }
    Ok(rounded as i64)
}

pub fn dequantize(v: i64, scale_exp: i16) -> f64 {
    v as f64 / (2f64).powi(scale_exp as i32)
}

// ---------------------------------------------------------------------------
// Tensors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Shape {
    Flat(usize),
    /// Height × width × channels, cells stored row-major in (h, w, c) order.
    Hwc { h: usize, w: usize, c: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match self {
            Shape::Flat(n) => *n,
            Shape::Hwc { h, w, c } => h * w * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<u32> {
        match self {
            Shape::Flat(n) => vec![*n as u32],
            Shape::Hwc { h, w, c } => vec![*h as u32, *w as u32, *c as u32],
        }
    }

    pub fn from_dims(dims: &[u32]) -> Result<Shape> {
        match dims {
            [n] => Ok(Shape::Flat(*n as usize)),
            [h, w, c] => Ok(Shape::Hwc {
                h: *h as usize,
                w: *w as usize,
                c: *c as usize,
            }),
            _ => Err(Error::Format(format!("unsupported rank {}", dims.len()))),
        }
    }

    pub fn index(&self, row: usize, col: usize, chan: usize) -> usize {
        match self {
            Shape::Flat(_) => panic!("index on flat shape"),
            Shape::Hwc { w, c, .. } => (row * w + col) * c + chan,
        }
    }
}

/// Plaintext mirror of [`EncTensor`]: signed integers plus scale metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlainTensor {
    pub shape: Shape,
    pub values: Vec<i64>,
    /// Plaintext = integer / 2^scale_exp.
    pub scale_exp: i16,
}

impl PlainTensor {
    pub fn new(shape: Shape, values: Vec<i64>, scale_exp: i16) -> Result<PlainTensor> {
        if shape.len() != values.len() {
            return Err(Error::Shape(format!(
                "shape holds {} cells but {} values given",
                shape.len(),
                values.len()
            )));
        }
        Ok(PlainTensor {
            shape,
            values,
            scale_exp,
        })
    }

    pub fn bound(&self) -> u128 {
        self.values
            .iter()
            .map(|v| v.unsigned_abs() as u128)
            .max()
            .unwrap_or(0)
    }
}

/// Shaped vector of ciphertexts with scale and a certified magnitude bound.
#[derive(Debug, Clone)]
pub struct EncTensor {
    pub shape: Shape,
    pub cells: Vec<Ciphertext>,
    pub scale_exp: i16,
    /// Certified maximum |integer value| over all cells.
    pub bound: u128,
}

impl EncTensor {
    pub fn new(shape: Shape, cells: Vec<Ciphertext>, scale_exp: i16, bound: u128) -> Result<Self> {
        if shape.len() != cells.len() {
            return Err(Error::Shape(format!(
                "shape holds {} cells but {} ciphertexts given",
                shape.len(),
                cells.len()
            )));
        }
        Ok(EncTensor {
            shape,
            cells,
            scale_exp,
            bound,
        })
    }
}

/// Element-wise encryption preserving shape, scale and bound.
pub fn encrypt_tensor(
    t: &PlainTensor,
    codec: &SignedCodec,
    pk: &PublicKey,
    rng: &mut impl RngCore,
) -> Result<EncTensor> {
    let bound = t.bound();
    if bound > codec.plain_bound {
        return Err(Error::BoundOverflow(
            "tensor magnitude exceeds plain bound".into(),
        ));
    }
    // Per-cell seeds drawn up front so encryption can run in parallel while
    // staying deterministic for a given rng state.
    let seeds: Vec<[u8; 32]> = (0..t.values.len())
        .map(|_| {
            let mut s = [0u8; 32];
            rng.fill_bytes(&mut s);
            s
        })
        .collect();
    let cells = t
        .values
        .par_iter()
        .zip(seeds)
        .map(|(&v, seed)| {
            let mut cell_rng = ChaCha20Rng::from_seed(seed);
            paillier::encrypt(&codec.encode_signed(v as i128)?, pk, &mut cell_rng)
        })
        .collect::<Result<Vec<_>>>()?;
    EncTensor::new(t.shape.clone(), cells, t.scale_exp, bound)
}

/// Element-wise decryption; fails if a decoded value falls outside i64.
pub fn decrypt_tensor(
    t: &EncTensor,
    codec: &SignedCodec,
    sk: &SecretKey,
    pk: &PublicKey,
) -> Result<PlainTensor> {
    let values = t
        .cells
        .par_iter()
        .map(|c| codec.decode_signed_i64(&paillier::decrypt(c, sk, pk)?))
        .collect::<Result<Vec<_>>>()?;
    PlainTensor::new(t.shape.clone(), values, t.scale_exp)
}

// ---------------------------------------------------------------------------
// Tensor file format
// ---------------------------------------------------------------------------

const TENSOR_MAGIC: &[u8; 4] = b"PPTN";
const TENSOR_VERSION: u16 = 1;

pub fn write_tensor(w: &mut impl Write, t: &PlainTensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_be_bytes())?;
    let dims = t.shape.dims();
    w.write_all(&[dims.len() as u8])?;
    for d in &dims {
        w.write_all(&d.to_be_bytes())?;
    }
    w.write_all(&t.scale_exp.to_be_bytes())?;
    for v in &t.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<PlainTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    let mut buf2 = [0u8; 2];
    r.read_exact(&mut buf2)?;
    if u16::from_be_bytes(buf2) != TENSOR_VERSION {
        return Err(Error::Format("unsupported tensor version".into()));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)?;
    let mut dims = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        dims.push(u32::from_be_bytes(buf4));
    }
    let shape = Shape::from_dims(&dims)?;
    r.read_exact(&mut buf2)?;
    let scale_exp = i16::from_be_bytes(buf2);
    let mut values = Vec::with_capacity(shape.len());
    for _ in 0..shape.len() {
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        values.push(i64::from_le_bytes(buf8));
    }
    PlainTensor::new(shape, values, scale_exp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paillier::KeyPair;
    use num_traits::{FromPrimitive, Signed, Zero};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn toy_codec() -> SignedCodec {
        SignedCodec::new(&BigUint::from(143u32), 5, 14).unwrap()
    }

    #[test]
    fn signed_encoding_examples() {
        let codec = toy_codec();
        assert_eq!(codec.encode_signed(-5).unwrap(), BigUint::from(138u32));
        assert_eq!(codec.encode_signed(0).unwrap(), BigUint::zero());
        assert_eq!(
            codec.decode_signed(&BigUint::from(138u32)).unwrap(),
            BigInt::from(-5)
        );
        assert_eq!(
            codec.decode_signed(&BigUint::from(71u32)).unwrap(),
            BigInt::from(71)
        );
        // 72 is the first residue past ⌊143/2⌋ and decodes to −71
        assert_eq!(
            codec.decode_signed(&BigUint::from(72u32)).unwrap(),
            BigInt::from(-71)
        );
        assert!(codec.encode_signed(6).is_err());
    }

    #[test]
    fn codec_rejects_wraparound_risk() {
        // 5 · 15 · 2 > 143
        assert!(SignedCodec::new(&BigUint::from(143u32), 5, 15).is_err());
        assert!(SignedCodec::new(&BigUint::from(143u32), 5, 0).is_err());
    }

    #[test]
    fn wraparound_freedom_exhaustive_toy() {
        let codec = toy_codec();
        let n = BigUint::from(143u32);
        for x in -5i128..=5 {
            for tau in -14i128..=14 {
                if tau == 0 {
                    continue;
                }
                let blinded = (codec.encode_signed(x).unwrap() * encode_residue(tau, &n)) % &n;
                let decoded = codec.decode_signed(&blinded).unwrap();
                assert_eq!(decoded, BigInt::from(x * tau), "x={x} tau={tau}");
                // sign fidelity
                assert_eq!(decoded.is_positive(), x * tau > 0);
            }
        }
    }

    #[test]
    fn quantize_examples() {
        let codec = SignedCodec::new(&BigUint::from(1u128 << 100), 1 << 40, 1 << 10).unwrap();
        assert_eq!(quantize_fixed(1.5, 4, &codec).unwrap(), 24);
        assert_eq!(quantize_fixed(-0.03125, 5, &codec).unwrap(), -1);
        assert_eq!(quantize_fixed(0.5, 0, &codec).unwrap(), 1); // half away from zero
        assert_eq!(quantize_fixed(-0.5, 0, &codec).unwrap(), -1);
        assert!(quantize_fixed(f64::MAX, 8, &codec).is_err());
    }

    #[test]
    fn tensor_round_trip_with_negatives() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let kp = KeyPair::from_primes(BigUint::from(11u32), BigUint::from(13u32), &mut rng).unwrap();
        let codec = toy_codec();
        let t = PlainTensor::new(Shape::Flat(6), vec![-5, -1, 0, 1, 3, 5], 0).unwrap();
        let enc = encrypt_tensor(&t, &codec, &kp.public, &mut rng).unwrap();
        assert_eq!(enc.bound, 5);
        let back = decrypt_tensor(&enc, &codec, &kp.secret, &kp.public).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn tensor_shape_preserved() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let kp = KeyPair::from_primes(BigUint::from(11u32), BigUint::from(13u32), &mut rng).unwrap();
        let codec = toy_codec();
        let shape = Shape::Hwc { h: 5, w: 5, c: 3 };
        let t = PlainTensor::new(shape.clone(), vec![1; 75], 8).unwrap();
        let enc = encrypt_tensor(&t, &codec, &kp.public, &mut rng).unwrap();
        assert_eq!(enc.shape, shape);
        assert_eq!(enc.scale_exp, 8);
        let back = decrypt_tensor(&enc, &codec, &kp.secret, &kp.public).unwrap();
        assert_eq!(back.shape, shape);
    }

    #[test]
    fn tensor_file_round_trip() {
        let t = PlainTensor::new(
            Shape::Hwc { h: 2, w: 3, c: 1 },
            vec![-4, 0, 9, i64::MIN, i64::MAX, 7],
            -3,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        #[test]
        fn dequantize_inverts_quantize_within_half_ulp(x in -1000.0f64..1000.0, f in 0i16..12) {
            let codec = SignedCodec::new(&BigUint::from(1u128 << 100), 1 << 40, 1 << 10).unwrap();
            let q = quantize_fixed(x, f, &codec).unwrap();
            let back = dequantize(q, f);
            let tol = (2f64).powi(-(f as i32) - 1);
            prop_assert!((back - x).abs() <= tol, "x={x} back={back} tol={tol}");
        }

        #[test]
        fn signed_round_trip(x in -5i128..=5) {
            let codec = toy_codec();
            let r = codec.encode_signed(x).unwrap();
            prop_assert_eq!(codec.decode_signed(&r).unwrap(), BigInt::from_i128(x).unwrap());
        }
    }
}

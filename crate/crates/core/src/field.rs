//! Prime-field arithmetic and the fixed-point codec that maps network
//! quantities (weights, activations, logits) into field elements.
//!
//! Elements are plain residues; the modulus lives in [`FieldParams`] so that
//! protocol code can run over the production 61-bit Mersenne prime and the
//! statistical tests can run the same code over a small prime such as 8191.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 2^61 - 1.
pub const MERSENNE_61: u64 = (1 << 61) - 1;

/// Serialized width of one element, in bytes.
pub const ELEMENT_BYTES: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("modulus {0} is not a prime below 2^63")]
    InvalidModulus(u64),
    #[error("value {value} is outside the encodable range [-{bound}, {bound}]")]
    OutOfRange { value: f64, bound: f64 },
    #[error("fixed-point bound {bound} at scale 2^{scale_bits} does not fit below p/2")]
    CodecTooWide { bound: f64, scale_bits: u32 },
    #[error("byte buffer of length {0} is not a whole number of field elements")]
    Misaligned(usize),
}

/// A residue in `[0, p)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FieldElement(u64);

impl FieldElement {
    pub const ZERO: FieldElement = FieldElement(0);
    pub const ONE: FieldElement = FieldElement(1);

    #[inline]
    pub fn value(self) -> u64 {
        self.0
    }

    #[inline]
    pub fn to_le_bytes(self) -> [u8; ELEMENT_BYTES] {
        self.0.to_le_bytes()
    }
}

impl std::fmt::Display for FieldElement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Prime modulus `p` and the element width `n` used for serialization and
/// storage accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldParams {
    p: u64,
    bits: u32,
}

impl Default for FieldParams {
    fn default() -> Self {
        Self::mersenne61()
    }
}

impl FieldParams {
    pub const fn mersenne61() -> Self {
        FieldParams { p: MERSENNE_61, bits: 64 }
    }

    /// A field over an arbitrary prime below 2^63. Primality is checked by
    /// deterministic Miller-Rabin.
    pub fn new(p: u64) -> Result<Self, FieldError> {
        if !(2..1 << 63).contains(&p) || !is_prime(p) {
            return Err(FieldError::InvalidModulus(p));
        }
        Ok(FieldParams { p, bits: 64 })
    }

    #[inline]
    pub fn modulus(&self) -> u64 {
        self.p
    }

    /// Serialized element width in bits.
    #[inline]
    pub fn element_bits(&self) -> u32 {
        self.bits
    }

    /// Reduces an arbitrary `u64` into the field.
    #[inline]
    pub fn element(&self, v: u64) -> FieldElement {
        FieldElement(v % self.p)
    }

    /// Wraps an already-reduced residue. Debug builds assert the invariant.
    #[inline]
    pub fn element_unchecked(&self, v: u64) -> FieldElement {
        debug_assert!(v < self.p);
        FieldElement(v)
    }

    #[inline]
    pub fn add(&self, a: FieldElement, b: FieldElement) -> FieldElement {
        // a, b < p < 2^63 so the sum cannot overflow.
        let s = a.0 + b.0;
        FieldElement(if s >= self.p { s - self.p } else { s })
    }

    #[inline]
    pub fn sub(&self, a: FieldElement, b: FieldElement) -> FieldElement {
        if a.0 >= b.0 {
            FieldElement(a.0 - b.0)
        } else {
            FieldElement(self.p - (b.0 - a.0))
        }
    }

    #[inline]
    pub fn neg(&self, a: FieldElement) -> FieldElement {
        if a.0 == 0 {
            a
        } else {
            FieldElement(self.p - a.0)
        }
    }

    #[inline]
    pub fn mul(&self, a: FieldElement, b: FieldElement) -> FieldElement {
        let wide = a.0 as u128 * b.0 as u128;
        FieldElement(self.reduce_wide(wide))
    }

    /// Reduces a double-width product. Uses the Mersenne shortcut when the
    /// modulus is 2^61 - 1.
    #[inline]
    pub fn reduce_wide(&self, wide: u128) -> u64 {
        if self.p == MERSENNE_61 {
            // Two folds bring any u128 below 2^61 + 2^7.
            let m = MERSENNE_61 as u128;
            let folded = (wide & m) + (wide >> 61);
            let lo2 = (folded & m) as u64;
            let hi2 = (folded >> 61) as u64;
            let mut r = lo2 + hi2;
            if r >= MERSENNE_61 {
                r -= MERSENNE_61;
            }
            r
        } else {
            (wide % self.p as u128) as u64
        }
    }

    /// Inner product `sum_i a_i * b_i mod p` with a single reduction per
    /// bounded block of terms.
    pub fn dot(&self, a: &[FieldElement], b: &[FieldElement]) -> FieldElement {
        debug_assert_eq!(a.len(), b.len());
        // Each product is < 2^126 only for p near 2^63; for the 61-bit prime a
        // product is < 2^122, so 32 products fit in a u128 without overflow.
        let block = if self.p <= MERSENNE_61 { 32 } else { 1 };
        let mut acc = 0u64;
        for (ca, cb) in a.chunks(block).zip(b.chunks(block)) {
            let mut wide = 0u128;
            for (x, y) in ca.iter().zip(cb) {
                wide += x.0 as u128 * y.0 as u128;
            }
            acc = self.add(FieldElement(acc), FieldElement(self.reduce_wide(wide))).0;
        }
        FieldElement(acc)
    }

    pub fn pow(&self, base: FieldElement, mut exp: u64) -> FieldElement {
        let mut result = FieldElement::ONE;
        let mut b = base;
        while exp > 0 {
            if exp & 1 == 1 {
                result = self.mul(result, b);
            }
            b = self.mul(b, b);
            exp >>= 1;
        }
        result
    }

    /// Embeds a signed integer: negatives map to `p - |x|`.
    #[inline]
    pub fn from_signed(&self, x: i64) -> FieldElement {
        let p = self.p as i128;
        let r = (x as i128).rem_euclid(p);
        FieldElement(r as u64)
    }

    /// Embeds a signed 128-bit integer.
    #[inline]
    pub fn from_signed_wide(&self, x: i128) -> FieldElement {
        FieldElement(x.rem_euclid(self.p as i128) as u64)
    }

    /// Centered lift: `a` if `a < p/2`, otherwise `a - p`.
    #[inline]
    pub fn to_signed(&self, a: FieldElement) -> i64 {
        if a.0 <= self.p / 2 {
            a.0 as i64
        } else {
            a.0 as i64 - self.p as i64
        }
    }

    /// Decodes a little-endian byte buffer, rejecting non-canonical residues
    /// by reducing them (the wire never carries them from a correct peer).
    pub fn elements_from_le_bytes(&self, bytes: &[u8]) -> Result<Vec<FieldElement>, FieldError> {
        if !bytes.len().is_multiple_of(ELEMENT_BYTES) {
            return Err(FieldError::Misaligned(bytes.len()));
        }
        Ok(bytes
            .chunks_exact(ELEMENT_BYTES)
            .map(|c| self.element(u64::from_le_bytes(c.try_into().expect("chunk of 8"))))
            .collect())
    }
}

pub fn elements_to_le_bytes(elems: &[FieldElement]) -> Vec<u8> {
    let mut out = Vec::with_capacity(elems.len() * ELEMENT_BYTES);
    for e in elems {
        out.extend_from_slice(&e.to_le_bytes());
    }
    out
}

fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for small in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        if n.is_multiple_of(small) {
            return n == small;
        }
    }
    let mut d = n - 1;
    let mut r = 0;
    while d.is_multiple_of(2) {
        d /= 2;
        r += 1;
    }
    let mulmod = |a: u64, b: u64| ((a as u128 * b as u128) % n as u128) as u64;
    let powmod = |mut b: u64, mut e: u64| {
        let mut acc = 1u64;
        while e > 0 {
            if e & 1 == 1 {
                acc = mulmod(acc, b);
            }
            b = mulmod(b, b);
            e >>= 1;
        }
        acc
    };
    // This witness set is deterministic for all n < 3.3e24.
    'witness: for a in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let mut x = powmod(a, d);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..r {
            x = mulmod(x, x);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Fixed-point encoding of reals with `scale_bits` fractional bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointCodec {
    field: FieldParams,
    scale_bits: u32,
    bound: f64,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        FixedPointCodec {
            field: FieldParams::mersenne61(),
            scale_bits: Self::DEFAULT_SCALE_BITS,
            bound: Self::DEFAULT_BOUND,
        }
    }
}

impl FixedPointCodec {
    pub const DEFAULT_SCALE_BITS: u32 = 12;
    pub const DEFAULT_BOUND: f64 = (1u64 << 24) as f64;

    pub fn new(field: FieldParams, scale_bits: u32, bound: f64) -> Result<Self, FieldError> {
        let half_p = (field.modulus() / 2) as f64;
        if !(bound >= 0.0) || scale_bits > 62 || bound * (scale_bits as f64).exp2() >= half_p {
            return Err(FieldError::CodecTooWide { bound, scale_bits });
        }
        Ok(FixedPointCodec { field, scale_bits, bound })
    }

    pub fn field(&self) -> &FieldParams {
        &self.field
    }

    pub fn scale_bits(&self) -> u32 {
        self.scale_bits
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// `round(x * 2^f)` as a signed integer, without the bound check.
    pub fn to_fixed_int(&self, x: f64) -> i64 {
        (x * (self.scale_bits as f64).exp2()).round() as i64
    }

    pub fn encode(&self, x: f64) -> Result<FieldElement, FieldError> {
        self.encode_at(x, self.scale_bits)
    }

    /// Encodes at an explicit scale (products of encoded values live at
    /// multiples of the base scale). The magnitude bound applies to `x`.
    pub fn encode_at(&self, x: f64, scale_bits: u32) -> Result<FieldElement, FieldError> {
        if !(x.abs() <= self.bound) {
            return Err(FieldError::OutOfRange { value: x, bound: self.bound });
        }
        let scaled = (x * (scale_bits as f64).exp2()).round();
        Ok(self.field.from_signed_wide(scaled as i128))
    }

    pub fn decode(&self, a: FieldElement) -> f64 {
        self.decode_at(a, self.scale_bits)
    }

    pub fn decode_at(&self, a: FieldElement, scale_bits: u32) -> f64 {
        self.field.to_signed(a) as f64 / (scale_bits as f64).exp2()
    }
}

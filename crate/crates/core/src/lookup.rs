//! Masked lookup-table activations.
//!
//! Offline, a dealer picks a secret offset `s`, shares it, and fills a
//! shared table of `2^k` slots so that the slot for activation input `v`
//! holds a fresh sharing of `F(v)`. Online, both parties truncate their
//! shares locally, add their share of `s`, and open `s + x_trunc` in a
//! single exchange. The opened value is uniform and indexes the table.
//!
//! Slots are addressed by `((s + v) mod p) mod 2^k`. The dealer only
//! accepts offsets for which `s + v` never wraps past `p` across the whole
//! domain `[-2^(k-1), 2^(k-1))`, so the `2^k` slots are a permutation of the
//! domain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldElement, FieldParams, FixedPointCodec, ELEMENT_BYTES};
use crate::sharing::{random_element, AdditiveShare, PartyRole};
use crate::transport::{Channel, Tag, TransportError};

/// Largest supported activation precision.
pub const MAX_K: u32 = 16;

#[derive(Debug, Error)]
pub enum LookupError {
    #[error("table {0} was already consumed")]
    TableReused(u64),
    #[error("{shares} input shares but {tables} tables")]
    LengthMismatch { shares: usize, tables: usize },
    #[error("invalid quantization spec: {0}")]
    InvalidQuantSpec(String),
    #[error("table {table_id} has precision {table_k}, layer expects {spec_k}")]
    PrecisionMismatch { table_id: u64, table_k: u32, spec_k: u32 },
    #[error("share owned by {got}, expected {expected}")]
    WrongOwner { expected: PartyRole, got: PartyRole },
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Single-operand activation functions a table can hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationFn {
    Relu,
    Identity,
    /// `clamp(x / 4 + 1/2, 0, 1)`, the piecewise-linear sigmoid.
    ClippedSigmoid,
    Sigmoid,
    Tanh,
}

impl ActivationFn {
    pub const ALL: [ActivationFn; 5] = [
        ActivationFn::Relu,
        ActivationFn::Identity,
        ActivationFn::ClippedSigmoid,
        ActivationFn::Sigmoid,
        ActivationFn::Tanh,
    ];

    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationFn::Relu => x.max(0.0),
            ActivationFn::Identity => x,
            ActivationFn::ClippedSigmoid => (x / 4.0 + 0.5).clamp(0.0, 1.0),
            ActivationFn::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            ActivationFn::Tanh => x.tanh(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationFn::Relu => "relu",
            ActivationFn::Identity => "identity",
            ActivationFn::ClippedSigmoid => "clipped_sigmoid",
            ActivationFn::Sigmoid => "sigmoid",
            ActivationFn::Tanh => "tanh",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }
}

/// Per-activation quantization: table precision `k`, public truncation
/// divisor `d = 2^trunc_bits` and the function.
///
/// `input_scale_bits` is the fixed-point scale of the values entering the
/// activation. `None` means the codec's own scale, in which case a table
/// entry for truncated input `v` is exactly `F(v * d)` at that scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub k: u32,
    pub trunc_bits: u32,
    pub function: ActivationFn,
    pub input_scale_bits: Option<u32>,
}

impl QuantSpec {
    pub fn new(function: ActivationFn, k: u32, trunc_bits: u32) -> Result<Self, LookupError> {
        let spec = QuantSpec { k, trunc_bits, function, input_scale_bits: None };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_input_scale(mut self, bits: u32) -> Self {
        self.input_scale_bits = Some(bits);
        self
    }

    pub fn validate(&self) -> Result<(), LookupError> {
        if !(1..=MAX_K).contains(&self.k) {
            return Err(LookupError::InvalidQuantSpec(format!("k = {} outside 1..={MAX_K}", self.k)));
        }
        if self.trunc_bits > 62 {
            return Err(LookupError::InvalidQuantSpec(format!("divisor 2^{}", self.trunc_bits)));
        }
        Ok(())
    }

    pub fn divisor(&self) -> u64 {
        1u64 << self.trunc_bits
    }

    pub fn table_len(&self) -> usize {
        1usize << self.k
    }
}

/// Signed `k`-bit activation domain `[-2^(k-1), 2^(k-1))`.
pub fn domain(k: u32) -> std::ops::Range<i64> {
    let half = 1i64 << (k - 1);
    -half..half
}

/// Wraps an integer into the signed `k`-bit domain (two's complement).
pub fn wrap_to_domain(x: i64, k: u32) -> i64 {
    let m = 1i64 << k;
    let half = m >> 1;
    (x + half).rem_euclid(m) - half
}

/// `floor(x / d)` on the centered integer.
pub fn floor_div(x: i64, d: u64) -> i64 {
    x.div_euclid(d as i64)
}

/// Reference output for truncated input `v`: `F` evaluated at the
/// de-truncated value `v * d`, re-encoded at the codec's scale.
pub fn quantized_activation(v: i64, spec: &QuantSpec, codec: &FixedPointCodec) -> FieldElement {
    let field = codec.field();
    let out_bits = codec.scale_bits() as i64;
    let in_bits = spec.input_scale_bits.unwrap_or(codec.scale_bits()) as i64;
    // value(real) = v * 2^trunc / 2^in ; output integer = F(value) * 2^out
    let shift = spec.trunc_bits as i64 + out_bits - in_bits;
    match spec.function {
        ActivationFn::Relu | ActivationFn::Identity => {
            let v = if spec.function == ActivationFn::Relu { v.max(0) } else { v };
            field.from_signed_wide(shift_round(v as i128, shift))
        }
        f => {
            let real = v as f64 * (spec.trunc_bits as f64 - in_bits as f64).exp2();
            let out = (f.apply(real) * (out_bits as f64).exp2()).round();
            field.from_signed_wide(out as i128)
        }
    }
}

/// `round(x * 2^shift)`, halves away from zero, matching `f64::round`.
fn shift_round(x: i128, shift: i64) -> i128 {
    if shift >= 0 {
        x << shift
    } else {
        let s = (-shift) as u32;
        let half = 1i128 << (s - 1);
        let mag = (x.abs() + half) >> s;
        if x < 0 {
            -mag
        } else {
            mag
        }
    }
}

/// The plaintext function table for one spec, indexed by `v + 2^(k-1)`.
#[derive(Debug, Clone)]
pub struct PlainTable {
    pub spec: QuantSpec,
    values: Vec<FieldElement>,
}

impl PlainTable {
    pub fn new(spec: QuantSpec, codec: &FixedPointCodec) -> Result<Self, LookupError> {
        spec.validate()?;
        let values = domain(spec.k).map(|v| quantized_activation(v, &spec, codec)).collect();
        Ok(PlainTable { spec, values })
    }

    pub fn get(&self, v: i64) -> FieldElement {
        self.values[(v + (1i64 << (self.spec.k - 1))) as usize]
    }
}

/// Local share truncation by a public divisor. The client floors its share;
/// the server computes `p - floor((p - [x]_1) / d)`. The reconstruction is
/// `floor(x/d)` or `floor(x/d) + 1` except with probability about `|x|/p`.
pub fn secure_truncate_local(share: AdditiveShare, d: u64, field: &FieldParams) -> AdditiveShare {
    assert!(d >= 1, "truncation divisor must be positive");
    let p = field.modulus();
    let v = share.value.value();
    let out = match share.owner {
        PartyRole::Client => v / d,
        PartyRole::Server => {
            let t = (p - v) / d;
            // v = 0 gives p - floor(p/d), still a valid residue for d > 1
            if t == 0 {
                0
            } else {
                p - t
            }
        }
    };
    AdditiveShare::new(share.owner, field.element_unchecked(out))
}

/// One party's half of a single-use masked table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TabulaTable {
    pub table_id: u64,
    pub k: u32,
    pub mask_share: AdditiveShare,
    pub entries: Vec<FieldElement>,
    consumed: bool,
}

impl TabulaTable {
    pub fn new(table_id: u64, k: u32, mask_share: AdditiveShare, entries: Vec<FieldElement>) -> Self {
        debug_assert_eq!(entries.len(), 1 << k);
        TabulaTable { table_id, k, mask_share, entries, consumed: false }
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn owner(&self) -> PartyRole {
        self.mask_share.owner
    }

    /// Entry selected by an opened masked value.
    pub fn select(&self, opened: FieldElement) -> FieldElement {
        self.entries[(opened.value() & ((1u64 << self.k) - 1)) as usize]
    }

    pub fn storage_bytes(&self) -> usize {
        self.entries.len() * ELEMENT_BYTES
    }
}

/// Samples a table offset satisfying the no-wrap condition
/// `2^(k-1) <= s <= p - 2^(k-1)`.
pub fn sample_offset<R: Rng + ?Sized>(k: u32, field: &FieldParams, rng: &mut R) -> FieldElement {
    let half = 1u64 << (k - 1);
    assert!(field.modulus() > 2 * half, "field too small for a 2^{k}-entry table");
    loop {
        let s = random_element(field, rng);
        if s.value() >= half && s.value() <= field.modulus() - half {
            return s;
        }
    }
}

/// Dealer: one fresh table pair for a single activation call.
pub fn dealer_make_table<R: Rng + ?Sized>(
    plain: &PlainTable,
    field: &FieldParams,
    table_id: u64,
    rng: &mut R,
) -> (TabulaTable, TabulaTable) {
    let k = plain.spec.k;
    let size = 1usize << k;
    let mask = (size - 1) as u64;
    let s = sample_offset(k, field, rng);
    let s_client = random_element(field, rng);
    let s_server = field.sub(s, s_client);

    let mut client = vec![FieldElement::ZERO; size];
    let mut server = vec![FieldElement::ZERO; size];
    for v in domain(k) {
        // no-wrap guarantees s + v lies in [0, p)
        let slot = ((s.value() as i64 + v) as u64 & mask) as usize;
        let r = random_element(field, rng);
        client[slot] = r;
        server[slot] = field.sub(plain.get(v), r);
    }
    (
        TabulaTable::new(table_id, k, AdditiveShare::new(PartyRole::Client, s_client), client),
        TabulaTable::new(table_id, k, AdditiveShare::new(PartyRole::Server, s_server), server),
    )
}

/// Dealer: `count` independent table pairs with ids `first_id..`. Table `j`
/// draws from its own ChaCha stream, so the output depends only on `seed`
/// and not on how the work is scheduled.
pub fn dealer_make_tables(
    plain: &PlainTable,
    field: &FieldParams,
    count: usize,
    first_id: u64,
    seed: [u8; 32],
) -> (Vec<TabulaTable>, Vec<TabulaTable>) {
    let make = |j: usize| {
        let mut rng = ChaCha20Rng::from_seed(seed);
        rng.set_stream(j as u64);
        dealer_make_table(plain, field, first_id + j as u64, &mut rng)
    };
    #[cfg(feature = "parallel")]
    let pairs: Vec<_> = {
        use rayon::prelude::*;
        (0..count).into_par_iter().map(make).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let pairs: Vec<_> = (0..count).map(make).collect();
    pairs.into_iter().unzip()
}

/// How activation inputs are truncated online.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationMode {
    /// The local protocol, with its inherent +1 jitter.
    #[default]
    Probabilistic,
    /// Test-only: opens the inputs in an extra round and truncates exactly.
    /// Leaks the activation inputs to both parties.
    ExactForTesting,
}

/// Online lookup for one activation layer, batched into a single exchange.
///
/// Returns this party's shares of the activation outputs. Every table is
/// marked consumed; a table that was already consumed fails the call before
/// anything is sent.
pub fn lookup_layer(
    shares: &[AdditiveShare],
    tables: &mut [TabulaTable],
    spec: &QuantSpec,
    mode: TruncationMode,
    field: &FieldParams,
    channel: &mut Channel,
) -> Result<Vec<AdditiveShare>, LookupError> {
    if shares.len() != tables.len() {
        return Err(LookupError::LengthMismatch { shares: shares.len(), tables: tables.len() });
    }
    let Some(first) = shares.first() else {
        // Still a protocol step for the peer: keep both sides in lockstep.
        channel.exchange(Tag::ActReveal, &[])?;
        return Ok(Vec::new());
    };
    let role = first.owner;
    for (s, t) in shares.iter().zip(tables.iter()) {
        if s.owner != role || t.owner() != role {
            return Err(LookupError::WrongOwner {
                expected: role,
                got: if s.owner != role { s.owner } else { t.owner() },
            });
        }
        if t.consumed {
            return Err(LookupError::TableReused(t.table_id));
        }
        if t.k != spec.k {
            return Err(LookupError::PrecisionMismatch { table_id: t.table_id, table_k: t.k, spec_k: spec.k });
        }
    }
    for t in tables.iter_mut() {
        t.consumed = true;
    }

    let truncated: Vec<FieldElement> = match mode {
        TruncationMode::Probabilistic => {
            shares.iter().map(|&s| secure_truncate_local(s, spec.divisor(), field).value).collect()
        }
        TruncationMode::ExactForTesting => {
            let mine: Vec<_> = shares.iter().map(|s| s.value).collect();
            let theirs = channel.exchange_elements(Tag::ActReveal, &mine, field)?;
            mine.iter()
                .zip(&theirs)
                .map(|(&a, &b)| {
                    let x = field.to_signed(field.add(a, b));
                    match role {
                        PartyRole::Client => field.from_signed(floor_div(x, spec.divisor())),
                        PartyRole::Server => FieldElement::ZERO,
                    }
                })
                .collect()
        }
    };

    let masked: Vec<FieldElement> =
        truncated.iter().zip(tables.iter()).map(|(&x, t)| field.add(x, t.mask_share.value)).collect();
    let theirs = channel.exchange_elements(Tag::ActReveal, &masked, field)?;
    if theirs.len() != masked.len() {
        return Err(TransportError::MalformedFrame(format!(
            "peer opened {} activations, expected {}",
            theirs.len(),
            masked.len()
        ))
        .into());
    }
    Ok(masked
        .iter()
        .zip(&theirs)
        .zip(tables.iter())
        .map(|((&a, &b), t)| AdditiveShare::new(role, t.select(field.add(a, b))))
        .collect())
}

/// Per-party table storage in bytes: `2^k * N_a * n / 8` with `n = 64`.
pub fn table_storage_bytes(k: u32, n_activations: u64) -> u64 {
    (1u64 << k) * n_activations * ELEMENT_BYTES as u64
}

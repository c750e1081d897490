//! Two-party additive secret sharing: `x = [x]_0 + [x]_1 mod p`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldElement, FieldParams};

/// The two protocol parties. The client is party 0 and holds the input;
/// the server is party 1 and holds the model weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PartyRole {
    Client,
    Server,
}

impl PartyRole {
    pub fn index(self) -> u8 {
        match self {
            PartyRole::Client => 0,
            PartyRole::Server => 1,
        }
    }

    pub fn from_index(i: u8) -> Option<Self> {
        match i {
            0 => Some(PartyRole::Client),
            1 => Some(PartyRole::Server),
            _ => None,
        }
    }

    pub fn peer(self) -> Self {
        match self {
            PartyRole::Client => PartyRole::Server,
            PartyRole::Server => PartyRole::Client,
        }
    }
}

impl std::fmt::Display for PartyRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PartyRole::Client => f.write_str("client"),
            PartyRole::Server => f.write_str("server"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ShareError {
    #[error("both shares belong to the {0}")]
    RoleMismatch(PartyRole),
}

/// One party's additive share of a field element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AdditiveShare {
    pub owner: PartyRole,
    pub value: FieldElement,
}

impl AdditiveShare {
    pub fn new(owner: PartyRole, value: FieldElement) -> Self {
        AdditiveShare { owner, value }
    }
}

/// Uniform element of `[0, p)`.
#[inline]
pub fn random_element<R: Rng + ?Sized>(field: &FieldParams, rng: &mut R) -> FieldElement {
    field.element_unchecked(rng.gen_range(0..field.modulus()))
}

/// Splits `x` with a uniformly random client share.
pub fn share<R: Rng + ?Sized>(x: FieldElement, field: &FieldParams, rng: &mut R) -> (AdditiveShare, AdditiveShare) {
    share_with_mask(x, random_element(field, rng), field)
}

/// Splits `x` with a caller-chosen client share.
pub fn share_with_mask(
    x: FieldElement,
    client_part: FieldElement,
    field: &FieldParams,
) -> (AdditiveShare, AdditiveShare) {
    (
        AdditiveShare::new(PartyRole::Client, client_part),
        AdditiveShare::new(PartyRole::Server, field.sub(x, client_part)),
    )
}

/// Recombines the two halves. Order does not matter, ownership does.
pub fn reconstruct(a: AdditiveShare, b: AdditiveShare, field: &FieldParams) -> Result<FieldElement, ShareError> {
    if a.owner == b.owner {
        return Err(ShareError::RoleMismatch(a.owner));
    }
    Ok(field.add(a.value, b.value))
}

pub fn add_shares(a: AdditiveShare, b: AdditiveShare, field: &FieldParams) -> AdditiveShare {
    debug_assert_eq!(a.owner, b.owner, "local addition needs shares held by one party");
    AdditiveShare::new(a.owner, field.add(a.value, b.value))
}

/// Adds a public constant. Only the client's share absorbs it; the server's
/// share passes through unchanged.
pub fn add_public(s: AdditiveShare, c: FieldElement, field: &FieldParams) -> AdditiveShare {
    match s.owner {
        PartyRole::Client => AdditiveShare::new(s.owner, field.add(s.value, c)),
        PartyRole::Server => s,
    }
}

pub fn mul_public(s: AdditiveShare, c: FieldElement, field: &FieldParams) -> AdditiveShare {
    AdditiveShare::new(s.owner, field.mul(s.value, c))
}

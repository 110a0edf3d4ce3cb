//! Hash-seeded Gaussian draws.
//!
//! Every random quantity of the simulator is a pure function of the salt, a
//! tag naming its role and a payload, so repeated queries see identical
//! noise without any stored state.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TAG_THRESHOLD: &[u8] = b"threshold";
pub const TAG_STATIC: &[u8] = b"static";
pub const TAG_DYNAMIC: &[u8] = b"dynamic";
pub const TAG_NO_CONDITIONS: &[u8] = b"no-conditions";

pub const THRESHOLD_MEAN: f64 = 4.0;
pub const THRESHOLD_STD: f64 = 0.5;

/// The secret salt of one system instance.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct Salt(Vec<u8>);

impl Salt {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self> {
        let bytes = bytes.into();
        if bytes.is_empty() {
            return Err(Error::InvalidParameter("salt must be nonempty".into()));
        }
        Ok(Salt(bytes))
    }

    /// `label ∥ master (LE) ∥ index (LE)`; injective in `(master, index)`
    /// for a fixed label.
    pub fn derive(label: &str, master: u64, index: u64) -> Self {
        let mut bytes = Vec::with_capacity(label.len() + 16);
        bytes.extend_from_slice(label.as_bytes());
        bytes.extend_from_slice(&master.to_le_bytes());
        bytes.extend_from_slice(&index.to_le_bytes());
        Salt(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl TryFrom<Vec<u8>> for Salt {
    type Error = Error;

    fn try_from(bytes: Vec<u8>) -> Result<Self> {
        Salt::new(bytes)
    }
}

impl From<Salt> for Vec<u8> {
    fn from(salt: Salt) -> Self {
        salt.0
    }
}

/// `N(mu, sigma^2)` draw from `SHA-256(salt ∥ 0x00 ∥ tag ∥ 0x00 ∥ payload)`:
/// the first two little-endian `u64` words feed a Box–Muller transform.
pub fn seeded_gaussian(salt: &Salt, tag: &[u8], payload: &[u8], mu: f64, sigma: f64) -> f64 {
    let mut hasher = Sha256::new();
    hasher.update(salt.as_bytes());
    hasher.update([0u8]);
    hasher.update(tag);
    hasher.update([0u8]);
    hasher.update(payload);
    let digest = hasher.finalize();
    let word = |i: usize| {
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[i * 8..i * 8 + 8]);
        u64::from_le_bytes(b)
    };
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    // u1 in (0, 1] keeps the logarithm finite
    let u1 = ((word(0) >> 11) + 1) as f64 * SCALE;
    let u2 = (word(1) >> 11) as f64 * SCALE;
    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos();
    mu + sigma * z
}

/// Little-endian concatenation of the ids in ascending order.
pub fn userset_bytes(userset: &[u64]) -> Vec<u8> {
    let mut ids = userset.to_vec();
    if !ids.windows(2).all(|w| w[0] <= w[1]) {
        ids.sort_unstable();
    }
    ids.iter().flat_map(|id| id.to_le_bytes()).collect()
}

/// Suppression threshold `T ~ N(4, 0.5^2)` for a userset.
pub fn noisy_threshold(salt: &Salt, userset: &[u64]) -> f64 {
    seeded_gaussian(
        salt,
        TAG_THRESHOLD,
        &userset_bytes(userset),
        THRESHOLD_MEAN,
        THRESHOLD_STD,
    )
}

/// Userset summary mixed into dynamic noise seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UsersetDigest {
    /// XOR of all ids.
    Xor(u64),
    /// Minimum id, maximum id and count.
    Stats { min: u64, max: u64, count: u64 },
}

impl UsersetDigest {
    pub fn xor(userset: &[u64]) -> Self {
        UsersetDigest::Xor(userset.iter().fold(0, |acc, id| acc ^ id))
    }

    pub fn stats(userset: &[u64]) -> Self {
        UsersetDigest::Stats {
            min: userset.iter().copied().min().unwrap_or(0),
            max: userset.iter().copied().max().unwrap_or(0),
            count: userset.len() as u64,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match *self {
            UsersetDigest::Xor(x) => x.to_le_bytes().to_vec(),
            UsersetDigest::Stats { min, max, count } => [min, max, count]
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        }
    }
}

/// Static and dynamic `N(0, 1)` noise for one serialized condition.
pub fn condition_noise(salt: &Salt, condition: &[u8], digest: &UsersetDigest) -> (f64, f64) {
    let stat = seeded_gaussian(salt, TAG_STATIC, condition, 0.0, 1.0);
    let mut payload = condition.to_vec();
    payload.extend(digest.to_bytes());
    let dynamic = seeded_gaussian(salt, TAG_DYNAMIC, &payload, 0.0, 1.0);
    (stat, dynamic)
}

/// The single static/dynamic pair given to a query without conditions.
pub fn no_condition_noise(salt: &Salt, digest: &UsersetDigest) -> (f64, f64) {
    let stat = seeded_gaussian(salt, TAG_NO_CONDITIONS, &[], 0.0, 1.0);
    let dynamic = seeded_gaussian(salt, TAG_NO_CONDITIONS, &digest.to_bytes(), 0.0, 1.0);
    (stat, dynamic)
}

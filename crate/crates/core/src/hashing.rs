//! Content digests and seeded random streams.
//!
//! Every random draw in the harness comes from a ChaCha stream keyed by a
//! SHA-256 digest of its inputs, so a draw depends only on what it is about
//! (an instance id, a seed, ...) and never on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Digest of the canonical JSON form of `value`.
///
/// Struct fields serialize in declaration order and all maps in this crate are
/// `BTreeMap`s, so the encoding is stable.
pub fn json_digest<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("in-memory values always serialize");
    sha256_hex(bytes)
}

/// A random stream keyed by a domain tag and a list of parts.
///
/// Parts are length-prefixed before hashing so `("ab", "c")` and `("a", "bc")`
/// produce different streams.
pub fn seeded_rng(domain: &str, parts: &[&[u8]]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update((domain.len() as u64).to_le_bytes());
    hasher.update(domain.as_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

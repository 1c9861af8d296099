//! Deterministic 64-bit identifiers derived from sha256.

use sha2::{Digest, Sha256};

/// Hashes a domain label plus a list of words into a nonzero 64-bit id.
pub(crate) fn derive_id(domain: &str, words: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update((domain.len() as u64).to_le_bytes());
    h.update(domain.as_bytes());
    for w in words {
        h.update(w.to_le_bytes());
    }
    let out = h.finalize();
    let id = u64::from_le_bytes(out[..8].try_into().unwrap());
    if id == 0 {
        1
    } else {
        id
    }
}

/// Digest of an arbitrary byte string, folded to 64 bits.
pub(crate) fn digest_bytes(bytes: &[u8]) -> u64 {
    let out = Sha256::digest(bytes);
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

//! Content hashing used for image refs, case ids and cache keys.
//!
//! Every ref is SHA-256 truncated to 128 bits and rendered as 32 lowercase
//! hex characters.

use sha2::{Digest, Sha256};

pub const REF_BYTES: usize = 16;

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Truncated SHA-256 of `bytes` as lowercase hex.
pub fn content_ref(bytes: &[u8]) -> String {
    hex::encode(&sha256(bytes)[..REF_BYTES])
}

/// Big-endian u64 from the first eight bytes of the SHA-256 of `bytes`.
pub fn seed_from_bytes(bytes: &[u8]) -> u64 {
    let digest = sha256(bytes);
    u64::from_be_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Big-endian u64 from the first eight bytes (16 hex chars) of a ref.
pub fn seed_from_ref(hex_ref: &str) -> Option<u64> {
    let head = hex_ref.get(..16)?;
    u64::from_str_radix(head, 16).ok()
}

pub fn is_ref(s: &str) -> bool {
    s.len() == REF_BYTES * 2 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

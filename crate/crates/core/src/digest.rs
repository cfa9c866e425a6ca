//! SHA-256 helpers used for bundle hashes, prompt hashes and cache keys.

use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Incremental hasher that length-prefixes every part, so that
/// `["ab", "c"]` and `["a", "bc"]` hash differently.
#[derive(Default)]
pub struct FramedHasher(Sha256);

impl FramedHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn part(&mut self, bytes: &[u8]) -> &mut Self {
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(bytes);
        self
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

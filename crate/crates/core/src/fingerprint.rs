//! Content hashes used to stamp artifacts with the configuration that produced them.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// SHA-256 of the compact JSON encoding of `value`, hex encoded.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(bytes_hash(&bytes))
}

pub fn bytes_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bytes_hash(&bytes))
}

/// Shortened hash for file names and log lines.
pub fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

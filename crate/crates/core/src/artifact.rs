//! Versioned JSON files shared by every persisted artifact.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Implemented by every artifact that is written to disk.
pub trait Versioned {
    const KIND: &'static str;
    const VERSION: u32;
    fn version(&self) -> u32;
}

pub fn to_json_bytes<T: Serialize>(value: &T, what: &'static str) -> Result<Vec<u8>> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|source| Error::Json { what, source })?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_json<T: Serialize + Versioned>(value: &T, path: &Path) -> Result<()> {
    let bytes = to_json_bytes(value, T::KIND)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn from_json_bytes<T: DeserializeOwned + Versioned>(bytes: &[u8]) -> Result<T> {
    // Check the version before the full decode so old files fail with a
    // version error rather than a field error.
    #[derive(serde::Deserialize)]
    struct Header {
        version: u32,
    }
    let header: Header = serde_json::from_slice(bytes).map_err(|source| Error::Json {
        what: T::KIND,
        source,
    })?;
    if header.version != T::VERSION {
        return Err(Error::Version {
            what: T::KIND,
            found: header.version,
            expected: T::VERSION,
        });
    }
    let value: T = serde_json::from_slice(bytes).map_err(|source| Error::Json {
        what: T::KIND,
        source,
    })?;
    Ok(value)
}

pub fn read_json<T: DeserializeOwned + Versioned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_json_bytes(&bytes)
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A sub-seed for the stream identified by `parts`.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

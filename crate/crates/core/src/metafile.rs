//! Small metadata files (manifests, current-pointers, options, role files)
//! stored as several full local copies.
//!
//! Each copy is `[crc32 LE of payload][payload]`. Copy 0 lives at `name`,
//! copy i at `name.copy{i}`. Reads try copies in order and return the first
//! that verifies; any copy that fails or disagrees is rewritten from it.

use std::io;
use std::sync::Arc;

use thiserror::Error;

use crate::checksum::crc32;
use crate::fault::StorageEnv;

pub const DEFAULT_COPIES: usize = 3;

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("every copy of metadata file {name} failed its checksum")]
    Fatal { name: String },
    #[error("metadata file {name} does not exist")]
    Missing { name: String },
    #[error("metadata i/o on {name}: {source}")]
    Io {
        name: String,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct MetaFiles {
    env: Arc<StorageEnv>,
    copies: usize,
}

pub fn copy_name(name: &str, i: usize) -> String {
    if i == 0 {
        name.to_string()
    } else {
        format!("{name}.copy{i}")
    }
}

pub fn encode(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 4);
    out.extend_from_slice(&crc32(payload).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

pub fn decode(buf: &[u8]) -> Option<&[u8]> {
    let (head, payload) = buf.split_at_checked(4)?;
    let crc = u32::from_le_bytes(head.try_into().ok()?);
    (crc32(payload) == crc).then_some(payload)
}

impl MetaFiles {
    pub fn new(env: Arc<StorageEnv>) -> Self {
        Self::with_copies(env, DEFAULT_COPIES)
    }

    pub fn with_copies(env: Arc<StorageEnv>, copies: usize) -> Self {
        assert!(copies >= 1, "need at least one copy");
        Self { env, copies }
    }

    pub fn copies(&self) -> usize {
        self.copies
    }

    pub fn copy_names(&self, name: &str) -> Vec<String> {
        (0..self.copies).map(|i| copy_name(name, i)).collect()
    }

    pub fn exists(&self, name: &str) -> bool {
        self.copy_names(name).iter().any(|n| self.env.exists(n))
    }

    pub fn write(&self, name: &str, payload: &[u8]) -> Result<(), MetaError> {
        let buf = encode(payload);
        for copy in self.copy_names(name) {
            self.env.write(&copy, &buf).map_err(|source| MetaError::Io { name: copy.clone(), source })?;
        }
        Ok(())
    }

    /// Returns the first verifying copy and heals the others.
    pub fn read(&self, name: &str) -> Result<Vec<u8>, MetaError> {
        let names = self.copy_names(name);
        let mut raw: Vec<Option<Vec<u8>>> = Vec::with_capacity(names.len());
        let mut good = None;
        for (i, copy) in names.iter().enumerate() {
            let buf = match self.env.read_all(copy) {
                Ok(b) => Some(b),
                Err(e) if e.kind() == io::ErrorKind::NotFound => None,
                Err(source) => return Err(MetaError::Io { name: copy.clone(), source }),
            };
            if good.is_none() {
                if let Some(payload) = buf.as_deref().and_then(decode) {
                    good = Some((i, payload.to_vec()));
                }
            }
            raw.push(buf);
        }
        if raw.iter().all(Option::is_none) {
            return Err(MetaError::Missing { name: name.to_string() });
        }
        let Some((good_idx, payload)) = good else {
            return Err(MetaError::Fatal { name: name.to_string() });
        };
        let encoded = encode(&payload);
        for (i, buf) in raw.iter().enumerate() {
            if i != good_idx && buf.as_deref() != Some(&encoded[..]) {
                // Best effort: a failed heal leaves the copy for the next read.
                let _ = self.env.write(&names[i], &encoded);
            }
        }
        Ok(payload)
    }

    pub fn delete(&self, name: &str) {
        for copy in self.copy_names(name) {
            let _ = self.env.delete(&copy);
        }
    }
}

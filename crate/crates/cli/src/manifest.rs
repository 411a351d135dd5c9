//! Run manifests and git-style content hashes.
//!
//! A manifest is a `key=value` text file. Keys used:
//! `command`, `timestamp`, `seed`, `run_dir`, `config.<setting>`,
//! `input.<setting>` (hash of the referenced file), `output.<file>` and
//! `parent.<file>` (hash of the checkpoint a trained file started from).

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::CliError;

/// SHA-256 over `blob <len>\0<bytes>`, as git does for object ids.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(blob_hash(&bytes))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn push(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.push((key.into(), value.into()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Entries whose key starts with `prefix`, with the prefix removed.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a str)> {
        self.entries
            .iter()
            .filter_map(move |(k, v)| k.strip_prefix(prefix).map(|s| (s, v.as_str())))
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut f = fs::File::create(path)?;
        for (k, v) in &self.entries {
            if v.contains('\n') {
                return Err(CliError::Io(format!(
                    "manifest value for {k} contains a newline"
                )));
            }
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read manifest {}: {e}", path.display()))
        })?;
        let mut m = Manifest::default();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("manifest line {} is not key=value", i + 1))
            })?;
            m.push(k, v);
        }
        Ok(m)
    }
}

//! `run_summary.json`: command, version, seed, effective config and content
//! hashes of every input and output file.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const RUN_SUMMARY_FILE: &str = "run_summary.json";

#[derive(Clone, Debug, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunSummary<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub format_version: u32,
    pub seed: u64,
    pub threads: Option<usize>,
    pub args: serde_json::Value,
    pub config: &'a RunConfig,
    pub inputs: &'a [FileHash],
    pub outputs: &'a [FileHash],
    pub result: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_input(path: &Path) -> Result<FileHash, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::input(path, e))?;
    Ok(FileHash {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}

//! Input/output hashing, per-stage seed derivation, and the provenance
//! record every pipeline run emits.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::errors::CliResult;

/// Derives a stage seed from the single user-supplied seed.
///
/// Splitting rule: the first 8 little-endian bytes of
/// `SHA-256(global_seed_le || stage_name_utf8)`. Stage names are stable
/// strings like `"refine"` or `"svd:vit_base_dino"`, so partial re-runs see
/// the same per-stage randomness.
pub fn stage_seed(global_seed: u64, stage: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update(stage.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn sha256_file(path: impl AsRef<Path>) -> CliResult<String> {
    let bytes = std::fs::read(path.as_ref())?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Serialize)]
pub struct ProvenanceRecord {
    pub tool: &'static str,
    pub version: &'static str,
    /// None for the seedless subcommands (compose, adapt, caption).
    pub seed: Option<u64>,
    /// path -> sha256 of every input file consumed.
    pub inputs: BTreeMap<String, String>,
    /// path -> sha256 of every output file produced.
    pub outputs: BTreeMap<String, String>,
    /// stage name -> derived seed actually used.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub stage_seeds: BTreeMap<String, u64>,
}

impl ProvenanceRecord {
    pub fn new(seed: impl Into<Option<u64>>) -> Self {
        Self {
            tool: "embedkit",
            version: env!("CARGO_PKG_VERSION"),
            seed: seed.into(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            stage_seeds: BTreeMap::new(),
        }
    }

    pub fn record_input(&mut self, path: impl AsRef<Path>) -> CliResult<()> {
        let hash = sha256_file(path.as_ref())?;
        self.inputs.insert(path.as_ref().display().to_string(), hash);
        Ok(())
    }

    pub fn record_output(&mut self, path: impl AsRef<Path>) -> CliResult<()> {
        let hash = sha256_file(path.as_ref())?;
        self.outputs.insert(path.as_ref().display().to_string(), hash);
        Ok(())
    }

    pub fn record_stage_seed(&mut self, stage: &str, seed: u64) {
        self.stage_seeds.insert(stage.to_string(), seed);
    }

    pub fn write(&self, path: impl AsRef<Path>) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path.as_ref(), text)?;
        Ok(())
    }
}

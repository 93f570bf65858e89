//! Run provenance: a manifest written next to the result files that
//! records the config snapshot, a dataset fingerprint, and timing.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::config::RunConfig;
use crate::engine::discover::CaseRef;
use crate::error::{Error, Result};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub master_seed: u64,
    pub dataset_fingerprint: String,
    pub case_ids: Vec<String>,
    pub teams: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Snapshot of the run configuration; round-trips to `RunConfig`.
    pub config: RunConfig,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// SHA-256 over every case manifest (id, then file bytes), in case-id
/// order. Changes to any manifest or the case set change the digest.
pub fn dataset_fingerprint(cases: &[CaseRef]) -> Result<String> {
    let mut hasher = Sha256::new();
    for case in cases {
        let bytes = fs::read(&case.manifest_path)
            .map_err(|e| Error::io(&case.manifest_path, e))?;
        hasher.update(case.case_id.as_bytes());
        hasher.update([0u8]);
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn write_run_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let path = dir.join(RUN_MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Data(format!("serializing run manifest: {e}")))?;
    super::report::write_atomic(&path, text.as_bytes())
}

pub fn load_run_manifest(dir: &Path) -> Result<Option<RunManifest>> {
    let path = dir.join(RUN_MANIFEST_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path,
        source: e,
    })?;
    Ok(Some(manifest))
}

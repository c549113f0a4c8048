//! Run manifests: everything needed to repeat a CLI run, plus hashes of
//! its inputs and outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::jobs::Job;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub argv: Vec<String>,
    pub seed: u64,
    /// SHA-256 of the canonical JSON form of `job`.
    pub config_hash: String,
    pub job: Job,
    /// SHA-256 of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every output file, keyed by file name.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn hashes(paths: &[PathBuf], by_name: bool) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| {
            let key = if by_name {
                p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
            } else {
                p.display().to_string()
            };
            Ok((key, sha256_file(p)?))
        })
        .collect()
}

impl RunManifest {
    /// Manifest of a finished run.
    pub fn record(job: &Job, argv: &[String]) -> Result<Self> {
        Ok(Self {
            manifest_version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            argv: argv.to_vec(),
            seed: job.seed(),
            config_hash: job.hash(),
            job: job.clone(),
            inputs: hashes(&job.inputs(), false)?,
            outputs: hashes(&job.outputs(), true)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.manifest_version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "run manifest version {} (expected {MANIFEST_VERSION})",
                m.manifest_version
            )));
        }
        if m.job.hash() != m.config_hash {
            return Err(Error::Manifest("config hash does not match the recorded job".into()));
        }
        Ok(m)
    }
}

/// Outcome of a replay.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayReport {
    /// `(file name, matches)` for every recorded output.
    pub files: Vec<(String, bool)>,
    /// Inputs whose hash changed since the original run.
    pub changed_inputs: Vec<String>,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        self.files.iter().all(|f| f.1)
    }
}

/// Re-runs the job of `manifest` with its outputs redirected into `out_dir`
/// and compares every output with the recorded hash.
pub fn replay(manifest: &RunManifest, out_dir: &Path) -> Result<ReplayReport> {
    let changed_inputs = manifest
        .inputs
        .iter()
        .filter(|(p, h)| sha256_file(Path::new(p)).ok().as_ref() != Some(*h))
        .map(|(p, _)| p.clone())
        .collect();
    std::fs::create_dir_all(out_dir)?;
    let job = manifest.job.redirect(out_dir);
    job.run()?;
    let fresh = hashes(&job.outputs(), true)?;
    let files = manifest
        .outputs
        .iter()
        .map(|(name, h)| (name.clone(), fresh.get(name) == Some(h)))
        .collect();
    Ok(ReplayReport { files, changed_inputs })
}

//! Run configuration: named presets and TOML files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{arch, Network};
use crate::sabr::TrainConfig;

/// Environment variable overriding the data directory.
pub const DATA_DIR_ENV: &str = "SABR_DATA_DIR";

pub const PRESETS: [&str; 6] = [
    "mnist-sabr-0.1",
    "mnist-sabr-0.3",
    "mnist-ibp-0.1",
    "mnist-ibp-0.3",
    "desk-sabr-0.1",
    "desk-ibp-0.1",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Architecture name understood by [`arch::by_name`].
    pub arch: String,
    pub data_dir: Option<PathBuf>,
    /// Use only the first `n` training samples.
    pub train_samples: Option<usize>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: "cnn7".into(),
            data_dir: None,
            train_samples: None,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// A freshly initialised network for MNIST-shaped inputs.
    pub fn build_network(&self) -> Result<Network<f32>> {
        let mut net = arch::by_name(&self.arch, [1, 28, 28], 10)?;
        net.init_params(self.train.seed);
        Ok(net)
    }
}

/// The configuration behind a named preset.
///
/// The MNIST presets follow the published schedule (70 epochs, one clean
/// epoch then a 20-epoch ramp, lr 5e-4 decayed ×0.2 at epochs 50 and 60,
/// batch 256, CNN7). The desk presets shrink it to 20 epochs of a small CNN.
pub fn preset(name: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let t = &mut cfg.train;
    match name {
        "mnist-sabr-0.1" | "mnist-ibp-0.1" => {
            t.eps = 0.1;
            t.lambda = 0.4;
            t.l1 = 1e-5;
        }
        "mnist-sabr-0.3" | "mnist-ibp-0.3" => {
            t.eps = 0.3;
            t.lambda = 0.6;
            t.l1 = 1e-6;
        }
        "desk-sabr-0.1" | "desk-ibp-0.1" => {
            cfg.arch = "desk-cnn".into();
            t.eps = 0.1;
            t.lambda = 0.4;
            t.l1 = 1e-5;
            t.epochs = 20;
            t.ramp_epochs = 8;
            t.lr_milestones = vec![15, 18];
            t.batch_size = 128;
        }
        _ => {
            return Err(Error::invalid(format!(
                "unknown preset `{name}` (one of {})",
                PRESETS.join(", ")
            )))
        }
    }
    if name.contains("-ibp-") {
        cfg.train.lambda = 1.0;
    }
    Ok(cfg)
}

/// Data directory: explicit flag, then the environment, then the config,
/// then `data/mnist`.
pub fn resolve_data_dir(flag: Option<&Path>, cfg: Option<&RunConfig>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(DATA_DIR_ENV) {
        return PathBuf::from(p);
    }
    if let Some(p) = cfg.and_then(|c| c.data_dir.clone()) {
        return p;
    }
    PathBuf::from("data/mnist")
}

use std::path::{Path, PathBuf};

use emr_core::network::NetworkConfig;
use emr_core::presets::{self, PhantomSpec};
use emr_core::searchspace::OperationSpec;
use emr_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Everything a command needs; the snapshot written to `config.json`
/// reproduces the run on its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub rate: f64,
    /// Dataset manifest; synthetic phantoms when absent.
    pub dataset: Option<PathBuf>,
    pub phantoms: PhantomSpec,
    pub fold: usize,
    /// Architecture for retrain: a genotype string or a genotype.json path.
    pub genotype: Option<String>,
    pub emit_images: bool,
}

impl RunConfig {
    pub fn from_preset(name: &str) -> CliResult<Self> {
        let p = presets::by_name(name)?;
        Ok(RunConfig {
            preset: p.name.to_string(),
            network: p.network,
            train: p.train,
            rate: p.rate,
            dataset: None,
            phantoms: p.phantoms,
            fold: 0,
            genotype: None,
            emit_images: false,
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        if !path.exists() {
            return Err(CliError::missing(path));
        }
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn validate(&self) -> CliResult<()> {
        self.network.validate()?;
        self.train.validate()?;
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(CliError::Usage(format!("sampling rate {} outside (0, 1]", self.rate)));
        }
        if self.fold >= 3 {
            return Err(CliError::Usage(format!("fold {} outside 0..3", self.fold)));
        }
        if let Some(d) = &self.dataset {
            if !d.exists() {
                return Err(CliError::missing(d));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON snapshot.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Command-line values layered over the preset or config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub fold: Option<usize>,
    pub rate: Option<f64>,
    pub dataset: Option<PathBuf>,
    pub homogeneous: Option<OperationSpec>,
    pub genotype: Option<String>,
    pub emit_images: bool,
}

pub fn resolve(o: &Overrides) -> CliResult<RunConfig> {
    let mut cfg = match (&o.config, &o.preset) {
        (Some(_), Some(_)) => return Err(CliError::Usage("--config and --preset are exclusive".into())),
        (Some(path), None) => RunConfig::load(path)?,
        (None, preset) => RunConfig::from_preset(preset.as_deref().unwrap_or("desk"))?,
    };
    if let Some(s) = o.seed {
        cfg.train.seed = s;
    }
    if let Some(f) = o.fold {
        cfg.fold = f;
    }
    if let Some(r) = o.rate {
        cfg.rate = r;
    }
    if let Some(d) = &o.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(op) = o.homogeneous {
        cfg.network.homogeneous_op = Some(op);
    }
    if let Some(g) = &o.genotype {
        cfg.genotype = Some(g.clone());
    }
    cfg.emit_images |= o.emit_images;
    cfg.validate()?;
    Ok(cfg)
}

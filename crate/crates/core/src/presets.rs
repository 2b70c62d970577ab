//! Named experiment scales.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::training::TrainConfig;

/// Sampling rate of the random Cartesian masks at both scales.
pub const SAMPLING_RATE: f64 = 0.15;

/// Synthetic data used when no dataset manifest is given.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub subjects: usize,
    pub slices_per_subject: usize,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub rate: f64,
    pub phantoms: PhantomSpec,
}

/// Laptop scale: 32x32 phantoms, two components of width 4, two warmup
/// epochs, six search and six retrain epochs.
///
/// The weight learning rate is raised to 1e-2 and batches shrunk to 2: with
/// only six retrain epochs the full-scale 1e-3 leaves the cascade barely
/// past the zero-filled input.
pub fn desk() -> Preset {
    Preset {
        name: "desk",
        network: NetworkConfig::desk(),
        train: TrainConfig {
            lr_w: 1e-2,
            batch_size: 2,
            warmup_epochs: 2,
            search_epochs: 6,
            retrain_epochs: 6,
            ..TrainConfig::default()
        },
        rate: SAMPLING_RATE,
        phantoms: PhantomSpec { subjects: 12, slices_per_subject: 8, size: 32 },
    }
}

/// Full-scale settings: five components, 50 warmup and 50 search epochs,
/// batch 8, Adam at 1e-3.
pub fn paper() -> Preset {
    Preset {
        name: "paper",
        network: NetworkConfig::default(),
        train: TrainConfig::default(),
        rate: SAMPLING_RATE,
        phantoms: PhantomSpec { subjects: 33, slices_per_subject: 8, size: 256 },
    }
}

pub fn by_name(name: &str) -> Result<Preset> {
    match name {
        "desk" => Ok(desk()),
        "paper" => Ok(paper()),
        other => Err(Error::InvalidArgument(format!(
            "unknown preset {other:?} (expected \"desk\" or \"paper\")"
        ))),
    }
}

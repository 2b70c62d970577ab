//! Cascaded MRI reconstruction with residual-in-residual blocks whose cell
//! operations are chosen by binarized differentiable architecture search.
//!
//! The crate covers k-space simulation and two-step data consistency
//! ([`kspace`]), the eight-operation cell space ([`searchspace`]), the
//! cascade itself ([`network`]), the search engine ([`nas`]), training and
//! cross-validation ([`training`]), image metrics ([`metrics`]) and data
//! ingestion plus synthetic phantoms ([`data`]).

pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod error;
pub mod kspace;
pub mod metrics;
pub mod nas;
pub mod network;
pub mod norm;
pub mod optim;
pub mod params;
pub mod presets;
pub mod searchspace;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use kspace::{ComplexImage, KSpaceGrid, SamplingMask};
pub use nas::ArchParams;
pub use network::{Genotype, ModelWeights, NetworkConfig};
pub use searchspace::OperationSpec;
pub use training::TrainConfig;

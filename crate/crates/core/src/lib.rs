//! Backward-compatible embedding learning with prototype perturbation.
//!
//! When a retrieval system upgrades its embedding model, recomputing every
//! gallery embedding is expensive; training the new model to stay comparable
//! with the old gallery avoids that, but rigid alignment to the old class
//! prototypes also copies the old model's confusions into the new one. This
//! crate trains small encoders under a prototype-contrastive compatibility
//! loss and relaxes the alignment by displacing the old prototypes away from
//! their crowded neighbors, with two strategies:
//!
//! - neighbor-driven: a repulsion-weighted displacement from the K nearest
//!   prototypes, refreshed each epoch against the evolving new model
//!   ([`ndpp`]);
//! - optimization-driven: displacements learned with SGD on hinge objectives
//!   that push too-similar prototype pairs below a threshold ([`odpp`]).
//!
//! Everything runs at desk scale on seeded synthetic data ([`synth`]) with a
//! retrieval evaluation harness ([`metrics`]) implementing the
//! self-test/cross-test protocol, and a CLI (`bcl`) orchestrating data
//! generation, training, evaluation, sweeps, and sequential upgrade chains
//! ([`runner`]). All arithmetic is f64 and every pipeline stage is
//! deterministic given the experiment seed.

pub mod config;
pub mod encoder;
pub mod error;
pub mod linalg;
pub mod loss;
pub mod metrics;
pub mod ndpp;
pub mod odpp;
pub mod pca;
pub mod prototypes;
pub mod rng;
pub mod runner;
pub mod store;
pub mod synth;

pub use config::ExperimentConfig;
pub use encoder::{BclMethod, EncoderArch, EncoderParams, TrainConfig};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use loss::LossConfig;
pub use metrics::MetricsReport;
pub use ndpp::NdppConfig;
pub use odpp::OdppConfig;
pub use prototypes::{EmbeddingMatrix, NeighborList, PrototypeSet, SpaceTag};
pub use rng::SeededRng;
pub use synth::{DatasetSplit, SynthConfig};

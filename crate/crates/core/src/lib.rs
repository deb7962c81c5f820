//! Semi-supervised panoptic narrative grounding on synthetic scenes.
//!
//! A small convolutional grounding model maps an image and a set of phrase
//! embeddings to per-phrase confidence maps. Training runs a supervised
//! Burn-In, then a teacher-student loop in which the teacher labels unlabeled
//! images and the student learns from those labels, weighted by their
//! estimated quality.

pub mod augment;
pub mod domain;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod qla;
pub mod rng;
pub mod store;
pub mod synth;
pub mod train;

pub use augment::{AugParams, AugPolicy};
pub use domain::{
    Category, ConfidenceMap, DatasetSplit, Image, MaskGrid, Phrase, PhraseTags, Plurality,
    PseudoLabel, Sample,
};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use losses::{KlVariant, LossWeights};
pub use model::{ArchDescriptor, ModelParams};
pub use qla::{Connectivity, QlaConfig};
pub use synth::GenSpec;
pub use train::{TrainConfig, TrainState};

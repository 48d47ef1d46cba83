//! Word-embedding perturbation strategies for sentence-classification data
//! augmentation, with exact gradients and a seeded experiment harness.

pub mod config;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod model;
pub mod perturb;
pub mod report;
pub mod seed;
pub mod toy;
pub mod train;
pub mod verify;

pub use corpus::{Dataset, LabelMap, LabeledExample, Vocabulary, UNK};
pub use embed::{EmbeddedSequence, EmbeddingMatrix};
pub use error::{Error, Result};
pub use model::{Architecture, ClassifierParams, ModelSpec};
pub use perturb::{FlipOrder, MaskKind, NoiseMask, PerturbConfig, Strategy};

//! Transductive zero-shot learning with a learned visual-semantic metric and
//! domain-specific batch normalization.
//!
//! Source images with labels and unlabeled target images are paired with
//! category attribute vectors; a metric network scores each pair, and
//! training combines a pairwise prediction loss on the source domain, an
//! entropy loss on the target domain and an attribute reconstruction loss.
//! Normalization layers keep separate running statistics per domain.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod layers;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod training;

pub use data::{load_dataset, TrainingView, ZslDataset};
pub use error::{Error, Result};
pub use inference::{evaluate_dataset, evaluate_with_graph, mca, predict_argmax, score_target, LabelPropagation, ScoreMatrix};
pub use layers::DomainTag;
pub use losses::{LossReport, LossWeights};
pub use model::{AlignmentMode, Model, ModelConfig};
pub use numerics::{Matrix, RngState};
pub use training::{train, TrainConfig, Trainer};

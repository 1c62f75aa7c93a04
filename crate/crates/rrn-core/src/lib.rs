//! Relational reasoning for 3-D craniomaxillofacial landmark prediction.
//!
//! Given a configured subset of the 14 tracked landmarks, the network
//! predicts the remaining ones from learned pairwise and global relations,
//! with no image segmentation anywhere in the pipeline. The crate covers the
//! full loop: geometric feature extraction, a small reverse-mode neural
//! engine, the relational network itself, dataset tooling (augmentation,
//! synthetic cohorts, fold splitting), training and millimetre-space
//! evaluation.

pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod landmarks;
pub mod model;
pub mod nn;
pub mod testing;
pub mod train;

pub use data::{
    augment, generate_augmented, generate_synthetic, make_folds, Dataset, FoldPlan, Provenance,
    Subject, SynthTemplate,
};
pub use error::{Result, RrnError};
pub use features::{
    feature_normalizer, pairwise_features, subject_d1, AffineNormalizer, PairwiseFeature,
    FEATURE_DIM,
};
pub use landmarks::{
    mandible_diagonal, to_spherical, BoneGroup, LandmarkName, LandmarkSet, SphericalVec,
    ALL_LANDMARKS,
};
pub use model::{eq2_loss, DropoutMode, Prediction, RrnConfig, RrnModel, RuVariant};
pub use train::{
    preset_split, train_cv, train_single, Checkpoint, EpochLog, ExperimentConfig, TrainResult,
    PRESET_NAMES,
};
pub use eval::{compare_dropout, evaluate, run_preset, MetricsReport};

//! Leave-one-speed-out evaluation harness.
//!
//! Ten folds each hold one drum speed out: models train on the other nine
//! speeds and validate and test only on the held-out one, so accuracy
//! measures generalization across speed. The harness extracts features once
//! per dataset, assembles per-family tensors per fold, trains the family's
//! network, and persists checkpoints, confusion matrices, and a summary
//! table with rendered heatmaps.

mod assemble;
mod confusion;
mod family;
mod features;
mod folds;
mod run;
mod verify;

use std::path::PathBuf;

use thiserror::Error;

pub use assemble::{assemble, assembly_plan, AssemblyPlan, ConditionCount, FamilySets};
pub(crate) use assemble::family_samples;
pub use confusion::ConfusionMatrix;
pub use family::{Channel, ModelFamily, DEFAULT_DROPOUTS, FAMILIES};
pub use features::{ConditionFeatures, FeatureStore};
pub use folds::{make_folds, split_indices, split_sizes, FoldSpec};
pub use run::{
    evaluate_family, mean_accuracy, report, run_family, FamilyResult, FoldResult, ReportRow,
    RunOptions,
};
pub use verify::{
    verification_cases, verify_gradients, VerifyCase, VerifyOutcome, REL32_LIMIT, REL64_LIMIT,
    TOY_WEIGHT_LIMIT,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset has no condition for class {class_label} at {speed_mm_s} mm/s")]
    MissingCondition { class_label: char, speed_mm_s: f64 },
    #[error("feature store schema version {got}, this build reads {want}")]
    SchemaVersion { got: u32, want: u32 },
    #[error("{fold}: {source}")]
    Fold { fold: String, source: Box<EvalError> },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Manifest(#[from] crate::cli::manifest::ManifestError),
    #[error(transparent)]
    Afferent(#[from] crate::afferents::AfferentError),
    #[error(transparent)]
    Spectral(#[from] crate::spectral::SpectralError),
    #[error(transparent)]
    Ingest(#[from] crate::ingest::IngestError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
}

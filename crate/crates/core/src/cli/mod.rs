//! Command-line front end: configuration, the on-disk data model, and the
//! subcommands tying the pipeline together.

pub mod commands;
pub mod config;
pub mod manifest;

use thiserror::Error;

use crate::drumsim::DrumSimError;
use crate::evalharness::EvalError;
use crate::ingest::IngestError;
use crate::nn::NnError;
use manifest::ManifestError;

/// Front-end failure classes, each mapped to a process exit code:
/// rejected invocation or configuration is 2, filesystem trouble is 3,
/// anything failing past a valid invocation is 1.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Run(_) => 1,
        }
    }
}

/// Whether any link of the error chain is an I/O error.
fn chains_to_io(err: &(dyn std::error::Error + 'static)) -> bool {
    err.downcast_ref::<std::io::Error>().is_some()
        || err.source().is_some_and(chains_to_io)
}

fn classify<E: std::error::Error + 'static>(err: E) -> CliError {
    if chains_to_io(&err) {
        CliError::Io(err.to_string())
    } else {
        CliError::Run(err.to_string())
    }
}

impl From<DrumSimError> for CliError {
    fn from(e: DrumSimError) -> Self {
        match e {
            DrumSimError::BadDuration { .. } | DrumSimError::BadHarmonics { .. } => {
                CliError::Usage(e.to_string())
            }
            other => classify(other),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        classify(e)
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        classify(e)
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        classify(e)
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        classify(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    #[test]
    fn exit_codes_follow_the_error_class() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::Io("x".into()).exit_code(), 3);
        assert_eq!(CliError::Run("x".into()).exit_code(), 1);
    }

    #[test]
    fn io_is_detected_through_nested_error_chains() {
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        let nested = EvalError::Fold {
            fold: "fold_10".into(),
            source: Box::new(EvalError::Io {
                path: PathBuf::from("x"),
                source: io,
            }),
        };
        let err: CliError = nested.into();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("fold_10"));

        let plain: CliError = EvalError::Format("bad".into()).into();
        assert_eq!(plain.exit_code(), 1);

        let bad_cfg: CliError = DrumSimError::BadDuration { got: 0.1 }.into();
        assert_eq!(bad_cfg.exit_code(), 2);
    }
}

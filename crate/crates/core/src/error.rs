use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum NaedError {
    #[error("non-finite input to dictionary evaluation: {0:?}")]
    NonFiniteInput(Vec<f64>),

    #[error("solution blew up at t = {t} (|h|_inf = {norm:e})")]
    BlowUp { t: f64, norm: f64 },

    #[error("blow-up during training at epoch {epoch}, sample `{sample}`: {source}")]
    BlowUpDuringTraining {
        epoch: usize,
        sample: String,
        #[source]
        source: Box<NaedError>,
    },

    #[error("non-finite gradient entry in block `{block}`")]
    NonFiniteGradient { block: &'static str },

    #[error("reference solve failed for sample {index} (seed {seed}): {reason}")]
    GenerationFailure {
        index: usize,
        seed: u64,
        reason: String,
    },

    #[error("portrait requires a 2-dimensional hidden state, got m = {0}")]
    UnsupportedHiddenDim(usize),

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("parse error at row {row}, column {column}: {reason}")]
    Parse {
        row: usize,
        column: usize,
        reason: String,
    },

    #[error("ragged rows: row {row} has {found} values, expected {expected}")]
    RaggedRows {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("schema error in {path}: {reason}")]
    Schema { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl NaedError {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        NaedError::Invalid {
            what,
            reason: reason.into(),
        }
    }

    /// True for failures caused by the numerics rather than by the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            NaedError::BlowUp { .. }
                | NaedError::BlowUpDuringTraining { .. }
                | NaedError::NonFiniteGradient { .. }
                | NaedError::NonFiniteInput(_)
                | NaedError::GenerationFailure { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, NaedError>;

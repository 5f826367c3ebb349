use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cannot ingest {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },
    #[error("dataset is empty: {0}")]
    EmptyDataset(String),
    #[error("mix of piece {0} is silent")]
    EmptyMix(u32),
    #[error("constraint violated: {0}")]
    Constraint(String),
    #[error("piece {piece} has no {condition} stem")]
    MissingStem { piece: u32, condition: String },
    #[error("sampling exhausted: {0}")]
    SamplingExhausted(String),
    #[error("triplet conflict: {0}")]
    Conflict(String),
    #[error("provenance: {0}")]
    Provenance(String),
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error("non-finite loss at batch {batch} (triplets {triplets:?})")]
    NonFiniteLoss { batch: usize, triplets: Vec<usize> },
    #[error("evaluation: {0}")]
    Evaluation(String),
    #[error("export: {0}")]
    Export(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("hash mismatch for {path}: expected {expected}, found {found}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

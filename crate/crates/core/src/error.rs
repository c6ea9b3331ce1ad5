use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("no associable pairs between trajectories")]
    NoAssociablePairs,

    #[error("invalid trajectory: {0}")]
    Trajectory(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("insufficient features: need at least {needed}, have {available}")]
    InsufficientFeatures { needed: usize, available: usize },

    #[error("vocabulary fingerprint mismatch: database {database:#018x}, query {query:#018x}")]
    FingerprintMismatch { database: u64, query: u64 },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("insufficient pairs for alignment: need {needed}, have {available}")]
    InsufficientPairs { needed: usize, available: usize },

    #[error("insufficient horizontal extent")]
    InsufficientExtent,

    #[error("filter not initialized")]
    NotInitialized,

    #[error("filter already initialized")]
    AlreadyInitialized,

    #[error("format error: {0}")]
    Format(String),

    #[error("tile {tile_id}: {source}")]
    Tile {
        tile_id: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

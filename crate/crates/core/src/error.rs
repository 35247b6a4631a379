use std::path::PathBuf;

use crate::geometry::Shift;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: parse error: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: annotation {index}: unknown category {category_id}")]
    UnknownCategory {
        path: PathBuf,
        index: usize,
        category_id: u64,
    },

    #[error("{path}: duplicate image id {image_id}")]
    DuplicateImage { path: PathBuf, image_id: u64 },

    #[error("{path}: image {image_id}: width and height must be positive")]
    InvalidImage { path: PathBuf, image_id: u64 },

    #[error("{path}: record {index}: {message}")]
    InvalidRecord {
        path: PathBuf,
        index: usize,
        message: String,
    },

    #[error("{path}: record {index}: shift {shift} outside grid with max shift {max_shift}")]
    ShiftOutsideGrid {
        path: PathBuf,
        index: usize,
        shift: Shift,
        max_shift: u32,
    },

    #[error("{path}: record {index}: score {score} outside [0, 1]")]
    ScoreOutOfRange { path: PathBuf, index: usize, score: f64 },

    #[error("{path}: record {index}: missing shift information")]
    MissingShift { path: PathBuf, index: usize },

    #[error("incomplete assignment: image {image_id} has no shift")]
    IncompleteAssignment { image_id: u64 },

    #[error("shift {shift} outside grid with max shift {max_shift}")]
    OutsideGrid { shift: Shift, max_shift: u32 },

    #[error("unknown image id {image_id}")]
    UnknownImage { image_id: u64 },

    #[error("instance too large: {assignments:.3e} assignments exceed enumeration cap {cap}")]
    InstanceTooLarge { assignments: f64, cap: u64 },

    #[error("no prediction set available for max shift {max_shift}")]
    MissingSweepSet { max_shift: u32 },

    #[error("empty image set")]
    EmptyImageSet,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Parse {
            path: path.into(),
            source,
        }
    }

    /// `true` for errors that stem from a resource cap rather than bad input.
    pub fn is_resource_limit(&self) -> bool {
        matches!(self, Error::InstanceTooLarge { .. })
    }
}

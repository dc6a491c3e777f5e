use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("quantum efficiency {0} is outside the allowed range")]
    InvalidEfficiency(f64),

    #[error("duplicate quantum efficiency {0}")]
    DuplicateEfficiency(f64),

    #[error("invalid photon distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid on/off record (eta = {eta}, windows = {windows}, off_count = {off_count}): {reason}")]
    InvalidRecord {
        eta: f64,
        windows: u64,
        off_count: u64,
        reason: &'static str,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("singular update: predicted off-probability is zero at record {index} (eta = {eta}) while its frequency is positive")]
    SingularUpdate { index: usize, eta: f64 },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("underdetermined data: {found} records, at least {required} required")]
    Underdetermined { found: usize, required: usize },

    #[error(
        "target energy {target} unreachable: attainable mean energies span [{lowest}, {highest}]"
    )]
    TargetUnreachable {
        target: f64,
        lowest: f64,
        highest: f64,
    },

    #[error("efficiency grids differ at record {index}: {measured} vs {background}")]
    GridMismatch {
        index: usize,
        measured: f64,
        background: f64,
    },

    #[error("degenerate background: zero off-frequency at record {index} (eta = {eta})")]
    DegenerateBackground { index: usize, eta: f64 },

    #[error("line {line}, column {column}: {reason}")]
    Parse {
        line: usize,
        column: usize,
        reason: String,
    },

    #[error("bad header {found:?}, expected {expected:?}")]
    Header {
        found: String,
        expected: &'static str,
    },

    #[error("invalid report: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

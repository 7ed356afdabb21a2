//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FraglinkError {
    #[error("empty selection: {0}")]
    EmptySelection(&'static str),

    #[error("invalid isometry: rotation matrix is not orthogonal (max deviation {0:.3e})")]
    InvalidIsometry(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("timestep {t} out of range 0..={t_max}")]
    TimestepOutOfRange { t: usize, t_max: usize },

    #[error("posterior q(z_{{t-1}} | x, z_t) is undefined at t = 0")]
    NoPosteriorAtZero,

    #[error("gradient tape mismatch: {0}")]
    TapeMismatch(String),

    #[error("unknown atom type {0:?}")]
    UnknownAtomType(String),

    #[error("linker must contain at least one atom")]
    EmptyLinker,

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("linker size {0} is not among the trained size classes")]
    UnknownSizeClass(usize),

    #[error("graph has no atoms")]
    EmptyGraph,

    #[error("fragment atom {index} has no positional match in the molecule")]
    FragmentMatchFailure { index: usize },

    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FraglinkError>;

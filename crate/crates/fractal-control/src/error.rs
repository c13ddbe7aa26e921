//! Crate-wide error type.
//!
//! Errors are split along the boundary the command-line driver cares about:
//! [`Error::is_usage`] distinguishes bad arguments/configuration (exit code 2)
//! from genuine numerical failures discovered at run time (exit code 1).

use thiserror::Error;

/// Any failure produced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Requested approximation level exceeds the configured ceiling.
    #[error("level {requested} exceeds the maximum {max} (set FRACTAL_CONTROL_MAX_LEVEL to raise it)")]
    LevelLimit { requested: u32, max: u32 },

    /// A vertex id outside the graph.
    #[error("unknown vertex id {id} (graph has {count} vertices)")]
    UnknownVertex { id: u32, count: usize },

    /// A per-vertex value table whose length does not match the graph.
    #[error("value table has {got} entries but the graph has {want} vertices")]
    ValueTableSize { got: usize, want: usize },

    /// A harmonic table queried beyond the depth it was extended to.
    #[error("harmonic table is tabulated to level {max}, level {requested} was requested")]
    LevelNotTabulated { requested: u32, max: u32 },

    /// A time below the walk's resolvable scale.
    #[error("time {t} is below the minimum resolvable time {min} at level {level}")]
    TimeBelowResolution { t: f64, min: f64, level: u32 },

    /// A bin count that does not divide the step count.
    #[error("bin count {bins} does not divide the step count {steps}")]
    UnevenBins { bins: usize, steps: usize },

    /// State left the finite range during forward integration.
    #[error("state became non-finite at step {step} during forward integration")]
    IntegrationBlowup { step: usize },

    /// A control whose cost integrand is not finite along some path.
    #[error("cost integrand became non-finite at step {step}: control is inadmissible")]
    Admissibility { step: usize },

    /// Regression basis lost rank during the backward sweep.
    #[error("regression basis is rank-deficient at grid step {step}")]
    BasisDegeneracy { step: usize },

    /// An estimator whose sample carries no usable mass (for example a
    /// hitting-probability estimate with zero hits), leaving a derived
    /// quantity undefined.
    #[error("estimator coverage failure: {0}")]
    Coverage(String),

    /// Any other malformed argument.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed configuration file or command line.
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True when the error reflects caller input rather than a numerical
    /// failure; the command-line driver maps this to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::LevelLimit { .. }
                | Error::UnknownVertex { .. }
                | Error::ValueTableSize { .. }
                | Error::LevelNotTabulated { .. }
                | Error::TimeBelowResolution { .. }
                | Error::UnevenBins { .. }
                | Error::InvalidArgument(_)
                | Error::Config(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

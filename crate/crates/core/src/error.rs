use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("matrix is rank deficient (smallest/largest singular value = {ratio:e})")]
    RankDeficient { ratio: f64 },
    #[error("Schulz iteration requires ||I - A^T A||_F < 1, got {norm}")]
    ConvergenceDomainViolated { norm: f64 },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("all component densities vanish for sample {sample}")]
    DegenerateDensity { sample: usize },
    #[error("component {component} received no responsibility mass")]
    EmptyComponent { component: usize },
    #[error("line search failed after {halvings} step reductions")]
    LineSearchFailed { halvings: usize },
    #[error("output pixel {index} is not covered by any patch")]
    UncoveredPixel { index: usize },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("version mismatch: {0}")]
    VersionMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Numerical failures as opposed to bad inputs or bad files.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite
                | Error::RankDeficient { .. }
                | Error::ConvergenceDomainViolated { .. }
                | Error::DegenerateDensity { .. }
                | Error::EmptyComponent { .. }
                | Error::LineSearchFailed { .. }
        )
    }
}

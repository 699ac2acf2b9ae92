use thiserror::Error;

/// Errors raised by the imaging pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("scatterer coincides with element (distance {distance:e} m)")]
    SpreadSingularity { distance: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("value not representable: {name} = {value} outside open interval ({lo}, {hi})")]
    NotRepresentable {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("divergence detected: non-finite gradient in group {0}")]
    Divergence(&'static str),

    #[error("ill-conditioned aperture: covariance is singular after loading")]
    IllConditioned,

    #[error("empty image: every pixel is zero")]
    EmptyImage,

    #[error("conjugate gradient did not converge after {iterations} iterations (residual {residual:e})")]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("regions overlap in {0} pixels")]
    OverlappingRegions(usize),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("container format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that originate in the numerics rather than in the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SpreadSingularity { .. }
                | Error::Divergence(_)
                | Error::IllConditioned
                | Error::EmptyImage
                | Error::CgNotConverged { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

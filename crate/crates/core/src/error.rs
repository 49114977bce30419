use thiserror::Error;

/// Errors raised by the physics and control models.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("unsupported wavelength {lambda_nm} nm: {reason}")]
    UnsupportedWavelength { lambda_nm: f64, reason: String },

    #[error("beacon power {power_w} W is outside the (0, 10] W envelope")]
    OverPower { power_w: f64 },

    #[error("azimuth unreliable: degree of linear polarization {dolp:.4} is below 0.1")]
    LowConfidence { dolp: f64 },

    #[error("field rotation undefined at elevation {elevation_deg} deg")]
    Singularity { elevation_deg: f64 },

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    #[error("points are coincident (separation {separation_m:.3e} m)")]
    CoincidentPoints { separation_m: f64 },

    #[error("origin latitude {lat_rad} rad outside [-pi/2, pi/2]")]
    InvalidLatitude { lat_rad: f64 },

    #[error("epoch {epoch_index} has {count} observations, {minimum} required")]
    InsufficientObservations {
        epoch_index: usize,
        count: usize,
        minimum: usize,
    },

    #[error("duplicate satellite id {sat_id} at epoch {epoch_index}")]
    DuplicateSatellite { sat_id: String, epoch_index: usize },

    #[error("normal matrix singular (condition estimate {condition:.3e}) in {context}")]
    SingularNormalMatrix { condition: f64, context: &'static str },

    #[error("matrix not positive definite in {context}")]
    NotPositiveDefinite { context: &'static str },

    #[error("elevation {elevation_rad} rad not above horizon")]
    BelowHorizon { elevation_rad: f64 },

    #[error("window needs exactly {expected} epochs, got {got}")]
    WindowLength { expected: usize, got: usize },

    #[error("information vector length {got} does not match factor count {expected}")]
    InformationLength { expected: usize, got: usize },

    #[error("run too short: {epochs} epochs, {minimum} required")]
    RunTooShort { epochs: usize, minimum: usize },

    #[error("epoch {epoch_index}: only {count} visible satellites (need {minimum})")]
    VisibilityShortfall {
        epoch_index: usize,
        count: usize,
        minimum: usize,
    },

    #[error("ground truth missing{}", context.as_deref().map(|c| format!(" ({c})")).unwrap_or_default())]
    MissingTruth { context: Option<String> },

    #[error("all weights are zero")]
    ZeroWeights,

    #[error("empty run")]
    EmptyRun,

    #[error("invalid configuration at {path}: {message}")]
    InvalidConfig { path: String, message: String },

    #[error("unsupported file format version {found} (expected {expected}) in {what}")]
    FormatVersion {
        found: u32,
        expected: u32,
        what: &'static str,
    },

    #[error("malformed {what}: {message}")]
    Malformed { what: &'static str, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True when the error describes bad user input rather than a numerical
    /// or I/O failure at runtime. The CLI maps this to exit code 1.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig { .. }
                | Error::InvalidLatitude { .. }
                | Error::WindowLength { .. }
                | Error::InformationLength { .. }
                | Error::RunTooShort { .. }
                | Error::MissingTruth { .. }
                | Error::FormatVersion { .. }
                | Error::DuplicateSatellite { .. }
                | Error::InsufficientObservations { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

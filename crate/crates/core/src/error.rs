use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty mask")]
    EmptyMask,

    #[error("ambiguous token ownership: token {token} claimed by regions {first} and {second}")]
    AmbiguousTokenOwnership { token: usize, first: u32, second: u32 },

    #[error("modulation out of range: lambda {value} outside [0, 1]")]
    ModulationOutOfRange { value: f64 },

    #[error("{what} out of range: {value}")]
    OutOfRange { what: &'static str, value: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("divergence: non-finite latent at step position {position}")]
    Divergence { position: usize },

    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },

    #[error("features not captured for block {block} at step {step}")]
    FeaturesNotCaptured { block: usize, step: usize },

    #[error("attention not recorded for step {step}, layer {layer}")]
    AttentionNotRecorded { step: usize, layer: usize },

    #[error("cluster count {k} exceeds point count {points}")]
    TooManyClusters { k: usize, points: usize },

    #[error("binding references missing cluster {0}")]
    MissingCluster(usize),

    #[error("no cached inversion latent at step position {0}")]
    StepMisaligned(usize),

    #[error("empty prompt")]
    EmptyPrompt,

    #[error("region {region} is empty in every frame")]
    EmptyRegion { region: u32 },

    #[error("unknown region {0}")]
    UnknownRegion(u32),

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    /// Whether the error stems from invalid user input rather than a failure
    /// while computing. The CLI maps these to exit code 1.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::InvalidLayout(_)
                | Error::InvalidScene(_)
                | Error::InvalidSchedule(_)
                | Error::EmptyPrompt
                | Error::UnknownRegion(_)
                | Error::MissingCluster(_)
                | Error::TooManyClusters { .. }
                | Error::AmbiguousTokenOwnership { .. }
                | Error::EmptyMask
        )
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn mismatch(
        context: &'static str,
        expected: impl std::fmt::Debug,
        got: impl std::fmt::Debug,
    ) -> Self {
        Error::DimensionMismatch {
            context,
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }
}

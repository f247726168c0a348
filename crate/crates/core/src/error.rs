use std::path::PathBuf;

/// Errors produced by the toolkit.
///
/// The variants map onto the CLI exit-code contract: `Param`/`Config` are
/// usage errors, `Io`/`Image` are I/O errors, everything else is a runtime
/// failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument or parameter value violates its documented range.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// Two inputs that must agree (shapes, configs, manifests) do not.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration file or manifest could not be accepted.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("torch error: {0}")]
    Torch(#[from] tch::TchError),

    /// Training produced a non-finite loss; a diagnostic snapshot was written.
    #[error("non-finite loss at step {step} (phase {phase}); snapshot in {snapshot}")]
    NonFinite {
        step: usize,
        phase: u8,
        snapshot: PathBuf,
    },

    /// Phantom geometry could not be placed inside the image.
    #[error("phantom generation failed after {attempts} attempts: {reason}")]
    Geometry { attempts: usize, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Param(_) | Error::Config(_) | Error::Json(_))
    }

    /// True for filesystem and image decoding failures.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Image { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

//! One error type for commands and HTTP handlers, carrying the category that
//! is reported to callers.

use serde_json::json;
use thiserror::Error;

use spheresfm_core::correspondence::CorrespondenceError;
use spheresfm_core::dense::DenseError;
use spheresfm_core::epipolar::EpipolarError;
use spheresfm_core::multiview::MultiviewError;
use spheresfm_core::pfm::PfmError;
use spheresfm_core::ply::PlyError;
use spheresfm_core::sphere_cam::SphereCamError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad input from the caller.
    Malformed,
    NotFound,
    /// An earlier pipeline step has not been run.
    Prerequisite,
    /// A solver rejected the data.
    Solver,
    Io,
}

impl ErrorKind {
    pub fn http_status(self) -> u16 {
        match self {
            Self::Malformed => 400,
            Self::NotFound => 404,
            Self::Prerequisite => 409,
            Self::Solver => 422,
            Self::Io => 500,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("{category}: {message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub category: String,
    pub message: String,
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn new(kind: ErrorKind, category: &str, message: impl Into<String>) -> Self {
        Self {
            kind,
            category: category.to_owned(),
            message: message.into(),
        }
    }

    pub fn malformed(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Malformed, "InvalidInput", message)
    }

    pub fn not_found(what: &str, id: impl std::fmt::Display) -> Self {
        Self::new(ErrorKind::NotFound, "NotFound", format!("unknown {what} {id}"))
    }

    pub fn prerequisite(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Prerequisite, "MissingPrerequisite", message)
    }

    pub fn io(context: impl std::fmt::Display, err: impl std::fmt::Display) -> Self {
        Self::new(ErrorKind::Io, "IoError", format!("{context}: {err}"))
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({ "error": { "category": self.category, "message": self.message } })
    }
}

impl From<EpipolarError> for CliError {
    fn from(e: EpipolarError) -> Self {
        let kind = match e {
            EpipolarError::InvalidParams(_) => ErrorKind::Malformed,
            _ => ErrorKind::Solver,
        };
        Self::new(kind, e.category(), e.to_string())
    }
}

impl From<MultiviewError> for CliError {
    fn from(e: MultiviewError) -> Self {
        Self::new(ErrorKind::Solver, e.category(), e.to_string())
    }
}

impl From<DenseError> for CliError {
    fn from(e: DenseError) -> Self {
        let kind = match e {
            DenseError::InvalidParams(_) => ErrorKind::Malformed,
            _ => ErrorKind::Solver,
        };
        Self::new(kind, e.category(), e.to_string())
    }
}

impl From<CorrespondenceError> for CliError {
    fn from(e: CorrespondenceError) -> Self {
        let kind = match e {
            CorrespondenceError::Parse { .. } => ErrorKind::Malformed,
            CorrespondenceError::UnknownImageId { .. } => ErrorKind::NotFound,
        };
        Self::new(kind, e.category(), e.to_string())
    }
}

impl From<PlyError> for CliError {
    fn from(e: PlyError) -> Self {
        let kind = match e {
            PlyError::EmptyCloud => ErrorKind::Prerequisite,
            PlyError::Parse { .. } => ErrorKind::Malformed,
        };
        Self::new(kind, e.category(), e.to_string())
    }
}

impl From<PfmError> for CliError {
    fn from(e: PfmError) -> Self {
        Self::new(ErrorKind::Malformed, "MalformedPfm", e.to_string())
    }
}

impl From<SphereCamError> for CliError {
    fn from(e: SphereCamError) -> Self {
        Self::new(ErrorKind::Malformed, e.category(), e.to_string())
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        Self::new(ErrorKind::Malformed, "ImageError", e.to_string())
    }
}

//! Part detectors and masked-patch reconstructors.
//!
//! Both roles are object-safe traits taking `&self`, so one backend can be
//! shared across evaluation threads. Implementations that wrap a sequential
//! resource (a child process) serialize internally.

pub mod external;
pub mod oracle;
pub mod pool;
pub mod protocol;
pub mod server;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Detection, GeometryError, PatchGrid};
use crate::grammar::ContainerFrame;
use crate::raster::{RasterError, RasterImage};

pub use external::{ExternalBackend, ExternalConfig};
pub use oracle::{DetectorNoise, OracleDetector, OracleReconstructor};
pub use pool::SessionPool;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend process could not be started: {0}")]
    Spawn(#[source] std::io::Error),
    #[error("i/o error talking to backend: {0}")]
    Io(#[from] std::io::Error),
    #[error("backend did not answer `{op}` within {seconds:.1}s")]
    Timeout { op: String, seconds: f64 },
    #[error("backend exited{}", .status.as_ref().map(|s| format!(" ({s})")).unwrap_or_default())]
    Exited { status: Option<String> },
    #[error("malformed response line ({message}): {line:?}")]
    Malformed { line: String, message: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("protocol version mismatch: expected {expected}, got {got}")]
    VersionMismatch { expected: u32, got: u32 },
    #[error("backend reported error: {0}")]
    Remote(String),
    #[error("missing frame hint")]
    MissingHint,
    #[error("backend returned a {got_w}x{got_h} image for a {want_w}x{want_h} input")]
    Dimensions {
        want_w: u32,
        want_h: u32,
        got_w: u32,
        got_h: u32,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// What a reconstructor may assume about the object being inpainted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "snake_case")]
pub enum ReconstructHint {
    /// An object of the grammar's class occupies `frame`.
    Framed { frame: ContainerFrame },
    /// No object frame; parts are not arranged as an object.
    Unframed,
}

pub trait Detector: Send + Sync {
    fn detect(&self, image: &RasterImage) -> Result<Vec<Detection>, BackendError>;
}

pub trait Reconstructor: Send + Sync {
    /// Returns an image of the same size in which the `masked` patches of
    /// `grid` have been regenerated.
    fn reconstruct(
        &self,
        image: &RasterImage,
        grid: &PatchGrid,
        masked: &[usize],
        hint: Option<&ReconstructHint>,
    ) -> Result<RasterImage, BackendError>;
}

impl<T: Detector + ?Sized> Detector for &T {
    fn detect(&self, image: &RasterImage) -> Result<Vec<Detection>, BackendError> {
        (**self).detect(image)
    }
}

impl<T: Detector + ?Sized> Detector for std::sync::Arc<T> {
    fn detect(&self, image: &RasterImage) -> Result<Vec<Detection>, BackendError> {
        (**self).detect(image)
    }
}

impl<T: Reconstructor + ?Sized> Reconstructor for &T {
    fn reconstruct(
        &self,
        image: &RasterImage,
        grid: &PatchGrid,
        masked: &[usize],
        hint: Option<&ReconstructHint>,
    ) -> Result<RasterImage, BackendError> {
        (**self).reconstruct(image, grid, masked, hint)
    }
}

impl<T: Reconstructor + ?Sized> Reconstructor for std::sync::Arc<T> {
    fn reconstruct(
        &self,
        image: &RasterImage,
        grid: &PatchGrid,
        masked: &[usize],
        hint: Option<&ReconstructHint>,
    ) -> Result<RasterImage, BackendError> {
        (**self).reconstruct(image, grid, masked, hint)
    }
}

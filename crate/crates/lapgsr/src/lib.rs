//! Guided thermal super-resolution.
//!
//! A low-resolution thermal frame is fused with a high-resolution RGB guide:
//! the guide is decomposed into a three-level Laplacian pyramid whose residual
//! slot is replaced by the thermal frame, three residual branches translate
//! the levels at quarter/half/full resolution, and collapsing the translated
//! pyramid yields the 4x super-resolved thermal image. Training pits the
//! reconstruction against a patch discriminator (least-squares GAN) on top of
//! a heavily weighted MSE term. Everything runs on a small reverse-mode
//! autodiff engine built in this crate; no external ML framework is involved.

pub mod data;
pub mod metrics;
pub mod model;
pub mod pyramid;
pub mod tensor;
pub mod train;

use std::path::PathBuf;

pub use tensor::{Shape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {a} vs {b}")]
    ShapeMismatch {
        op: &'static str,
        a: Shape,
        b: Shape,
    },
    #[error("{op}: bad shape {shape}: {why}")]
    BadShape {
        op: &'static str,
        shape: Shape,
        why: String,
    },
    #[error("{op}: {why}")]
    Invalid { op: &'static str, why: String },
    #[error("non-finite values in {site}")]
    NonFinite { site: String },
    #[error("backward needs a scalar loss, got {shape}")]
    NonScalarLoss { shape: Shape },
    #[error("dataset: {why}")]
    Dataset { why: String },
    #[error("checkpoint {path}: {why}")]
    Checkpoint { path: PathBuf, why: String },
    #[error("config: {why}")]
    Config { why: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {why}")]
    Image { path: PathBuf, why: String },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// `map_err` adapter attaching the offending path to an I/O error.
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

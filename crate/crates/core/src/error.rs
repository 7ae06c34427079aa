use std::io;

use thiserror::Error;

use crate::config::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {}", format_violations(.0))]
    InvalidConfig(Vec<Violation>),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("config fingerprint mismatch: checkpoint has {found}, expected {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("request error: {0}")]
    Request(String),
    #[error("bad magic: not a {0} file")]
    BadMagic(&'static str),
    #[error("version mismatch: file has version {found}, reader supports {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("truncated payload: {0}")]
    TruncatedPayload(String),
    #[error("manifest/payload inconsistency: {0}")]
    Inconsistent(String),
    #[error("planning failed: {0}")]
    Plan(String),
    #[error("metric unavailable: {0}")]
    MetricUnavailable(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

impl From<fitvid_tensor::TensorError> for Error {
    fn from(e: fitvid_tensor::TensorError) -> Self {
        match e {
            fitvid_tensor::TensorError::Shape(s) => Error::Shape(s),
            fitvid_tensor::TensorError::Gradient(s) => Error::Numeric(s),
        }
    }
}

impl Error {
    /// Process exit status for this failure: 2 for configuration or
    /// compatibility problems, 3 for numeric failures, 4 for storage.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            Error::Io(_) | Error::BadMagic(_) | Error::TruncatedPayload(_) | Error::Inconsistent(_) => 4,
            _ => 2,
        }
    }
}

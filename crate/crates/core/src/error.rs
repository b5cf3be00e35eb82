//! Error type shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A synthetic-data spec violates its own invariants (e.g. the ellipsoid
    /// cannot fit inside the volume with the required margin).
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// Bad network/loss/experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input that makes an operation mathematically undefined
    /// (e.g. normalizing a constant-intensity volume).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Array shapes do not satisfy an operation's contract.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// The case header could not be parsed or is internally inconsistent.
    #[error("malformed header: {0}")]
    MalformedHeader(String),

    /// A raw payload's byte length disagrees with the header shape.
    #[error("payload size mismatch: {0}")]
    PayloadSizeMismatch(String),

    /// The header names a dtype/byte order/layout this build does not read.
    #[error("unsupported dtype: {0}")]
    UnsupportedDtype(String),

    /// Metric has no defined value for the given operands (e.g. ASSD with an
    /// empty mask). Reported as missing, never as a sentinel value.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Training produced a non-finite loss; the message carries the step and
    /// loss-component diagnostics.
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit-code class for the CLI: 2 config/schema, 3 data, 4 runtime/numerics.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::InvalidSpec(_) | Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Io(_)
            | Error::Json(_)
            | Error::MalformedHeader(_)
            | Error::PayloadSizeMismatch(_)
            | Error::UnsupportedDtype(_)
            | Error::DegenerateInput(_) => 3,
            Error::ShapeMismatch(_) | Error::UndefinedMetric(_) | Error::NonFiniteLoss(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

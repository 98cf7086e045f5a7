use thiserror::Error;

use crate::store::HeadRef;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
///
/// The variant name doubles as the machine-readable error code the CLI
/// prints, see [`Error::code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("file does not start with the HWS1 magic")]
    MagicMismatch,
    #[error("header is malformed: {0}")]
    BadHeader(String),
    #[error("tensor `{0}` has a shape that does not match its data or the model config")]
    ShapeMismatch(String),
    #[error("payload of tensor `{0}` is truncated")]
    TruncatedData(String),
    #[error("tensor `{0}` is missing")]
    MissingTensor(String),
    #[error("tensor name `{0}` is not part of the canonical naming scheme")]
    UnknownTensor(String),
    #[error("tensor `{0}` has dtype {1}, expected {2}")]
    DtypeMismatch(String, &'static str, &'static str),
    #[error("head {0} is outside the model ({1} layers x {2} heads)")]
    HeadOutOfRange(HeadRef, usize, usize),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("cannot match head {0} against itself")]
    SameHead(HeadRef),
    #[error("need at least 2 layers to share heads, got {0}")]
    TooFewLayers(usize),
    #[error("sharing ratio {0} is outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("share plan does not fit the model: {0}")]
    PlanConfigMismatch(String),
    #[error("token id {0} is out of range for vocab size {1}")]
    TokenOutOfRange(usize, usize),
    #[error("share plan has no pairs")]
    EmptyPlan,
    #[error("loss became non-finite at step {0}")]
    NonFiniteLoss(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable name of the variant, used as the error code on the command line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MagicMismatch => "MagicMismatch",
            Error::BadHeader(_) => "BadHeader",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::TruncatedData(_) => "TruncatedData",
            Error::MissingTensor(_) => "MissingTensor",
            Error::UnknownTensor(_) => "UnknownTensor",
            Error::DtypeMismatch(..) => "DtypeMismatch",
            Error::HeadOutOfRange(..) => "HeadOutOfRange",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::LengthMismatch(..) => "LengthMismatch",
            Error::ZeroVector => "ZeroVector",
            Error::SameHead(_) => "SameHead",
            Error::TooFewLayers(_) => "TooFewLayers",
            Error::AlphaOutOfRange(_) => "AlphaOutOfRange",
            Error::PlanConfigMismatch(_) => "PlanConfigMismatch",
            Error::TokenOutOfRange(..) => "TokenOutOfRange",
            Error::EmptyPlan => "EmptyPlan",
            Error::NonFiniteLoss(_) => "NonFiniteLoss",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}

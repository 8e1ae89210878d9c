use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("empty cloud")]
    EmptyCloud,

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("attribute `{name}` has {got} entries for {expected} points")]
    AttributeLength {
        name: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("missing attribute `{0}`")]
    MissingAttribute(&'static str),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("feature dimension mismatch: {0} vs {1}")]
    FeatureDimension(usize, usize),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("nonpositive temperature {0}")]
    NonPositiveTemperature(f64),

    #[error("invalid rigid transform: {0}")]
    InvalidTransform(String),

    #[error("degenerate affinity: {0}")]
    DegenerateAffinity(String),

    #[error("degenerate correspondence geometry")]
    DegenerateGeometry,

    #[error("zero total weight")]
    ZeroTotalWeight,

    #[error("empty foreground")]
    EmptyForeground,

    #[error("insufficient points: {0} survive preprocessing")]
    InsufficientPoints(usize),

    #[error("no background")]
    NoBackground,

    #[error("invalid scene spec: {0}")]
    InvalidSceneSpec(String),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for failures of the numerics on otherwise well-formed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateAffinity(_) | Error::DegenerateGeometry | Error::ZeroTotalWeight
        )
    }
}

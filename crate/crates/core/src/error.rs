use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes shared by the geometric, loss and solver modules.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("point with z = {0} cannot be projected")]
    DegenerateProjection(f64),
    #[error("depth must be positive, got {0}")]
    InvalidDepth(f64),
    #[error("valid pixel {index} holds a point with non-positive or non-finite depth")]
    InvalidPoint { index: usize },
    #[error("non-finite input value at element {index}")]
    InvalidInput { index: usize },
    #[error("focal length is unobservable in frame {frame}")]
    FocalUnobservable { frame: usize },
    #[error("diagonal field of view must be positive, got {0}")]
    InvalidFov(f64),
    #[error("clip has no valid pixels")]
    EmptyClip,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("evaluated domain contains no valid pixels")]
    EmptyMask,
    #[error("noise level must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("loss diverged at step {step} (value {value})")]
    Divergence { step: usize, value: f64 },
    #[error("loss is not finite when perturbing coordinate {index}")]
    NonFiniteLoss { index: usize },
    #[error("prediction is degenerate")]
    DegeneratePrediction,
    #[error("prediction is anti-correlated with the ground truth (scale {0})")]
    AntiCorrelated(f64),
    #[error("window of frames {start}..{end} is under-constrained ({tracks} usable tracks)")]
    UnderConstrained {
        start: usize,
        end: usize,
        tracks: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("not a GPMF container")]
    NotGpm,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("corrupt container at byte {offset}: {reason}")]
    CorruptFile { offset: u64, reason: String },
    #[error("tensor `{name}`: expected {expected}, found {found}")]
    TypeError {
        name: String,
        expected: String,
        found: String,
    },
    #[error("container has no tensor `{0}`")]
    MissingTensor(String),
    #[error("{0}")]
    Io(String),
}

impl Error {
    /// Process exit status: 3 for numerical failures, 2 for everything the
    /// caller can fix by changing the inputs or flags.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DegenerateProjection(_)
            | Error::Divergence { .. }
            | Error::DegeneratePrediction
            | Error::AntiCorrelated(_)
            | Error::NonFiniteLoss { .. } => 3,
            _ => 2,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

use std::path::PathBuf;

/// Errors raised anywhere in the library.
///
/// Variants are grouped by how a caller should react: validation problems
/// (bad shapes, bad input files, bad configuration) versus numeric failures
/// (non-finite values). The CLI maps the former to exit code 1 and the
/// latter to exit code 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unsupported operation: {0}")]
    Capability(String),

    #[error("planar flow has a degenerate direction: w is the zero vector")]
    DegenerateDirection,

    #[error("singular Jacobian: |det| = {det:e}")]
    SingularJacobian { det: f64 },

    #[error("flow layer {index} ({kind}): {source}")]
    Layer {
        index: usize,
        kind: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("gradient check failed at coordinate {coord}: {source}")]
    GradCheck {
        coord: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("training diverged at step {step} ({phase}): {detail}")]
    Diverged {
        step: usize,
        phase: String,
        detail: String,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by non-finite arithmetic rather than bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. }
            | Error::NonFiniteGradient { .. }
            | Error::Diverged { .. }
            | Error::SingularJacobian { .. } => true,
            Error::Layer { source, .. } | Error::GradCheck { source, .. } => source.is_numeric(),
            _ => false,
        }
    }

    /// Innermost error beneath any layer or coordinate context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Layer { source, .. } | Error::GradCheck { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn in_layer(self, index: usize, kind: &'static str) -> Error {
        Error::Layer {
            index,
            kind,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

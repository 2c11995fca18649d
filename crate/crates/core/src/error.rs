use std::path::PathBuf;

use crate::graph::GraphIssue;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid model graph: {}", join_issues(.0))]
    InvalidGraph(Vec<GraphIssue>),

    #[error("layer `{id}`: {source}")]
    Layer {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid rule: {0}")]
    Rule(String),

    #[error("invalid seed: {0}")]
    Seed(String),

    #[error("activation cache does not match graph: {0}")]
    CacheMismatch(String),

    #[error("empty region")]
    EmptyRegion,

    #[error("invalid region: {0}")]
    InvalidRegion(String),

    #[error("degenerate region: all {0} locations have a vanishing relevance sum")]
    DegenerateRegion(usize),

    #[error("class not predicted: class {0} has no voxels in the label map")]
    ClassNotPredicted(usize),

    #[error("sign-degenerate relevance map: global sum {0} is not positive")]
    SignDegenerate(f64),

    #[error("label mismatch: {0}")]
    LabelMismatch(String),

    #[error("unsupported layer kind `{kind}` (layer `{id}`)")]
    UnsupportedKind { id: String, kind: String },

    #[error("{path}: byte {offset}: {message}")]
    TensorFormat {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_layer(self, id: &str) -> Self {
        Error::Layer {
            id: id.to_string(),
            source: Box::new(self),
        }
    }

    /// True for failures caused by the data (regions, labels, relevance
    /// signs) rather than by configuration or malformed inputs.
    pub fn is_degenerate_data(&self) -> bool {
        match self {
            Error::EmptyRegion
            | Error::DegenerateRegion(_)
            | Error::ClassNotPredicted(_)
            | Error::SignDegenerate(_) => true,
            Error::Layer { source, .. } => source.is_degenerate_data(),
            _ => false,
        }
    }
}

fn join_issues(issues: &[GraphIssue]) -> String {
    issues
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

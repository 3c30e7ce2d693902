use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("pruning error: {0}")]
    Pruning(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("unexpected tensor `{0}` in manifest")]
    UnexpectedTensor(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor `{name}` out of bounds: {detail}")]
    Bounds { name: String, detail: String },

    #[error("bad weights file: {0}")]
    Format(String),

    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),

    #[error("image parse error: {0}")]
    Image(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the environment (files, formats) rather
    /// than by the computation itself.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Image(_)
                | Error::Format(_)
                | Error::Manifest(_)
                | Error::MissingTensor(_)
                | Error::UnexpectedTensor(_)
                | Error::TensorShape { .. }
                | Error::Bounds { .. }
        )
    }
}
